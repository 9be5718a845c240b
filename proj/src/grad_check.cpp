#include "mesp/grad_check.hpp"

#include <functional>

namespace mesp {

namespace {

using D = double;

Tensor<D> rand_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<D> t(shape);
  D* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = scale * (2.0 * rng.uniform01() - 1.0);
  return t;
}

double weighted_sum(const Tensor<D>& out, const Tensor<D>& c) {
  double s = 0.0;
  const D* po = out.data();
  const D* pc = c.data();
  for (int64_t i = 0; i < out.numel(); ++i) s += po[i] * pc[i];
  return s;
}

// Central difference of a scalar loss with respect to every coordinate of
// `x`, compared against the provided analytic gradient.
double check_all_coords(Tensor<D>& x, const Tensor<D>& analytic,
                        const std::function<double()>& loss, double delta) {
  double worst = 0.0;
  D* p = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    const D saved = p[i];
    p[i] = saved + delta;
    double lp = loss();
    p[i] = saved - delta;
    double lm = loss();
    p[i] = saved;
    double fd = (lp - lm) / (2.0 * delta);
    double err = fd_rel_err(static_cast<double>(analytic.data()[i]), fd);
    if (err > worst) worst = err;
  }
  return worst;
}

double check_matmul(Rng& rng, double delta) {
  Tensor<D> x = rand_tensor({2, 5, 3}, rng);
  Tensor<D> w = rand_tensor({3, 4}, rng);
  Tensor<D> c = rand_tensor({2, 5, 4}, rng);
  auto loss = [&]() { return weighted_sum(matmul(x, w), c); };
  auto [dx, dw] = matmul_backward(c, x, w);
  double worst = check_all_coords(x, dx, loss, delta);
  return std::max(worst, check_all_coords(w, dw, loss, delta));
}

double check_softmax(Rng& rng, double delta) {
  Tensor<D> s = rand_tensor({2, 3, 6}, rng, 2.0);
  Tensor<D> c = rand_tensor({2, 3, 6}, rng);
  auto loss = [&]() { return weighted_sum(softmax_row(s), c); };
  Tensor<D> alpha = softmax_row(s);
  Tensor<D> ds = softmax_backward(c, alpha);
  return check_all_coords(s, ds, loss, delta);
}

double check_rmsnorm(Rng& rng, double delta) {
  const D eps = 1e-6;
  Tensor<D> x = rand_tensor({2, 3, 5}, rng);
  Tensor<D> gamma = rand_tensor({5}, rng);
  Tensor<D> c = rand_tensor({2, 3, 5}, rng);
  auto loss = [&]() {
    auto nf = rmsnorm_forward(x, gamma, eps);
    return weighted_sum(nf.out, c);
  };
  auto nf = rmsnorm_forward(x, gamma, eps);
  Tensor<D> dx = rmsnorm_backward(c, nf.xhat, gamma, nf.rms);
  return check_all_coords(x, dx, loss, delta);
}

double check_silu(Rng& rng, double delta) {
  Tensor<D> x = rand_tensor({3, 7}, rng, 2.0);
  Tensor<D> c = rand_tensor({3, 7}, rng);
  auto loss = [&]() { return weighted_sum(silu(x), c); };
  Tensor<D> dx = silu_backward(c, x);
  return check_all_coords(x, dx, loss, delta);
}

double check_cross_entropy(Rng& rng, double delta) {
  Tensor<D> logits = rand_tensor({2, 4, 9}, rng, 2.0);
  Tensor<int32_t> targets(Shape{2, 4});
  for (int64_t i = 0; i < targets.numel(); ++i)
    targets.data()[i] = static_cast<int32_t>(rng.uniform_int(0, 8));
  targets.data()[1] = kIgnoreIndex;  // one masked position per instance
  auto loss = [&]() { return cross_entropy_loss(logits, targets); };
  auto ce = cross_entropy(logits, targets);
  return check_all_coords(logits, ce.dlogits, loss, delta);
}

double check_attention(Rng& rng, double delta) {
  const Shape qs{1, 2, 5, 3};
  Tensor<D> q = rand_tensor(qs, rng);
  Tensor<D> k = rand_tensor(qs, rng);
  Tensor<D> v = rand_tensor(qs, rng);
  Tensor<D> c = rand_tensor(qs, rng);
  auto loss = [&]() { return weighted_sum(attention_forward(q, k, v).out, c); };
  auto fwd = attention_forward(q, k, v);
  auto grads = attention_backward(c, q, k, v, fwd.alpha);
  double worst = check_all_coords(q, grads.dq, loss, delta);
  worst = std::max(worst, check_all_coords(k, grads.dk, loss, delta));
  return std::max(worst, check_all_coords(v, grads.dv, loss, delta));
}

double check_lora_linear(Rng& rng, double delta) {
  LoraSite<D> site;
  site.w0 = rand_tensor({6, 5}, rng);
  site.adapter.A = rand_tensor({6, 2}, rng);
  site.adapter.B = rand_tensor({2, 5}, rng);
  site.adapter.s = 2.0;
  Tensor<D> x = rand_tensor({2, 4, 6}, rng);
  Tensor<D> c = rand_tensor({2, 4, 5}, rng);
  auto loss = [&]() { return weighted_sum(lora_linear_forward(x, site).y, c); };
  auto back = lora_linear_backward(c, x, site);
  double worst = check_all_coords(x, back.dx, loss, delta);
  worst = std::max(worst, check_all_coords(site.adapter.A, back.grads.dA, loss, delta));
  return std::max(worst, check_all_coords(site.adapter.B, back.grads.dB, loss, delta));
}

}  // namespace

std::vector<KernelCheckResult> run_kernel_grad_checks(int instances, double delta, uint64_t seed) {
  if (instances < 1) throw std::invalid_argument("run_kernel_grad_checks: instances must be >= 1");
  if (delta <= 0.0) throw std::invalid_argument("run_kernel_grad_checks: delta must be positive");
  struct Entry {
    const char* name;
    double (*fn)(Rng&, double);
  };
  const Entry entries[] = {
      {"matmul", check_matmul},     {"softmax", check_softmax},
      {"rmsnorm", check_rmsnorm},   {"silu", check_silu},
      {"cross_entropy", check_cross_entropy}, {"attention", check_attention},
      {"lora_linear", check_lora_linear},
  };
  std::vector<KernelCheckResult> results;
  for (const auto& e : entries) {
    KernelCheckResult r;
    r.kernel = e.name;
    r.instances = instances;
    for (int i = 0; i < instances; ++i) {
      Rng rng(hash3(seed, static_cast<uint64_t>(i), std::hash<std::string>{}(e.name)));
      r.max_rel_err = std::max(r.max_rel_err, e.fn(rng, delta));
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace mesp
