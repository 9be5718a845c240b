// Zeroth order machinery: grid arithmetic, exact single-probe recovery on
// quadratics, estimator statistics, bit-exact walk restoration, and step
// determinism.

#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "mesp/mezo.hpp"
#include "mesp/strategies.hpp"
#include "mesp/trainer.hpp"

using namespace mesp;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab = 257;
  cfg.lora_rank = 4;
  cfg.max_seq = 32;
  cfg.lora_alpha = 8.0;
  return cfg;
}

Corpus synthetic_corpus(size_t n_bytes, uint64_t seed) {
  Corpus c;
  c.bytes.resize(n_bytes);
  Rng rng(seed);
  for (auto& b : c.bytes) b = static_cast<uint8_t>(rng.uniform_int(0, 255));
  return c;
}

PerturbationSpec constant_direction(double eps, std::vector<double> z) {
  PerturbationSpec spec;
  spec.eps = eps;
  spec.draw = [z = std::move(z)](size_t, int64_t i) { return z[static_cast<size_t>(i)]; };
  return spec;
}

}  // namespace

TEST_CASE("grid rounding lands on exact multiples of the unit") {
  const double unit = GridTraits<double>::unit;
  CHECK(grid_round(0.0, unit) == 0.0);
  CHECK(grid_round(3.0 * unit, unit) == 3.0 * unit);
  CHECK(grid_round(2.4 * unit, unit) == 2.0 * unit);
  CHECK(grid_round(2.6 * unit, unit) == 3.0 * unit);
  CHECK(grid_round(-2.6 * unit, unit) == -3.0 * unit);
  // every result divides the unit without remainder
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    double v = rng.gauss() * 0.1;
    double q = grid_round(v, unit);
    CHECK(q / unit == std::round(q / unit));
    CHECK(std::abs(q - v) <= 0.5 * unit);
  }
}

TEST_CASE("snapped parameters stay on the grid through walk phases") {
  ModelConfig cfg = small_config();
  auto m = init_model<double>(cfg, 3);
  auto params = trainable_params(m);
  snap_to_grid(params);
  PerturbationSpec spec = gaussian_perturbation(mezo_step_seed(7, 0), 1e-5);
  const double unit = GridTraits<double>::unit;
  for (int k : {+1, -2, +1}) {
    apply_walk_phase(params, spec, k);
    for (auto& p : params) {
      const double* d = p.tensor->data();
      for (int64_t i = 0; i < p.tensor->numel(); ++i)
        REQUIRE(d[i] / unit == std::round(d[i] / unit));
    }
  }
}

TEST_CASE("single probe on a 1-d quadratic recovers the gradient exactly") {
  // f(w) = w^2 with w and eps on the binary grid: every intermediate is a
  // short dyadic, the probe arithmetic is exact, and the estimate equals the
  // closed form 2 w z_hat^2 bit for bit
  Tensor<double> w({1});
  w.at(static_cast<int64_t>(0)) = 0.25;
  std::vector<ParamRef<double>> params{{"w", &w}};
  const double eps = 0x1.0p-10;
  auto loss = [&]() { return w.at(static_cast<int64_t>(0)) * w.at(static_cast<int64_t>(0)); };

  SUBCASE("unit direction") {
    auto probe = mezo_probe(params, constant_direction(eps, {1.0}), loss);
    CHECK(probe.coeff == 0.5);  // exactly 2 w
    CHECK(w.at(static_cast<int64_t>(0)) == 0.25);
  }
  SUBCASE("dyadic non-unit direction") {
    const double z = 3.5;
    auto probe = mezo_probe(params, constant_direction(eps, {z}), loss);
    const double z_hat = grid_round(eps * z, GridTraits<double>::unit) / eps;
    CHECK(z_hat == z);
    CHECK(probe.coeff == 2.0 * 0.25 * z);        // directional derivative
    CHECK(probe.coeff * z_hat == 2.0 * 0.25 * z * z);  // estimate, zero error
    CHECK(w.at(static_cast<int64_t>(0)) == 0.25);
  }
}

TEST_CASE("estimator mean over a 10-d quadratic stays within three standard errors") {
  const int dim = 10;
  Tensor<double> w({dim});
  std::vector<double> a(dim);
  for (int i = 0; i < dim; ++i) {
    w.at(static_cast<int64_t>(i)) = 0.1 + 0.05 * i;
    a[i] = 1.0 + 0.2 * i;
  }
  std::vector<ParamRef<double>> params{{"w", &w}};
  auto loss = [&]() {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) {
      double v = w.at(static_cast<int64_t>(i));
      s += a[i] * v * v;
    }
    return s;
  };
  const double eps = 1e-5;
  const int n_probes = 100000;
  std::vector<double> sum(dim, 0.0), sumsq(dim, 0.0);
  for (int k = 0; k < n_probes; ++k) {
    PerturbationSpec spec = gaussian_perturbation(mezo_step_seed(2024, k), eps);
    auto probe = mezo_probe(params, spec, loss);
    for (int i = 0; i < dim; ++i) {
      double z_hat = grid_round(eps * spec.draw(0, i), GridTraits<double>::unit) / eps;
      double g = probe.coeff * z_hat;
      sum[i] += g;
      sumsq[i] += g * g;
    }
  }
  for (int i = 0; i < dim; ++i) {
    double truth = 2.0 * a[i] * w.at(static_cast<int64_t>(i));
    double mean = sum[i] / n_probes;
    double var = sumsq[i] / n_probes - mean * mean;
    double se = std::sqrt(var / n_probes);
    CAPTURE(i);
    CHECK(std::abs(mean - truth) <= 3.0 * se);
  }
}

TEST_CASE("perturbation walks restore model parameters bit exactly") {
  ModelConfig cfg = small_config();
  auto m = init_model<double>(cfg, 3);
  auto params = trainable_params(m);
  snap_to_grid(params);
  for (uint64_t step = 0; step < 5; ++step) {
    PerturbationSpec spec =
        gaussian_perturbation(mezo_step_seed(7, static_cast<int64_t>(step)), 1e-5);
    CHECK(walk_restore_exact(params, spec));
  }
}

TEST_CASE("one hundred no-update steps leave the session parameters untouched") {
  ModelConfig cfg = small_config();
  Corpus corpus = synthetic_corpus(2048, 5);
  for (int pass = 0; pass < 2; ++pass) {
    bool f32 = pass == 1;
    CAPTURE(f32);
    auto run = [&](auto tag) {
      using T = decltype(tag);
      TrainSession<T> session(cfg, Strategy::mezo, 42);
      auto tp = trainable_params(session.params());
      std::vector<std::vector<T>> before;
      for (auto& p : tp) before.push_back(p.tensor->vec());
      StepOptions opts;
      opts.apply_updates = false;
      opts.mezo_seed = 7;
      Rng data_rng(99);
      for (int s = 0; s < 100; ++s) {
        Batch b = sample_batch(corpus, 1, 16, data_rng);
        session.step(b.inputs, b.targets, opts);
      }
      for (size_t i = 0; i < tp.size(); ++i)
        REQUIRE(std::memcmp(tp[i].tensor->data(), before[i].data(),
                            sizeof(T) * before[i].size()) == 0);
    };
    if (f32)
      run(float{});
    else
      run(double{});
  }
}

TEST_CASE("zeroth order steps are deterministic in seed and step index") {
  ModelConfig cfg = small_config();
  Corpus corpus = synthetic_corpus(2048, 5);
  StepOptions opts;
  opts.lr = 1e-3;
  opts.mezo_seed = 7;
  auto run = [&]() {
    TrainSession<double> session(cfg, Strategy::mezo, 42);
    Rng data_rng(99);
    std::vector<double> losses;
    for (int s = 0; s < 5; ++s) {
      Batch b = sample_batch(corpus, 1, 16, data_rng);
      losses.push_back(session.step(b.inputs, b.targets, opts).loss);
    }
    auto tp = trainable_params(session.params());
    std::vector<double> flat;
    for (auto& p : tp)
      for (int64_t i = 0; i < p.tensor->numel(); ++i) flat.push_back(p.tensor->data()[i]);
    return std::make_pair(losses, flat);
  };
  auto [la, fa] = run();
  auto [lb, fb] = run();
  CHECK(la == lb);
  CHECK(fa == fb);
  // updates actually moved the parameters
  TrainSession<double> fresh(cfg, Strategy::mezo, 42);
  auto tp = trainable_params(fresh.params());
  std::vector<double> init;
  for (auto& p : tp)
    for (int64_t i = 0; i < p.tensor->numel(); ++i) init.push_back(p.tensor->data()[i]);
  CHECK(fa != init);
}

TEST_CASE("full estimates are deterministic and proportional to the realized direction") {
  ModelConfig cfg = small_config();
  Corpus corpus = synthetic_corpus(2048, 5);
  auto m = init_model<double>(cfg, 42);
  auto params = trainable_params(m);
  snap_to_grid(params);
  Rng data_rng(99);
  Batch b = sample_batch(corpus, 1, 16, data_rng);
  const double eps = 1e-5;
  auto ea = mezo_estimate_full(m, b.inputs, b.targets, eps, 123);
  auto eb = mezo_estimate_full(m, b.inputs, b.targets, eps, 123);
  CHECK(ea.coeff == eb.coeff);
  CHECK(ea.coeff != 0.0);
  PerturbationSpec spec = gaussian_perturbation(123, eps);
  size_t pi = 0;
  for (auto& p : params) {
    const Tensor<double>& ga = ea.grads.at(p.name);
    const Tensor<double>& gb = eb.grads.at(p.name);
    REQUIRE(std::memcmp(ga.data(), gb.data(), sizeof(double) * static_cast<size_t>(ga.numel())) ==
            0);
    for (int64_t i = 0; i < std::min<int64_t>(ga.numel(), 8); ++i) {
      double z_hat = grid_round(eps * spec.draw(pi, i), GridTraits<double>::unit) / eps;
      CHECK(ga.data()[i] == ea.coeff * z_hat);
    }
    ++pi;
  }
}
