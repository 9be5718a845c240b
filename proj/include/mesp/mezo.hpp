#pragma once
// Zeroth order gradient estimation: perturb the adapters along a random
// direction, difference two loss probes, walk back, and step along the
// direction scaled by the probe coefficient. Memory stays at inference
// level because directions are replayed from a counter RNG instead of
// being stored.
//
// Bit exact restoration is engineered, not assumed: every perturbation is
// quantized to a fixed binary grid (a power of two unit), parameters in a
// zeroth order session are kept on that grid, and the +1 / -2 / +1 walk
// moves in integer grid steps. All of that arithmetic is exact in IEEE
// doubles, so the restored parameters match the originals bit for bit.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mesp/model.hpp"

namespace mesp {

template <typename T>
struct GridTraits;

template <>
struct GridTraits<float> {
  static constexpr double unit = 0x1.0p-16;
  static constexpr double default_eps = 1e-3;
};

template <>
struct GridTraits<double> {
  static constexpr double unit = 0x1.0p-30;
  static constexpr double default_eps = 1e-5;
};

// Round to the nearest multiple of a power-of-two unit. The division and
// multiplication are exact (power of two scaling), so the only rounding is
// the integer round itself.
inline double grid_round(double v, double unit) { return std::round(v / unit) * unit; }

template <typename T>
void snap_to_grid(std::vector<ParamRef<T>>& params) {
  for (auto& p : params) {
    T* data = p.tensor->data();
    for (int64_t i = 0; i < p.tensor->numel(); ++i)
      data[i] = static_cast<T>(grid_round(static_cast<double>(data[i]), GridTraits<T>::unit));
  }
}

// Direction source for one step. `draw` must be pure: the walk calls it once
// per phase per element and relies on identical values each time.
struct PerturbationSpec {
  double eps = 0.0;
  std::function<double(size_t param_idx, int64_t elem_idx)> draw;
};

inline PerturbationSpec gaussian_perturbation(uint64_t step_seed, double eps) {
  PerturbationSpec spec;
  spec.eps = eps;
  spec.draw = [step_seed](size_t param_idx, int64_t elem_idx) {
    return counter_gauss(step_seed, static_cast<uint64_t>(param_idx),
                         static_cast<uint64_t>(elem_idx));
  };
  return spec;
}

// w += k * q for every element, q = grid_round(eps * z). k is a small
// integer, so parameters that start on the grid stay on it and the phase
// sequence +1, -2, +1 returns them exactly.
template <typename T>
void apply_walk_phase(std::vector<ParamRef<T>>& params, const PerturbationSpec& spec, int k) {
  const double unit = GridTraits<T>::unit;
  for (size_t p = 0; p < params.size(); ++p) {
    T* data = params[p].tensor->data();
    const int64_t n = params[p].tensor->numel();
    for (int64_t i = 0; i < n; ++i) {
      double q = grid_round(spec.eps * spec.draw(p, i), unit);
      data[i] = static_cast<T>(static_cast<double>(data[i]) + static_cast<double>(k) * q);
    }
  }
}

struct MezoProbeResult {
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double coeff = 0.0;  // (loss_plus - loss_minus) / (2 eps)
};

// Two sided probe: +eps z, -eps z, restore. The loss closure must not
// mutate the parameters.
template <typename T>
MezoProbeResult mezo_probe(std::vector<ParamRef<T>>& params, const PerturbationSpec& spec,
                           const std::function<double()>& loss_fn) {
  detail::require(spec.eps > 0.0, "mezo_probe: eps must be positive, got " +
                                      std::to_string(spec.eps));
  MezoProbeResult res;
  apply_walk_phase(params, spec, +1);
  res.loss_plus = loss_fn();
  apply_walk_phase(params, spec, -2);
  res.loss_minus = loss_fn();
  apply_walk_phase(params, spec, +1);
  res.coeff = (res.loss_plus - res.loss_minus) / (2.0 * spec.eps);
  return res;
}

// Walks out and back with no update and reports whether every parameter
// byte matched afterwards.
template <typename T>
bool walk_restore_exact(std::vector<ParamRef<T>>& params, const PerturbationSpec& spec) {
  std::vector<std::vector<T>> before;
  before.reserve(params.size());
  for (auto& p : params) before.push_back(p.tensor->vec());
  apply_walk_phase(params, spec, +1);
  apply_walk_phase(params, spec, -2);
  apply_walk_phase(params, spec, +1);
  for (size_t i = 0; i < params.size(); ++i) {
    const T* now = params[i].tensor->data();
    if (std::memcmp(now, before[i].data(), sizeof(T) * before[i].size()) != 0) return false;
  }
  return true;
}

template <typename T>
struct MezoStepOptions {
  double eps = GridTraits<T>::default_eps;
  double lr = 1e-4;
  uint64_t seed = 0;
  bool apply_update = true;
};

struct MezoStepResult {
  double loss = 0.0;  // mean of the two probe losses
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double coeff = 0.0;
};

inline uint64_t mezo_step_seed(uint64_t base_seed, int64_t step_index) {
  return hash3(base_seed, static_cast<uint64_t>(step_index), 0x6d657a6fULL);
}

// One full zeroth order step on the adapters. The update increment
// grid_round(lr * coeff * z) keeps parameters on the grid, so later steps
// restore exactly too. The optional ledger sees only the rolling forward
// activations and logits of the probes: inference level memory.
template <typename T>
MezoStepResult mezo_step(ModelParams<T>& m, const Tensor<int32_t>& inputs,
                         const Tensor<int32_t>& targets, const MezoStepOptions<T>& opts,
                         int64_t step_index, Ledger* led = nullptr) {
  auto params = trainable_params(m);
  PerturbationSpec spec = gaussian_perturbation(mezo_step_seed(opts.seed, step_index), opts.eps);
  auto loss_fn = [&]() { return model_loss(m, inputs, targets, led); };
  MezoProbeResult probe = mezo_probe(params, spec, loss_fn);
  if (opts.apply_update) {
    const double unit = GridTraits<T>::unit;
    for (size_t p = 0; p < params.size(); ++p) {
      T* data = params[p].tensor->data();
      const int64_t n = params[p].tensor->numel();
      for (int64_t i = 0; i < n; ++i) {
        double step = grid_round(opts.lr * probe.coeff * spec.draw(p, i), unit);
        data[i] = static_cast<T>(static_cast<double>(data[i]) - step);
      }
    }
  }
  MezoStepResult res;
  res.loss_plus = probe.loss_plus;
  res.loss_minus = probe.loss_minus;
  res.coeff = probe.coeff;
  res.loss = 0.5 * (probe.loss_plus + probe.loss_minus);
  return res;
}

template <typename T>
struct MezoEstimate {
  std::map<std::string, Tensor<T>> grads;
  double coeff = 0.0;
};

// Materializes the full estimated gradient coeff * z_hat for analysis,
// where z_hat is the direction actually realized after grid quantization.
// Training never builds these tensors; only the quality study does.
template <typename T>
MezoEstimate<T> mezo_estimate_full(ModelParams<T>& m, const Tensor<int32_t>& inputs,
                                   const Tensor<int32_t>& targets, double eps,
                                   uint64_t step_seed) {
  auto params = trainable_params(m);
  PerturbationSpec spec = gaussian_perturbation(step_seed, eps);
  auto loss_fn = [&]() { return model_loss(m, inputs, targets); };
  MezoProbeResult probe = mezo_probe(params, spec, loss_fn);
  const double unit = GridTraits<T>::unit;
  MezoEstimate<T> est;
  est.coeff = probe.coeff;
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor<T> g(params[p].tensor->shape());
    T* out = g.data();
    for (int64_t i = 0; i < g.numel(); ++i) {
      double z_hat = grid_round(eps * spec.draw(p, i), unit) / eps;
      out[i] = static_cast<T>(probe.coeff * z_hat);
    }
    est.grads.emplace(params[p].name, std::move(g));
  }
  return est;
}

}  // namespace mesp
