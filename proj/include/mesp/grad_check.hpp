#pragma once
// Finite difference oracles for every backward kernel, plus the dual-run
// agreement check between the store-all reference and the structured
// strategy. All checks run in 64-bit mode; the central difference uses a
// fixed probe width and a symmetric relative error.

#include <cstdint>
#include <string>
#include <vector>

#include "mesp/strategies.hpp"
#include "mesp/trainer.hpp"

namespace mesp {

struct KernelCheckResult {
  std::string kernel;
  double max_rel_err = 0.0;
  int instances = 0;
};

// rel = |a - f| / max(floor, |a| + |f|); the floor keeps near-zero
// coordinate pairs from drowning the metric in quantization noise.
inline double fd_rel_err(double analytic, double fd) {
  double denom = std::abs(analytic) + std::abs(fd);
  if (denom < 1e-6) denom = 1e-6;
  return std::abs(analytic - fd) / denom;
}

// Runs `instances` seeded random cases per kernel (matmul, softmax,
// rmsnorm, silu, cross entropy, the attention composite, the LoRA linear)
// and reports the worst relative error of analytic vs central difference
// over every input coordinate.
std::vector<KernelCheckResult> run_kernel_grad_checks(int instances, double delta, uint64_t seed);

struct StrategyAgreement {
  double max_grad_rel_diff = 0.0;
  double max_grad_abs_diff = 0.0;
  double max_loss_diff = 0.0;
  double max_param_diff = 0.0;
  int steps = 0;
};

// Trains a reference session and a structured session in lockstep from the
// same seed and corpus stream, comparing per-step losses, materialized
// adapter gradients, and final parameters.
template <typename T>
StrategyAgreement run_strategy_agreement(const ModelConfig& cfg, const Corpus& corpus, int steps,
                                         uint64_t seed, uint64_t data_seed, double lr) {
  TrainSession<T> ref(cfg, Strategy::reference, seed);
  TrainSession<T> mesp(cfg, Strategy::mesp, seed);
  StepOptions opts;
  opts.lr = lr;
  opts.materialize_grads = true;
  Rng data_rng(data_seed);
  StrategyAgreement agg;
  agg.steps = steps;
  for (int s = 0; s < steps; ++s) {
    Batch b = sample_batch(corpus, 1, std::min<int64_t>(cfg.max_seq, 64), data_rng);
    auto ra = ref.step(b.inputs, b.targets, opts);
    auto rb = mesp.step(b.inputs, b.targets, opts);
    double ld = std::abs(ra.loss - rb.loss);
    if (ld > agg.max_loss_diff) agg.max_loss_diff = ld;
    for (const auto& [name, ga] : ra.grads) {
      const Tensor<T>& gb = rb.grads.at(name);
      const T* pa = ga.data();
      const T* pb = gb.data();
      for (int64_t i = 0; i < ga.numel(); ++i) {
        double a = static_cast<double>(pa[i]), bfv = static_cast<double>(pb[i]);
        double ad = std::abs(a - bfv);
        if (ad > agg.max_grad_abs_diff) agg.max_grad_abs_diff = ad;
        double denom = std::max(std::abs(bfv), 1e-30);
        double rd = ad / denom;
        if (rd > agg.max_grad_rel_diff) agg.max_grad_rel_diff = rd;
      }
    }
  }
  auto pa = trainable_params(ref.params());
  auto pb = trainable_params(mesp.params());
  for (size_t i = 0; i < pa.size(); ++i) {
    const T* da = pa[i].tensor->data();
    const T* db = pb[i].tensor->data();
    for (int64_t j = 0; j < pa[i].tensor->numel(); ++j) {
      double d = std::abs(static_cast<double>(da[j]) - static_cast<double>(db[j]));
      if (d > agg.max_param_diff) agg.max_param_diff = d;
    }
  }
  return agg;
}

}  // namespace mesp
