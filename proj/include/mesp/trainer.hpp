#pragma once
// Byte-level corpus handling and the training driver. A corpus is any file
// read as raw bytes; token ids are byte values, so the vocabulary needs at
// least 256 entries. Batch sampling and the step loop are deterministic in
// (corpus, data_seed), which is what makes dual-strategy runs comparable.

#include <cstdint>
#include <string>
#include <vector>

#include "mesp/strategies.hpp"

namespace mesp {

struct Corpus {
  std::vector<uint8_t> bytes;
};

Corpus load_corpus(const std::string& path);

struct Batch {
  Tensor<int32_t> inputs;   // [b, n]
  Tensor<int32_t> targets;  // [b, n], inputs shifted left by one
};

// Uniformly random windows; needs seq + 1 trailing bytes per row.
Batch sample_batch(const Corpus& corpus, int64_t batch, int64_t seq, Rng& rng);

struct Trajectory {
  std::vector<int64_t> steps;
  std::vector<double> losses;
  int64_t peak_bytes = 0;  // session ledger peak across the run

  double initial_loss() const { return losses.empty() ? 0.0 : losses.front(); }
  double final_loss() const { return losses.empty() ? 0.0 : losses.back(); }
};

struct TrainRunOptions {
  int64_t steps = 100;
  int64_t batch = 1;
  int64_t seq = 64;
  int64_t eval_interval = 1;  // record every k-th step (step 0 and the last always)
  uint64_t data_seed = 99;
  StepOptions step;
};

template <typename T>
Trajectory train_loop(TrainSession<T>& session, const Corpus& corpus,
                      const TrainRunOptions& opts) {
  if (opts.steps < 1) throw std::invalid_argument("train_loop: steps must be >= 1");
  if (opts.eval_interval < 1)
    throw std::invalid_argument("train_loop: eval_interval must be >= 1");
  Rng data_rng(opts.data_seed);
  Trajectory traj;
  for (int64_t s = 0; s < opts.steps; ++s) {
    Batch b = sample_batch(corpus, opts.batch, opts.seq, data_rng);
    auto res = session.step(b.inputs, b.targets, opts.step);
    if (s % opts.eval_interval == 0 || s == opts.steps - 1) {
      traj.steps.push_back(s);
      traj.losses.push_back(res.loss);
    }
  }
  traj.peak_bytes = session.ledger().peak_bytes();
  return traj;
}

}  // namespace mesp
