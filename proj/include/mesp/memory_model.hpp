#pragma once
// Closed-form predictions for the instrumented allocator peaks. Every
// formula below mirrors the exact allocation schedule of the strategies;
// the model is a max over candidate peak events, each a small polynomial
// in batch, sequence length and the config dimensions. Element counts are
// kept separate from byte widths so the same model serves both dtypes.

#include <cstdint>
#include <string>

#include "mesp/model.hpp"
#include "mesp/strategies.hpp"

namespace mesp {

struct MemoryBreakdown {
  // component element counts (per block unless noted)
  int64_t param_elems = 0;            // whole model, frozen plus adapters
  int64_t checkpoint_elems = 0;       // O: one block input
  int64_t stored_set_elems = 0;       // I: store-all working set of one block
  int64_t recompute_set_elems = 0;    // T: structured working set of one block
  int64_t adapter_grad_elems = 0;     // all adapter gradients of one block
  int64_t logits_elems = 0;           // b n vocab
  // modeled peaks
  int64_t peak_elems = 0;             // live elements at the modeled peak
  int64_t peak_bytes = 0;
  int64_t param_bytes = 0;
  std::string peak_event;             // name of the candidate that attained the max
};

// Element width in bytes for the supported dtypes.
inline constexpr int64_t kF32Width = 4;
inline constexpr int64_t kF64Width = 8;

int64_t model_param_elems(const ModelConfig& cfg);
int64_t block_checkpoint_elems(const ModelConfig& cfg, int64_t batch, int64_t seq);
int64_t block_stored_set_elems(const ModelConfig& cfg, int64_t batch, int64_t seq);
int64_t block_recompute_set_elems(const ModelConfig& cfg, int64_t batch, int64_t seq);
int64_t block_adapter_grad_elems(const ModelConfig& cfg);

MemoryBreakdown modeled_complexity(const ModelConfig& cfg, Strategy strat, int64_t batch,
                                   int64_t seq, int64_t elem_width);

}  // namespace mesp
