#include "mesp/memory_model.hpp"

#include <algorithm>
#include <array>
#include <utility>
#include <vector>

namespace mesp {

int64_t model_param_elems(const ModelConfig& cfg) {
  const int64_t d = cfg.d_model, f = cfg.d_ff, r = cfg.lora_rank, V = cfg.vocab;
  // per block: four d x d sites, gate and up d x f, down f x d, two norms,
  // adapters A and B on all seven sites
  int64_t per_block = 4 * d * d + 2 * d * f + f * d + 2 * d + (11 * d + 3 * f) * r;
  int64_t globals = V * d + cfg.max_seq * d + d + d * V;
  return cfg.n_layers * per_block + globals;
}

int64_t block_checkpoint_elems(const ModelConfig& cfg, int64_t batch, int64_t seq) {
  return batch * seq * cfg.d_model;
}

// Structured working set: xhat1, norm1_out, q/k/v heads, attn_merged, x2,
// xhat2, norm2_out (9 d-wide), gate_pre, up_proj plus the act and prod pair
// recomputed at the start of the backward chain (4 f-wide), both rms
// vectors, and the attention weights.
int64_t block_recompute_set_elems(const ModelConfig& cfg, int64_t batch, int64_t seq) {
  const int64_t d = cfg.d_model, f = cfg.d_ff, H = cfg.n_heads;
  return batch * seq * (9 * d + 4 * f + 2) + batch * H * seq * seq;
}

// Store-all working set: the structured set plus the seven h projections.
int64_t block_stored_set_elems(const ModelConfig& cfg, int64_t batch, int64_t seq) {
  return block_recompute_set_elems(cfg, batch, seq) + 7 * batch * seq * cfg.lora_rank;
}

int64_t block_adapter_grad_elems(const ModelConfig& cfg) {
  return (11 * cfg.d_model + 3 * cfg.d_ff) * cfg.lora_rank;
}

namespace {

struct Candidate {
  const char* name;
  int64_t elems;
};

// Transient envelopes of the shared backward chain, on top of whatever
// per-block set is resident. dY is included in each.
struct ChainEvents {
  int64_t mlp;        // down backward fanout: dY, d_prod, d_up, d_act, d_gate
  int64_t attn_wide;  // softmax backward: both n x n gradients live at once
  int64_t attn_tail;  // dq and dk materialized while dscores is still live
  int64_t qkv_tail;   // v site dx lands while dq..k_res.dx, dh and every
                      // adapter gradient of the block are still resident
  int64_t max() const { return std::max({mlp, attn_wide, attn_tail, qkv_tail}); }
};

ChainEvents chain_events(const ModelConfig& cfg, int64_t b, int64_t n) {
  const int64_t d = cfg.d_model, f = cfg.d_ff, H = cfg.n_heads, r = cfg.lora_rank;
  const int64_t bnd = b * n * d, bnf = b * n * f, att = b * H * n * n;
  const int64_t g_down = r * (f + d);           // grads live after the down site
  const int64_t g_mlp_o = 3 * r * (d + f) + 2 * r * d;  // down, up, gate, o
  ChainEvents e;
  e.mlp = bnd + 4 * bnf + g_down;
  e.attn_wide = 4 * bnd + 2 * att + g_mlp_o;
  e.attn_tail = 6 * bnd + att + g_mlp_o;
  e.qkv_tail = 6 * bnd + b * n * r + block_adapter_grad_elems(cfg);
  return e;
}

MemoryBreakdown finish(MemoryBreakdown bd, const std::vector<Candidate>& cands,
                       int64_t param_elems, int64_t elem_width) {
  int64_t best = 0;
  const char* best_name = "params";
  for (const auto& c : cands)
    if (c.elems > best) {
      best = c.elems;
      best_name = c.name;
    }
  bd.peak_elems = param_elems + best;
  bd.peak_bytes = bd.peak_elems * elem_width;
  bd.param_bytes = param_elems * elem_width;
  bd.peak_event = best_name;
  return bd;
}

}  // namespace

MemoryBreakdown modeled_complexity(const ModelConfig& cfg, Strategy strat, int64_t b, int64_t n,
                                   int64_t elem_width) {
  cfg.validate();
  const int64_t d = cfg.d_model, f = cfg.d_ff, r = cfg.lora_rank, V = cfg.vocab;
  const int64_t L = cfg.n_layers;
  const int64_t bnd = b * n * d, bnf = b * n * f, bnV = b * n * V, bn = b * n;

  MemoryBreakdown bd;
  bd.param_elems = model_param_elems(cfg);
  bd.checkpoint_elems = block_checkpoint_elems(cfg, b, n);
  bd.stored_set_elems = block_stored_set_elems(cfg, b, n);
  bd.recompute_set_elems = block_recompute_set_elems(cfg, b, n);
  bd.adapter_grad_elems = block_adapter_grad_elems(cfg);
  bd.logits_elems = bnV;

  const ChainEvents ev = chain_events(cfg, b, n);
  std::vector<Candidate> cands;

  switch (strat) {
    case Strategy::reference: {
      // all L stored sets stay live until each block's chain releases them,
      // and each finished chain parks its adapter gradients until the end of
      // the step. Walking from the last block to the first trades one stored
      // set per block for one gradient set, so only the two endpoint blocks
      // can host the peak.
      const int64_t base = L * bd.stored_set_elems;
      const int64_t shallow =
          bd.stored_set_elems + (L - 1) * bd.adapter_grad_elems;
      cands = {
          {"head_forward", base + 2 * bnd + bn + bnV},
          {"loss_grad", base + bnd + bn + 2 * bnV},
          {"head_backward", base + 3 * bnd + bn + bnV},
          {"chain_mlp", base + ev.mlp},
          {"chain_attn_wide", base + ev.attn_wide},
          {"chain_attn_tail", base + ev.attn_tail},
          {"chain_qkv_tail", base + ev.qkv_tail},
          {"chain_shallow_grads", shallow + ev.max()},
          {"pending_updates", L * bd.adapter_grad_elems},
      };
      break;
    }
    case Strategy::mesp:
    case Strategy::mebp: {
      // forward keeps L checkpoints and the logits; each backward segment
      // adds one structured set. The last block's segment also re-derives
      // the head norm and pushes the loss gradient through it.
      const int64_t ckpts = L * bd.checkpoint_elems;
      const int64_t set = bd.recompute_set_elems;
      // the h projections of blocks not yet walked, resident in the
      // store-h emulation only; at the deepest segment that is all L blocks
      const int64_t held_h = (strat == Strategy::mebp) ? 7 * L * b * n * r : 0;
      cands = {
          {"head_forward", ckpts + held_h + bnd + bnV},
          {"loss_grad", ckpts + held_h + 2 * bnV},
          {"head_backward", ckpts + held_h + set - 2 * bnf + 4 * bnd + bn + bnV},
          {"chain_mlp", ckpts + held_h + set + ev.mlp},
          {"chain_attn_wide", ckpts + held_h + set + ev.attn_wide},
          {"chain_attn_tail", ckpts + held_h + set + ev.attn_tail},
          {"chain_qkv_tail", ckpts + held_h + set + ev.qkv_tail},
      };
      break;
    }
    case Strategy::mezo: {
      // two probes of a rolling forward: peak is the last activation next
      // to the logits (or two activations during a block handoff)
      cands = {
          {"rolling_handoff", 2 * bnd},
          {"rolling_logits", bnd + bnV},
      };
      break;
    }
  }
  return finish(std::move(bd), cands, bd.param_elems, elem_width);
}

}  // namespace mesp
