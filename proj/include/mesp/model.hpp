#pragma once
// Decoder-only toy transformer with frozen base weights and LoRA adapters
// on all seven linear sites per block (q, k, v, o, gate, up, down). The
// block and model forward passes run one fixed kernel sequence regardless
// of what they retain, so the three gradient strategies see bit-identical
// activations; only the retention mode differs.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mesp/kernels.hpp"
#include "mesp/ledger.hpp"
#include "mesp/rng.hpp"
#include "mesp/tensor.hpp"

namespace mesp {

// ---------------------------------------------------------------------------
// configuration and parameters
// ---------------------------------------------------------------------------

struct ModelConfig {
  int64_t n_layers = 4;
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t d_ff = 256;
  int64_t vocab = 257;  // byte vocabulary plus one reserved pad id
  int64_t lora_rank = 8;
  int64_t max_seq = 256;
  double lora_alpha = 16.0;
  double norm_eps = 1e-6;
  bool tie_embeddings = false;

  int64_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("config: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    if (lora_rank < 1) throw std::invalid_argument("config: lora_rank must be >= 1");
    if (vocab < 2 || d_ff < 1 || max_seq < 1)
      throw std::invalid_argument("config: vocab, d_ff and max_seq must be positive");
  }
};

enum class Site : int { q = 0, k, v, o, gate, up, down };

inline constexpr std::array<Site, 7> kSiteOrder = {Site::q,  Site::k,    Site::v, Site::o,
                                                   Site::gate, Site::up, Site::down};

inline const char* site_name(Site s) {
  switch (s) {
    case Site::q: return "q";
    case Site::k: return "k";
    case Site::v: return "v";
    case Site::o: return "o";
    case Site::gate: return "gate";
    case Site::up: return "up";
    case Site::down: return "down";
  }
  return "?";
}

template <typename T>
struct LoraAdapter {
  Tensor<T> A;  // [d_in, r], small gaussian init
  Tensor<T> B;  // [r, d_out], zero init so fresh adapters are inert
  T s = T(1);   // alpha / r
};

template <typename T>
struct LoraSite {
  Tensor<T> w0;  // frozen base weight [d_in, d_out]
  LoraAdapter<T> adapter;
};

template <typename T>
struct BlockParams {
  LoraSite<T> q, k, v, o, gate, up, down;
  Tensor<T> norm1_gamma, norm2_gamma;

  LoraSite<T>& site(Site s) {
    switch (s) {
      case Site::q: return q;
      case Site::k: return k;
      case Site::v: return v;
      case Site::o: return o;
      case Site::gate: return gate;
      case Site::up: return up;
      case Site::down: return down;
    }
    throw std::logic_error("block: bad site");
  }
  const LoraSite<T>& site(Site s) const { return const_cast<BlockParams*>(this)->site(s); }
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  Tensor<T> tok_emb;      // [vocab, d_model], frozen
  Tensor<T> pos_emb;      // [max_seq, d_model], frozen learned-absolute style
  std::vector<BlockParams<T>> blocks;
  Tensor<T> final_gamma;  // [d_model], frozen
  Tensor<T> out_proj;     // [d_model, vocab], frozen (copy of tok_emb^T when tied)
};

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams<T> m;
  m.cfg = cfg;
  const double base_std = 0.02;
  m.tok_emb = Tensor<T>::gaussian({cfg.vocab, cfg.d_model}, rng, base_std);
  m.pos_emb = Tensor<T>::gaussian({cfg.max_seq, cfg.d_model}, rng, base_std);
  T s = static_cast<T>(cfg.lora_alpha / static_cast<double>(cfg.lora_rank));
  auto make_site = [&](int64_t d_in, int64_t d_out) {
    LoraSite<T> site;
    site.w0 = Tensor<T>::gaussian({d_in, d_out}, rng, base_std);
    site.adapter.A = Tensor<T>::gaussian({d_in, cfg.lora_rank}, rng, base_std);
    site.adapter.B = Tensor<T>(Shape{cfg.lora_rank, d_out});
    site.adapter.s = s;
    return site;
  };
  m.blocks.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& blk : m.blocks) {
    blk.q = make_site(cfg.d_model, cfg.d_model);
    blk.k = make_site(cfg.d_model, cfg.d_model);
    blk.v = make_site(cfg.d_model, cfg.d_model);
    blk.o = make_site(cfg.d_model, cfg.d_model);
    blk.gate = make_site(cfg.d_model, cfg.d_ff);
    blk.up = make_site(cfg.d_model, cfg.d_ff);
    blk.down = make_site(cfg.d_ff, cfg.d_model);
    blk.norm1_gamma = Tensor<T>::full({cfg.d_model}, T(1));
    blk.norm2_gamma = Tensor<T>::full({cfg.d_model}, T(1));
  }
  m.final_gamma = Tensor<T>::full({cfg.d_model}, T(1));
  if (cfg.tie_embeddings) {
    m.out_proj = Tensor<T>(Shape{cfg.d_model, cfg.vocab});
    for (int64_t i = 0; i < cfg.vocab; ++i)
      for (int64_t j = 0; j < cfg.d_model; ++j) m.out_proj.at(j, i) = m.tok_emb.at(i, j);
  } else {
    m.out_proj = Tensor<T>::gaussian({cfg.d_model, cfg.vocab}, rng, base_std);
  }
  return m;
}

// Named handle on one parameter tensor. Enumeration order is fixed
// (block-major, site order q,k,v,o,gate,up,down, A before B) because the
// zeroth order perturbation walk and the report layouts both index it.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
std::vector<ParamRef<T>> trainable_params(ModelParams<T>& m) {
  std::vector<ParamRef<T>> out;
  for (size_t b = 0; b < m.blocks.size(); ++b)
    for (Site s : kSiteOrder) {
      std::string prefix = "blk" + std::to_string(b) + "." + site_name(s) + ".";
      out.push_back({prefix + "A", &m.blocks[b].site(s).adapter.A});
      out.push_back({prefix + "B", &m.blocks[b].site(s).adapter.B});
    }
  return out;
}

template <typename T>
std::vector<ParamRef<T>> all_params(ModelParams<T>& m) {
  std::vector<ParamRef<T>> out;
  out.push_back({"tok_emb", &m.tok_emb});
  out.push_back({"pos_emb", &m.pos_emb});
  for (size_t b = 0; b < m.blocks.size(); ++b) {
    std::string bp = "blk" + std::to_string(b) + ".";
    for (Site s : kSiteOrder) {
      std::string prefix = bp + site_name(s) + ".";
      out.push_back({prefix + "w0", &m.blocks[b].site(s).w0});
      out.push_back({prefix + "A", &m.blocks[b].site(s).adapter.A});
      out.push_back({prefix + "B", &m.blocks[b].site(s).adapter.B});
    }
    out.push_back({bp + "norm1_gamma", &m.blocks[b].norm1_gamma});
    out.push_back({bp + "norm2_gamma", &m.blocks[b].norm2_gamma});
  }
  out.push_back({"final_gamma", &m.final_gamma});
  out.push_back({"out_proj", &m.out_proj});
  return out;
}

// ---------------------------------------------------------------------------
// ledger hook: lets the shared forward/backward code record allocations on
// behalf of whichever strategy is driving. A null hook records nothing.
// ---------------------------------------------------------------------------

struct LedgerHook {
  Ledger* ledger = nullptr;
  int32_t block = -1;

  template <typename T>
  void on_alloc(const Tensor<T>& t, Category c) const {
    if (ledger) ledger->alloc(t.id(), t.bytes(), c, block);
  }
  template <typename T>
  void on_release(const Tensor<T>& t) const {
    if (ledger) ledger->release(t.id());
  }
};

// ---------------------------------------------------------------------------
// LoRA linear: y = x w0 + s * ((x A) B)
// ---------------------------------------------------------------------------

template <typename T>
struct LoraForwardResult {
  Tensor<T> y;
  Tensor<T> h;  // x A, only materialized when keep_h is set
};

template <typename T>
LoraForwardResult<T> lora_linear_forward(const Tensor<T>& x, const LoraSite<T>& site,
                                         bool keep_h = false) {
  detail::require(x.shape().back() == site.w0.dim(0),
                  "lora_linear_forward: input " + shape_str(x.shape()) +
                      " does not match weight " + shape_str(site.w0.shape()));
  LoraForwardResult<T> res;
  Tensor<T> base = matmul(x, site.w0);
  Tensor<T> h = matmul(x, site.adapter.A);
  Tensor<T> delta = matmul(h, site.adapter.B);
  res.y = add_scaled(base, delta, site.adapter.s);
  if (keep_h) res.h = std::move(h);
  return res;
}

template <typename T>
struct LoraGrads {
  Tensor<T> dA, dB;
};

template <typename T>
struct LoraBackwardResult {
  LoraGrads<T> grads;
  Tensor<T> dx;
};

namespace detail {

template <typename T>
void scale_inplace(Tensor<T>& t, T s) {
  T* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] *= s;
}

// acc += g w^T, reusing the accumulator buffer.
template <typename T>
void matmul_backward_input_acc(const Tensor<T>& g, const Tensor<T>& w, Tensor<T>& acc) {
  int64_t p = w.dim(0), q = w.dim(1);
  int64_t rows = leading_rows(g.shape(), 1);
  const T* pg = g.data();
  const T* pw = w.data();
  T* pa = acc.data();
  for (int64_t i = 0; i < rows; ++i) {
    const T* grow = pg + i * q;
    T* arow = pa + i * p;
    for (int64_t k = 0; k < p; ++k) {
      const T* wrow = pw + k * q;
      T accv = 0;
      for (int64_t j = 0; j < q; ++j) accv += grow[j] * wrow[j];
      arow[k] += accv;
    }
  }
}

}  // namespace detail

// Backward for y = x w0 + s (x A) B with frozen w0:
//   dB = h^T (s g)          with h = x A
//   dh = (s g) B^T
//   dA = x^T dh
//   dx = dh A^T + g w0^T
// h is taken from the caller when it stored one, otherwise recomputed here
// and released immediately after dB. Gradient buffers are recorded through
// the hook; `ledger_h` controls whether a recomputed h shows up as a
// transient h_projection allocation (the recompute strategy) or is treated
// as already resident (the store-h emulation and the store-all reference).
template <typename T>
LoraBackwardResult<T> lora_linear_backward(const Tensor<T>& g, const Tensor<T>& x,
                                           const LoraSite<T>& site,
                                           const Tensor<T>* h_stored = nullptr,
                                           const LedgerHook& hook = {}, bool ledger_h = false) {
  detail::require(x.shape().back() == site.w0.dim(0) && g.shape().back() == site.w0.dim(1),
                  "lora_linear_backward: shapes " + shape_str(x.shape()) + ", " +
                      shape_str(g.shape()) + " do not match weight " + shape_str(site.w0.shape()));
  const T s = site.adapter.s;
  const int64_t d_in = site.w0.dim(0);
  const int64_t d_out = site.w0.dim(1);
  const int64_t r = site.adapter.A.dim(1);

  LoraBackwardResult<T> res;
  {
    Tensor<T> h_local;
    const Tensor<T>* h = h_stored;
    if (!h) {
      h_local = matmul(x, site.adapter.A);
      if (ledger_h) hook.on_alloc(h_local, Category::h_projection);
      h = &h_local;
    }
    res.grads.dB = matmul_backward_weight(g, *h, r, d_out);
    detail::scale_inplace(res.grads.dB, s);
    hook.on_alloc(res.grads.dB, Category::gradient);
    if (!h_stored && ledger_h) hook.on_release(h_local);
    // h (recomputed case) dies here, before any large gradient buffer is live
  }
  Tensor<T> dh = matmul_backward_input(g, site.adapter.B);
  detail::scale_inplace(dh, s);
  hook.on_alloc(dh, Category::gradient);
  res.grads.dA = matmul_backward_weight(dh, x, d_in, r);
  hook.on_alloc(res.grads.dA, Category::gradient);
  res.dx = matmul_backward_input(g, site.w0);
  detail::matmul_backward_input_acc(dh, site.adapter.A, res.dx);
  hook.on_alloc(res.dx, Category::gradient);
  hook.on_release(dh);
  return res;
}

// ---------------------------------------------------------------------------
// attention with causal mask
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionForwardResult {
  Tensor<T> out;    // [b, H, n, hd]
  Tensor<T> alpha;  // [b, H, n, n] attention weights
};

template <typename T>
void apply_causal_mask(Tensor<T>& scores) {
  detail::require(scores.rank() == 4 && scores.dim(2) == scores.dim(3),
                  "apply_causal_mask: expected square scores, got " + shape_str(scores.shape()));
  int64_t n = scores.dim(2);
  int64_t mats = scores.numel() / (n * n);
  T* p = scores.data();
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int64_t m = 0; m < mats; ++m)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = i + 1; j < n; ++j) p[(m * n + i) * n + j] = neg_inf;
}

template <typename T>
AttentionForwardResult<T> attention_forward(const Tensor<T>& q, const Tensor<T>& k,
                                            const Tensor<T>& v, bool causal = true) {
  detail::require(q.rank() == 4, "attention_forward: expected [b,H,n,hd], got " +
                                     shape_str(q.shape()));
  T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(3))));
  Tensor<T> scores = bmm_nt(q, k, inv_sqrt);
  if (causal) apply_causal_mask(scores);
  int64_t invalid = 0;
  Tensor<T> alpha = softmax_row(scores, &invalid);
  if (invalid > 0)
    throw std::domain_error("attention_forward: " + std::to_string(invalid) +
                            " fully masked score rows");
  AttentionForwardResult<T> res;
  res.out = bmm(alpha, v);
  res.alpha = std::move(alpha);
  return res;
}

template <typename T>
struct AttentionBackwardResult {
  Tensor<T> dq, dk, dv;  // [b, H, n, hd] each
};

// Backward through out = softmax(q k^T / sqrt(hd)) v. Masked positions have
// alpha == 0, so the softmax backward zeroes them without special cases.
template <typename T>
AttentionBackwardResult<T> attention_backward(const Tensor<T>& d_out, const Tensor<T>& q,
                                              const Tensor<T>& k, const Tensor<T>& v,
                                              const Tensor<T>& alpha, const LedgerHook& hook = {}) {
  T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(3))));
  AttentionBackwardResult<T> res;
  res.dv = bmm_tn(alpha, d_out);
  hook.on_alloc(res.dv, Category::gradient);
  Tensor<T> dalpha = bmm_nt(d_out, v);
  hook.on_alloc(dalpha, Category::gradient);
  Tensor<T> dscores = softmax_backward(dalpha, alpha);
  hook.on_alloc(dscores, Category::gradient);
  hook.on_release(dalpha);
  dalpha.clear();
  res.dq = bmm(dscores, k, inv_sqrt);
  hook.on_alloc(res.dq, Category::gradient);
  res.dk = bmm_tn(dscores, q, inv_sqrt);
  hook.on_alloc(res.dk, Category::gradient);
  hook.on_release(dscores);
  return res;
}

// ---------------------------------------------------------------------------
// transformer block
// ---------------------------------------------------------------------------

enum class ForwardMode {
  store_all,           // keep every backward-relevant intermediate, including h
  checkpoint_only,     // keep nothing; caller stores the block input
  backward_recompute,  // keep the structured-backward working set, recompute h later
};

// The retained working set of one block. store_all additionally keeps act,
// prod and the seven h projections; the recompute mode re-derives those
// during its backward sweep.
template <typename T>
struct BlockIntermediates {
  Tensor<T> xhat1, norm1_out, rms1;
  Tensor<T> q_heads, k_heads, v_heads;  // [b, H, n, hd]
  Tensor<T> alpha;                      // [b, H, n, n]
  Tensor<T> attn_merged;                // [b, n, d]
  Tensor<T> x2;                         // post-attention residual
  Tensor<T> xhat2, norm2_out, rms2;
  Tensor<T> gate_pre, up_proj;          // [b, n, f]
  // store_all extras
  Tensor<T> act, prod;
  Tensor<T> h_q, h_k, h_v, h_o, h_gate, h_up, h_down;
  bool has_extras = false;

  template <typename F>
  void for_each(F f) {
    f(xhat1), f(norm1_out), f(rms1);
    f(q_heads), f(k_heads), f(v_heads);
    f(alpha), f(attn_merged), f(x2);
    f(xhat2), f(norm2_out), f(rms2);
    f(gate_pre), f(up_proj);
    if (has_extras) {
      f(act), f(prod);
      f(h_q), f(h_k), f(h_v), f(h_o), f(h_gate), f(h_up), f(h_down);
    }
  }
};

template <typename T>
struct BlockForwardResult {
  Tensor<T> y;
  BlockIntermediates<T> saved;
};

template <typename T>
BlockForwardResult<T> block_forward(const Tensor<T>& x, const BlockParams<T>& bp,
                                    const ModelConfig& cfg, ForwardMode mode) {
  detail::require(x.rank() == 3 && x.dim(2) == cfg.d_model,
                  "block_forward: input " + shape_str(x.shape()) + " does not match d_model " +
                      std::to_string(cfg.d_model));
  const bool keep_h = (mode == ForwardMode::store_all);
  const bool keep_set = (mode != ForwardMode::checkpoint_only);
  const T eps = static_cast<T>(cfg.norm_eps);

  BlockForwardResult<T> res;
  BlockIntermediates<T>& ii = res.saved;

  auto n1 = rmsnorm_forward(x, bp.norm1_gamma, eps);
  auto ql = lora_linear_forward(n1.out, bp.q, keep_h);
  auto kl = lora_linear_forward(n1.out, bp.k, keep_h);
  auto vl = lora_linear_forward(n1.out, bp.v, keep_h);
  Tensor<T> qh = split_heads(ql.y, cfg.n_heads);
  Tensor<T> kh = split_heads(kl.y, cfg.n_heads);
  Tensor<T> vh = split_heads(vl.y, cfg.n_heads);
  ql.y.clear(), kl.y.clear(), vl.y.clear();
  auto att = attention_forward(qh, kh, vh, /*causal=*/true);
  Tensor<T> attn_m = merge_heads(att.out);
  att.out.clear();
  auto ol = lora_linear_forward(attn_m, bp.o, keep_h);
  Tensor<T> x2 = add(x, ol.y);
  ol.y.clear();
  auto n2 = rmsnorm_forward(x2, bp.norm2_gamma, eps);
  auto gl = lora_linear_forward(n2.out, bp.gate, keep_h);
  auto ul = lora_linear_forward(n2.out, bp.up, keep_h);
  Tensor<T> act = silu(gl.y);
  Tensor<T> prod = mul(act, ul.y);
  auto dl = lora_linear_forward(prod, bp.down, keep_h);
  res.y = add(x2, dl.y);

  if (keep_set) {
    ii.xhat1 = std::move(n1.xhat);
    ii.norm1_out = std::move(n1.out);
    ii.rms1 = std::move(n1.rms);
    ii.q_heads = std::move(qh);
    ii.k_heads = std::move(kh);
    ii.v_heads = std::move(vh);
    ii.alpha = std::move(att.alpha);
    ii.attn_merged = std::move(attn_m);
    ii.x2 = std::move(x2);
    ii.xhat2 = std::move(n2.xhat);
    ii.norm2_out = std::move(n2.out);
    ii.rms2 = std::move(n2.rms);
    ii.gate_pre = std::move(gl.y);
    ii.up_proj = std::move(ul.y);
    if (keep_h) {
      ii.act = std::move(act);
      ii.prod = std::move(prod);
      ii.h_q = std::move(ql.h);
      ii.h_k = std::move(kl.h);
      ii.h_v = std::move(vl.h);
      ii.h_o = std::move(ol.h);
      ii.h_gate = std::move(gl.h);
      ii.h_up = std::move(ul.h);
      ii.h_down = std::move(dl.h);
      ii.has_extras = true;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// structured block backward
// ---------------------------------------------------------------------------

template <typename T>
struct BlockBackwardResult {
  Tensor<T> dx;
  std::array<LoraGrads<T>, 7> grads;  // site order q,k,v,o,gate,up,down
};

// One fixed reverse sweep through the block: MLP residual, down/up/gate with
// the SiLU product rule, norm2, attention residual, o, attention, q/k/v,
// norm1. All strategies call this same function, which is what makes their
// gradients bit-identical: the reference passes stored extras (act, prod,
// every h), the structured strategies recompute them here on demand.
// `ledger_h` marks recomputed h projections as transient ledger entries.
// The caller keeps ownership of dY and of `ii` and releases them afterwards.
template <typename T>
BlockBackwardResult<T> block_backward_chain(const Tensor<T>& dY, const BlockParams<T>& bp,
                                            const ModelConfig& cfg,
                                            const BlockIntermediates<T>& ii, const LedgerHook& hook,
                                            bool ledger_h) {
  const bool stored = ii.has_extras;
  BlockBackwardResult<T> res;
  auto grad_slot = [&](Site s) -> LoraGrads<T>& {
    return res.grads[static_cast<size_t>(s)];
  };

  // MLP segment. The down projection consumed prod = silu(gate) * up.
  Tensor<T> act_local, prod_local;
  const Tensor<T>* act = &ii.act;
  const Tensor<T>* prod = &ii.prod;
  if (!stored) {
    act_local = silu(ii.gate_pre);
    hook.on_alloc(act_local, Category::intermediate);
    prod_local = mul(act_local, ii.up_proj);
    hook.on_alloc(prod_local, Category::intermediate);
    act = &act_local;
    prod = &prod_local;
  }

  auto down_res = lora_linear_backward(dY, *prod, bp.down, stored ? &ii.h_down : nullptr, hook,
                                       ledger_h);
  grad_slot(Site::down) = std::move(down_res.grads);
  Tensor<T> d_prod = std::move(down_res.dx);

  Tensor<T> d_up = mul(d_prod, *act);
  hook.on_alloc(d_up, Category::gradient);
  Tensor<T> d_act = mul(d_prod, ii.up_proj);
  hook.on_alloc(d_act, Category::gradient);
  Tensor<T> d_gate = silu_backward(d_act, ii.gate_pre);
  hook.on_alloc(d_gate, Category::gradient);
  hook.on_release(d_act);
  d_act.clear();
  hook.on_release(d_prod);
  d_prod.clear();

  auto up_res = lora_linear_backward(d_up, ii.norm2_out, bp.up, stored ? &ii.h_up : nullptr, hook,
                                     ledger_h);
  grad_slot(Site::up) = std::move(up_res.grads);
  hook.on_release(d_up);
  d_up.clear();
  auto gate_res = lora_linear_backward(d_gate, ii.norm2_out, bp.gate,
                                       stored ? &ii.h_gate : nullptr, hook, ledger_h);
  grad_slot(Site::gate) = std::move(gate_res.grads);
  hook.on_release(d_gate);
  d_gate.clear();

  Tensor<T> dxhat2 = add(up_res.dx, gate_res.dx);
  hook.on_alloc(dxhat2, Category::gradient);
  hook.on_release(up_res.dx);
  up_res.dx.clear();
  hook.on_release(gate_res.dx);
  gate_res.dx.clear();

  Tensor<T> dx2n = rmsnorm_backward(dxhat2, ii.xhat2, bp.norm2_gamma, ii.rms2);
  hook.on_alloc(dx2n, Category::gradient);
  hook.on_release(dxhat2);
  dxhat2.clear();

  // Attention residual: dY flows around the MLP into x2 as well.
  Tensor<T> dx2 = add(dY, dx2n);
  hook.on_alloc(dx2, Category::gradient);
  hook.on_release(dx2n);
  dx2n.clear();

  auto o_res = lora_linear_backward(dx2, ii.attn_merged, bp.o, stored ? &ii.h_o : nullptr, hook,
                                    ledger_h);
  grad_slot(Site::o) = std::move(o_res.grads);
  Tensor<T> d_attn_h = split_heads(o_res.dx, cfg.n_heads);
  hook.on_alloc(d_attn_h, Category::gradient);
  hook.on_release(o_res.dx);
  o_res.dx.clear();

  auto att_res = attention_backward(d_attn_h, ii.q_heads, ii.k_heads, ii.v_heads, ii.alpha, hook);
  hook.on_release(d_attn_h);
  d_attn_h.clear();

  Tensor<T> dq = merge_heads(att_res.dq);
  hook.on_alloc(dq, Category::gradient);
  hook.on_release(att_res.dq);
  att_res.dq.clear();
  Tensor<T> dk = merge_heads(att_res.dk);
  hook.on_alloc(dk, Category::gradient);
  hook.on_release(att_res.dk);
  att_res.dk.clear();
  Tensor<T> dv = merge_heads(att_res.dv);
  hook.on_alloc(dv, Category::gradient);
  hook.on_release(att_res.dv);
  att_res.dv.clear();

  auto q_res = lora_linear_backward(dq, ii.norm1_out, bp.q, stored ? &ii.h_q : nullptr, hook,
                                    ledger_h);
  grad_slot(Site::q) = std::move(q_res.grads);
  hook.on_release(dq);
  dq.clear();
  auto k_res = lora_linear_backward(dk, ii.norm1_out, bp.k, stored ? &ii.h_k : nullptr, hook,
                                    ledger_h);
  grad_slot(Site::k) = std::move(k_res.grads);
  hook.on_release(dk);
  dk.clear();
  auto v_res = lora_linear_backward(dv, ii.norm1_out, bp.v, stored ? &ii.h_v : nullptr, hook,
                                    ledger_h);
  grad_slot(Site::v) = std::move(v_res.grads);
  hook.on_release(dv);
  dv.clear();

  Tensor<T> dxhat1 = add(q_res.dx, k_res.dx);
  hook.on_alloc(dxhat1, Category::gradient);
  hook.on_release(q_res.dx);
  q_res.dx.clear();
  hook.on_release(k_res.dx);
  k_res.dx.clear();
  Tensor<T> dxhat1b = add(dxhat1, v_res.dx);
  hook.on_alloc(dxhat1b, Category::gradient);
  hook.on_release(dxhat1);
  dxhat1.clear();
  hook.on_release(v_res.dx);
  v_res.dx.clear();

  Tensor<T> dx1 = rmsnorm_backward(dxhat1b, ii.xhat1, bp.norm1_gamma, ii.rms1);
  hook.on_alloc(dx1, Category::gradient);
  hook.on_release(dxhat1b);
  dxhat1b.clear();

  res.dx = add(dx2, dx1);
  hook.on_alloc(res.dx, Category::gradient);
  hook.on_release(dx2);
  dx2.clear();
  hook.on_release(dx1);
  dx1.clear();

  if (!stored) {
    hook.on_release(prod_local);
    prod_local.clear();
    hook.on_release(act_local);
    act_local.clear();
  }
  return res;
}

// Standalone structured backward: recompute the block's working set from
// its checkpointed input, run the chain, release everything recomputed
// before returning. Adapter gradient buffers stay alive for the caller.
template <typename T>
BlockBackwardResult<T> block_backward_structured(const Tensor<T>& dY, const Tensor<T>& x,
                                                 const BlockParams<T>& bp, const ModelConfig& cfg,
                                                 const LedgerHook& hook = {}) {
  auto fwd = block_forward(x, bp, cfg, ForwardMode::backward_recompute);
  fwd.y.clear();  // recompute byproduct; the caller already owns the real output path
  BlockIntermediates<T>& ii = fwd.saved;
  ii.for_each([&](Tensor<T>& t) { hook.on_alloc(t, Category::intermediate); });
  auto res = block_backward_chain(dY, bp, cfg, ii, hook, /*ledger_h=*/true);
  ii.for_each([&](Tensor<T>& t) {
    hook.on_release(t);
    t.clear();
  });
  return res;
}

// ---------------------------------------------------------------------------
// embedding and head
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embed_tokens(const ModelParams<T>& m, const Tensor<int32_t>& tokens) {
  detail::require(tokens.rank() == 2, "embed_tokens: expected [b,n] ids, got " +
                                          shape_str(tokens.shape()));
  int64_t b = tokens.dim(0), n = tokens.dim(1), d = m.cfg.d_model;
  detail::require(n <= m.cfg.max_seq, "embed_tokens: sequence length " + std::to_string(n) +
                                          " exceeds max_seq " + std::to_string(m.cfg.max_seq));
  Tensor<T> out(Shape{b, n, d});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t t = 0; t < n; ++t) {
      int32_t id = tokens.at(bi, t);
      detail::require(id >= 0 && id < m.cfg.vocab, "embed_tokens: token id " + std::to_string(id) +
                                                       " outside vocabulary");
      const T* tok = m.tok_emb.data() + static_cast<int64_t>(id) * d;
      const T* pos = m.pos_emb.data() + t * d;
      T* dst = out.data() + (bi * n + t) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] = tok[j] + pos[j];
    }
  return out;
}

template <typename T>
struct HeadForwardResult {
  Tensor<T> xhat_f, rms_f;  // saved for the head backward
  Tensor<T> logits;
};

template <typename T>
HeadForwardResult<T> head_forward(const ModelParams<T>& m, const Tensor<T>& x_last) {
  auto nf = rmsnorm_forward(x_last, m.final_gamma, static_cast<T>(m.cfg.norm_eps));
  HeadForwardResult<T> res;
  res.logits = matmul(nf.out, m.out_proj);
  res.xhat_f = std::move(nf.xhat);
  res.rms_f = std::move(nf.rms);
  return res;
}

// dx for the last block's output. The output projection is frozen, so only
// the input path matters.
template <typename T>
Tensor<T> head_backward(const Tensor<T>& dlogits, const Tensor<T>& xhat_f, const Tensor<T>& rms_f,
                        const ModelParams<T>& m, const LedgerHook& hook = {}) {
  Tensor<T> dout_f = matmul_backward_input(dlogits, m.out_proj);
  hook.on_alloc(dout_f, Category::gradient);
  Tensor<T> dx = rmsnorm_backward(dout_f, xhat_f, m.final_gamma, rms_f);
  hook.on_alloc(dx, Category::gradient);
  hook.on_release(dout_f);
  return dx;
}

// ---------------------------------------------------------------------------
// whole-model forward
// ---------------------------------------------------------------------------

template <typename T>
struct ModelForwardResult {
  Tensor<T> logits;
  // checkpoint_only: the L block inputs, index i = input of block i.
  std::vector<Tensor<T>> block_inputs;
  // store_all: every block's full working set plus the head's saved pair.
  std::vector<BlockIntermediates<T>> block_saved;
  Tensor<T> xhat_f, rms_f;
};

template <typename T>
ModelForwardResult<T> model_forward(const Tensor<int32_t>& tokens, const ModelParams<T>& m,
                                    ForwardMode mode) {
  ModelForwardResult<T> res;
  Tensor<T> x = embed_tokens(m, tokens);
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    if (mode == ForwardMode::checkpoint_only) res.block_inputs.push_back(x);  // copy, kept
    auto fwd = block_forward(x, m.blocks[i], m.cfg, mode);
    if (mode == ForwardMode::store_all) res.block_saved.push_back(std::move(fwd.saved));
    x = std::move(fwd.y);
  }
  auto head = head_forward(m, x);
  res.logits = std::move(head.logits);
  if (mode == ForwardMode::store_all) {
    res.xhat_f = std::move(head.xhat_f);
    res.rms_f = std::move(head.rms_f);
  }
  return res;
}

// Forward pass for loss only, retaining nothing beyond the rolling
// activation. This is the zeroth order path; `led` (optional) sees the
// rolling activation, the logits and nothing else.
template <typename T>
double model_loss(const ModelParams<T>& m, const Tensor<int32_t>& inputs,
                  const Tensor<int32_t>& targets, Ledger* led = nullptr) {
  Tensor<T> x = embed_tokens(m, inputs);
  if (led) led->alloc(x.id(), x.bytes(), Category::intermediate);
  for (const auto& blk : m.blocks) {
    auto fwd = block_forward(x, blk, m.cfg, ForwardMode::checkpoint_only);
    if (led) {
      led->alloc(fwd.y.id(), fwd.y.bytes(), Category::intermediate);
      led->release(x.id());
    }
    x = std::move(fwd.y);
  }
  auto head = head_forward(m, x);
  if (led) {
    led->alloc(head.logits.id(), head.logits.bytes(), Category::logits);
    led->release(x.id());
  }
  x.clear();
  double loss = cross_entropy_loss(head.logits, targets);
  if (led) led->release(head.logits.id());
  return loss;
}

}  // namespace mesp
