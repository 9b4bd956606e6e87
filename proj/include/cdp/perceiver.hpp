#pragma once

#include <string>
#include <vector>

#include "cdp/nn.hpp"

// Causal observation compressor: T_o learned tokens cross-attend the full
// (N_c * T_o * L)-token sequence under a causal mask (a query for timestep i
// may only see keys of frames with timestep <= i, both cameras), then run
// through N causal self-attention blocks. Output: [T_o, token_dim].

namespace cdp {

struct PerceiverConfig {
  int t_o = 4;
  int n_c = 2;
  int l = 64;  // tokens per frame
  int token_dim = 128;
  int blocks = 4;  // N self-attention blocks
  int heads = 4;
  float dropout = 0.1f;

  int keys() const { return n_c * t_o * l; }
  void validate() const {
    if (blocks < 1) throw TensorError("PerceiverConfig: need at least one self-attention block");
  }
};

// Keys laid out camera-major: index = (cam*T_o + t)*L + tok. Query i allows
// every key whose frame timestep t satisfies t <= i, across all cameras.
inline AttentionMask build_causal_cross_mask(int t_o, int n_c, int l) {
  AttentionMask m;
  m.rows = t_o;
  m.cols = n_c * t_o * l;
  m.allowed.assign(static_cast<size_t>(m.rows) * m.cols, 0);
  for (int i = 0; i < t_o; ++i)
    for (int cam = 0; cam < n_c; ++cam)
      for (int t = 0; t <= i; ++t)
        for (int k = 0; k < l; ++k) m.set(i, (cam * t_o + t) * l + k, true);
  return m;
}

inline AttentionMask build_causal_self_mask(int t_o) {
  AttentionMask m;
  m.rows = t_o;
  m.cols = t_o;
  m.allowed.assign(static_cast<size_t>(t_o) * t_o, 0);
  for (int i = 0; i < t_o; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

template <typename S>
class Perceiver {
 public:
  Perceiver() = default;
  Perceiver(const PerceiverConfig& cfg, Rng& rng)
      : cfg_(cfg),
        cross_mask_(build_causal_cross_mask(cfg.t_o, cfg.n_c, cfg.l)),
        self_mask_(build_causal_self_mask(cfg.t_o)) {
    cfg.validate();
    int d = cfg.token_dim;
    learned_ = TensorT<S>::randn({cfg.t_o, d}, rng, S(0.02), true);
    temporal_ = TensorT<S>::randn({cfg.t_o, d}, rng, S(0.02), true);
    ln_q_ = LayerNorm<S>(d);
    ln_kv_ = LayerNorm<S>(d);
    cross_ = MultiHeadAttention<S>(d, d, d, cfg.heads, rng, S(cfg.dropout));
    ln_mlp_ = LayerNorm<S>(d);
    mlp_ = Mlp<S>(d, 4 * d, rng);
    for (int i = 0; i < cfg.blocks; ++i)
      self_blocks_.emplace_back(d, cfg.heads, rng, S(cfg.dropout));
  }

  const PerceiverConfig& config() const { return cfg_; }

  // e_t: [N_c*T_o*L, token_dim] (camera-major layout, see mask) or batched
  // [B, N_c*T_o*L, token_dim]. Returns [T_o, token_dim] or [B, T_o, token_dim].
  TensorT<S> compress(const TensorT<S>& e_t, FwdCtx ctx = {}) const {
    bool batched = e_t.rank() == 3;
    int keys = cfg_.keys(), d = cfg_.token_dim;
    if ((batched ? e_t.dim(1) : e_t.dim(0)) != keys || e_t.dim(-1) != d)
      throw TensorError("compress: tokens " + shape_str(e_t.shape()) + " do not match layout [" +
                        std::to_string(keys) + "," + std::to_string(d) + "]");
    int B = batched ? e_t.dim(0) : 1;
    auto x3 = batched ? e_t : reshape(e_t, {1, keys, d});

    // per-frame temporal embedding added to keys (same for every camera)
    auto temporal = reshape(broadcast_to(reshape(temporal_, {1, cfg_.t_o, 1, d}),
                                         {cfg_.n_c, cfg_.t_o, cfg_.l, d}),
                            {1, keys, d});
    auto kv = ln_kv_.forward(add(x3, temporal));

    auto q0 = broadcast_to(reshape(learned_, {1, cfg_.t_o, d}), {B, cfg_.t_o, d});
    auto x = add(q0, cross_.forward(ln_q_.forward(q0), kv, &cross_mask_, ctx));
    x = add(x, mlp_.forward(ln_mlp_.forward(x)));
    for (const auto& blk : self_blocks_) x = blk.forward(x, &self_mask_, ctx);
    return batched ? x : reshape(x, {cfg_.t_o, d});
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    out.emplace_back(prefix + ".learned", learned_);
    out.emplace_back(prefix + ".temporal", temporal_);
    ln_q_.collect(prefix + ".ln_q", out);
    ln_kv_.collect(prefix + ".ln_kv", out);
    cross_.collect(prefix + ".cross", out);
    ln_mlp_.collect(prefix + ".ln_mlp", out);
    mlp_.collect(prefix + ".mlp", out);
    for (size_t i = 0; i < self_blocks_.size(); ++i)
      self_blocks_[i].collect(prefix + ".self" + std::to_string(i), out);
  }

 private:
  PerceiverConfig cfg_;
  AttentionMask cross_mask_, self_mask_;
  TensorT<S> learned_, temporal_;
  LayerNorm<S> ln_q_, ln_kv_, ln_mlp_;
  MultiHeadAttention<S> cross_;
  Mlp<S> mlp_;
  std::vector<TransformerBlock<S>> self_blocks_;
};

}  // namespace cdp
