#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cdp/ops.hpp"

// Small layer library on top of the ops: modules are plain structs owning
// their parameter tensors and exposing forward() plus collect() for
// name-based parameter walks (optimizer, checkpoints, freeze checks).

namespace cdp {

template <typename S>
using NamedParams = std::vector<std::pair<std::string, TensorT<S>>>;

// Forward-pass context: training enables dropout, which draws from rng.
struct FwdCtx {
  bool train = false;
  Rng* rng = nullptr;
};

template <typename S>
struct Linear {
  TensorT<S> w, b;  // w: [out, in]

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool bias = true) {
    w = TensorT<S>::randn({out, in}, rng, S(1) / std::sqrt(S(in)), true);
    if (bias) b = TensorT<S>::zeros({out}, true);
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    return b.defined() ? linear(x, w, b) : linear(x, w);
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    out.emplace_back(prefix + ".w", w);
    if (b.defined()) out.emplace_back(prefix + ".b", b);
  }
};

template <typename S>
struct LayerNorm {
  TensorT<S> gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim) {
    gamma = TensorT<S>::full({dim}, S(1), true);
    beta = TensorT<S>::zeros({dim}, true);
  }

  TensorT<S> forward(const TensorT<S>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <typename S>
struct Mlp {
  Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(int dim, int hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

  TensorT<S> forward(const TensorT<S>& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// Multi-head attention core over already-projected full-width q/k/v:
// [B,n,C] x [B,m,C] -> [B,n,C]; the optional mask is shared across batch.
template <typename S>
TensorT<S> mha_core(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v, int heads,
                    const AttentionMask* mask = nullptr) {
  int B = q.dim(0), n = q.dim(1), C = q.dim(2), m = k.dim(1);
  if (C % heads != 0)
    throw TensorError("mha_core: width " + std::to_string(C) + " not divisible by heads " +
                      std::to_string(heads));
  int dh = C / heads;
  auto split = [&](const TensorT<S>& t, int len) {
    return reshape(permute(reshape(t, {B, len, heads, dh}), {0, 2, 1, 3}), {B * heads, len, dh});
  };
  auto y = scaled_dot_product_attention(split(q, n), split(k, m), split(v, m), mask);
  return reshape(permute(reshape(y, {B, heads, n, dh}), {0, 2, 1, 3}), {B, n, C});
}

// Plain (non-LoRA) multi-head attention; cross-attention when kv != q source.
template <typename S>
struct MultiHeadAttention {
  int heads = 1;
  S dropout_p = S(0);
  Linear<S> q_proj, k_proj, v_proj, out_proj;

  MultiHeadAttention() = default;
  MultiHeadAttention(int q_dim, int kv_dim, int width, int heads_, Rng& rng, S dropout = S(0))
      : heads(heads_),
        dropout_p(dropout),
        q_proj(q_dim, width, rng),
        k_proj(kv_dim, width, rng),
        v_proj(kv_dim, width, rng),
        out_proj(width, width, rng) {}

  TensorT<S> forward(const TensorT<S>& xq, const TensorT<S>& xkv, const AttentionMask* mask,
                     FwdCtx ctx) const {
    auto y = mha_core(q_proj.forward(xq), k_proj.forward(xkv), v_proj.forward(xkv), heads, mask);
    y = out_proj.forward(y);
    if (ctx.train && dropout_p > S(0)) y = dropout(y, dropout_p, *ctx.rng);
    return y;
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    q_proj.collect(prefix + ".q", out);
    k_proj.collect(prefix + ".k", out);
    v_proj.collect(prefix + ".v", out);
    out_proj.collect(prefix + ".out", out);
  }
};

// Pre-norm transformer block (self-attention + MLP, residuals).
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  Mlp<S> mlp;

  TransformerBlock() = default;
  TransformerBlock(int dim, int heads, Rng& rng, S dropout = S(0), int mlp_ratio = 4)
      : ln1(dim), ln2(dim), attn(dim, dim, dim, heads, rng, dropout), mlp(dim, dim * mlp_ratio, rng) {}

  TensorT<S> forward(const TensorT<S>& x, const AttentionMask* mask, FwdCtx ctx) const {
    auto h = ln1.forward(x);
    auto y = add(x, attn.forward(h, h, mask, ctx));
    return add(y, mlp.forward(ln2.forward(y)));
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename S>
class Adam {
 public:
  explicit Adam(NamedParams<S> params, S lr = S(1e-4), S beta1 = S(0.9), S beta2 = S(0.999),
                S eps = S(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), S(0));
      v_.emplace_back(p.numel(), S(0));
    }
  }

  void set_lr(S lr) { lr_ = lr; }
  S lr() const { return lr_; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  // Updates only parameters that require grad; frozen tensors are untouched.
  void step() {
    ++t_;
    S bc1 = S(1) - std::pow(beta1_, S(t_));
    S bc2 = S(1) - std::pow(beta2_, S(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      if (!p.requires_grad()) continue;
      const auto& g = p.grad();
      auto& val = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < val.size(); ++j) {
        m[j] = beta1_ * m[j] + (S(1) - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (S(1) - beta2_) * g[j] * g[j];
        val[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

  const NamedParams<S>& params() const { return params_; }

 private:
  NamedParams<S> params_;
  std::vector<std::vector<S>> m_, v_;
  S lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

template <typename S>
int64_t count_trainable(const NamedParams<S>& params) {
  int64_t n = 0;
  for (const auto& [name, p] : params)
    if (p.requires_grad()) n += p.numel();
  return n;
}

}  // namespace cdp
