#pragma once

#include <string>
#include <vector>

#include "cdp/nn.hpp"

// Small ViT encoder with optional LoRA adapters on the attention projector
// matrices. In "frozen+lora" mode the base weights are frozen and only the
// adapters plus the output projection train; "scratch" trains everything and
// carries no adapters.

namespace cdp {

struct ViTConfig {
  int image_size = 64;
  int patch = 8;
  int depth = 4;
  int heads = 4;
  int dim = 128;        // transformer width
  int token_dim = 128;  // output projection width
  int mlp_ratio = 4;
  bool class_token = false;  // internal only; output is always the L patch tokens

  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch * patch * 3; }
  void validate() const {
    if (patch <= 0 || image_size % patch != 0)
      throw TensorError("ViTConfig: image_size " + std::to_string(image_size) +
                        " not divisible by patch " + std::to_string(patch));
  }
};

struct LoRAConfig {
  int rank = 16;
  float alpha = 16.0f;  // scaling alpha/rank = 1 by default
  float dropout = 0.1f;
  std::string targets = "qkvo";

  bool targets_q() const { return targets.find('q') != std::string::npos; }
  bool targets_k() const { return targets.find('k') != std::string::npos; }
  bool targets_v() const { return targets.find('v') != std::string::npos; }
  bool targets_o() const { return targets.find('o') != std::string::npos; }
};

template <typename S>
struct LoRAAdapter {
  int rank = 0;
  S alpha = S(0);
  S dropout_p = S(0);
  TensorT<S> a;  // [rank, in]
  TensorT<S> b;  // [out, rank], zero-init so the fresh adapter is transparent
};

template <typename S>
TensorT<S> lora_merge(const TensorT<S>& base_w, const LoRAAdapter<S>& ad) {
  if (ad.rank == 0) return base_w;
  if (ad.a.dim(1) != base_w.dim(1) || ad.b.dim(0) != base_w.dim(0) ||
      ad.a.dim(0) != ad.rank || ad.b.dim(1) != ad.rank)
    throw TensorError("lora_merge: adapter " + shape_str(ad.b.shape()) + "x" +
                      shape_str(ad.a.shape()) + " incompatible with base " +
                      shape_str(base_w.shape()));
  NoGradGuard ng;
  auto delta = affine(matmul(ad.b, ad.a), ad.alpha / S(ad.rank));
  return TensorT<S>::from_data(base_w.shape(), add(base_w, delta).data());
}

template <typename S>
struct LoRALinear {
  TensorT<S> w, b;  // base
  LoRAAdapter<S> adapter;

  LoRALinear() = default;
  LoRALinear(int in, int out, Rng& rng) {
    w = TensorT<S>::randn({out, in}, rng, S(1) / std::sqrt(S(in)), true);
    b = TensorT<S>::zeros({out}, true);
  }

  void add_adapter(int rank, S alpha, S dropout_p, Rng& rng) {
    adapter.rank = rank;
    adapter.alpha = alpha;
    adapter.dropout_p = dropout_p;
    adapter.a = TensorT<S>::randn({rank, w.dim(1)}, rng, S(1) / std::sqrt(S(w.dim(1))), true);
    adapter.b = TensorT<S>::zeros({w.dim(0), rank}, true);
  }

  TensorT<S> forward(const TensorT<S>& x, FwdCtx ctx) const {
    auto y = linear(x, w, b);
    if (adapter.rank > 0) {
      auto xa = (ctx.train && adapter.dropout_p > S(0)) ? dropout(x, adapter.dropout_p, *ctx.rng)
                                                        : x;
      auto delta = linear(linear(xa, adapter.a), adapter.b);
      y = add(y, affine(delta, adapter.alpha / S(adapter.rank)));
    }
    return y;
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
    if (adapter.rank > 0) {
      out.emplace_back(prefix + ".lora_a", adapter.a);
      out.emplace_back(prefix + ".lora_b", adapter.b);
    }
  }
};

template <typename S>
struct ViTSelfAttention {
  int heads = 1;
  LoRALinear<S> q, k, v, out;

  ViTSelfAttention() = default;
  ViTSelfAttention(int dim, int heads_, Rng& rng)
      : heads(heads_), q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), out(dim, dim, rng) {}

  TensorT<S> forward(const TensorT<S>& x, FwdCtx ctx) const {
    auto y = mha_core(q.forward(x, ctx), k.forward(x, ctx), v.forward(x, ctx), heads);
    return out.forward(y, ctx);
  }

  void collect(const std::string& prefix, NamedParams<S>& out_p) {
    q.collect(prefix + ".q", out_p);
    k.collect(prefix + ".k", out_p);
    v.collect(prefix + ".v", out_p);
    out.collect(prefix + ".out", out_p);
  }
};

template <typename S>
struct ViTBlock {
  LayerNorm<S> ln1, ln2;
  ViTSelfAttention<S> attn;
  Mlp<S> mlp;

  ViTBlock() = default;
  ViTBlock(int dim, int heads, int mlp_ratio, Rng& rng)
      : ln1(dim), ln2(dim), attn(dim, heads, rng), mlp(dim, dim * mlp_ratio, rng) {}

  TensorT<S> forward(const TensorT<S>& x, FwdCtx ctx) const {
    auto y = add(x, attn.forward(ln1.forward(x), ctx));
    return add(y, mlp.forward(ln2.forward(y)));
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

// image: [H,W,3] with values in [0,1]; output rows are row-major patches,
// flattened channel-last, standardized to zero-centered range.
template <typename S>
TensorT<S> patchify(const TensorT<S>& image, const ViTConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
      image.dim(2) != 3)
    throw TensorError("patchify: image " + shape_str(image.shape()) + " requires resize to " +
                      std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                      "x3 first");
  int g = cfg.grid(), p = cfg.patch;
  std::vector<S> rows(static_cast<size_t>(cfg.tokens()) * cfg.patch_dim());
  const S* px = image.data().data();
  size_t o = 0;
  for (int py = 0; py < g; ++py)
    for (int pxi = 0; pxi < g; ++pxi)
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < 3; ++c)
            rows[o++] = (px[((py * p + y) * cfg.image_size + (pxi * p + x)) * 3 + c] - S(0.5)) *
                        S(2);
  return TensorT<S>::from_data({cfg.tokens(), cfg.patch_dim()}, std::move(rows));
}

template <typename S>
class ViTEncoder {
 public:
  ViTEncoder() = default;
  ViTEncoder(const ViTConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    patch_proj_ = Linear<S>(cfg.patch_dim(), cfg.dim, rng);
    int seq = cfg.tokens() + (cfg.class_token ? 1 : 0);
    pos_ = TensorT<S>::randn({seq, cfg.dim}, rng, S(0.02), true);
    if (cfg.class_token) cls_ = TensorT<S>::randn({1, 1, cfg.dim}, rng, S(0.02), true);
    for (int i = 0; i < cfg.depth; ++i)
      blocks_.emplace_back(cfg.dim, cfg.heads, cfg.mlp_ratio, rng);
    ln_f_ = LayerNorm<S>(cfg.dim);
    out_proj_ = Linear<S>(cfg.dim, cfg.token_dim, rng);
  }

  const ViTConfig& config() const { return cfg_; }

  void add_lora(const LoRAConfig& lc, Rng& rng) {
    lora_ = lc;
    for (auto& blk : blocks_) {
      if (lc.targets_q()) blk.attn.q.add_adapter(lc.rank, S(lc.alpha), S(lc.dropout), rng);
      if (lc.targets_k()) blk.attn.k.add_adapter(lc.rank, S(lc.alpha), S(lc.dropout), rng);
      if (lc.targets_v()) blk.attn.v.add_adapter(lc.rank, S(lc.alpha), S(lc.dropout), rng);
      if (lc.targets_o()) blk.attn.out.add_adapter(lc.rank, S(lc.alpha), S(lc.dropout), rng);
    }
  }

  bool has_lora() const { return lora_.rank > 0 && !blocks_.empty() && adapters_present(); }

  // Marks base weights (non-adapter, non-output-projection) frozen or not.
  void set_base_frozen(bool frozen) {
    NamedParams<S> all;
    collect("vit", all);
    for (auto& [name, p] : all) {
      bool adapter = name.find(".lora_") != std::string::npos;
      bool proj = name.find("vit.out_proj") == 0;
      if (!adapter && !proj) p.set_requires_grad(!frozen);
    }
  }

  // frames: [F,H,W,3] in [0,1] -> tokens [F*L, token_dim]; rows ordered
  // frame-major then row-major patches.
  TensorT<S> encode(const TensorT<S>& frames, FwdCtx ctx = {}) const {
    if (frames.rank() != 4)
      throw TensorError("encode: frames must be [F,H,W,3], got " + shape_str(frames.shape()));
    int F = frames.dim(0), L = cfg_.tokens();
    std::vector<TensorT<S>> per_frame;
    per_frame.reserve(F);
    for (int f = 0; f < F; ++f) {
      auto img = TensorT<S>::from_data(
          {cfg_.image_size, cfg_.image_size, 3},
          std::vector<S>(frames.data().begin() + static_cast<size_t>(f) * cfg_.image_size *
                             cfg_.image_size * 3,
                         frames.data().begin() + static_cast<size_t>(f + 1) * cfg_.image_size *
                             cfg_.image_size * 3));
      per_frame.push_back(patchify(img, cfg_));
    }
    auto patches = concat(per_frame, 0);                       // [F*L, patch_dim]
    auto x = reshape(patch_proj_.forward(patches), {F, L, cfg_.dim});
    if (cfg_.class_token) {
      auto cls = broadcast_to(cls_, {F, 1, cfg_.dim});
      x = concat<S>({cls, x}, 1);  // [F, L+1, dim]
    }
    x = add(x, pos_);
    for (const auto& blk : blocks_) x = blk.forward(x, ctx);
    x = ln_f_.forward(x);
    if (cfg_.class_token) x = slice(x, 1, 1, L);
    auto tok = out_proj_.forward(x);  // [F, L, token_dim]
    return reshape(tok, {F * L, cfg_.token_dim});
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    patch_proj_.collect(prefix + ".patch_proj", out);
    out.emplace_back(prefix + ".pos", pos_);
    if (cfg_.class_token) out.emplace_back(prefix + ".cls", cls_);
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    ln_f_.collect(prefix + ".ln_f", out);
    out_proj_.collect(prefix + ".out_proj", out);
  }

  std::vector<ViTBlock<S>>& blocks() { return blocks_; }
  const std::vector<ViTBlock<S>>& blocks() const { return blocks_; }
  Linear<S>& out_proj() { return out_proj_; }

 private:
  bool adapters_present() const { return blocks_[0].attn.q.adapter.rank > 0; }

  ViTConfig cfg_;
  LoRAConfig lora_{.rank = 0};
  Linear<S> patch_proj_;
  TensorT<S> pos_, cls_;
  std::vector<ViTBlock<S>> blocks_;
  LayerNorm<S> ln_f_;
  Linear<S> out_proj_;
};

}  // namespace cdp
