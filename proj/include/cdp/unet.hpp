#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "cdp/nn.hpp"
#include "cdp/schedule.hpp"

// Temporal 1D UNet noise predictor. The noisy action sequence is prefixed
// (on the time axis) by projected proprioception, FiLM-conditioned on the
// diffusion-step embedding, and conditioned on compressed observation tokens
// through per-block cross-attention (or, in film-only mode, by folding a
// flattened observation summary into the FiLM vector).

namespace cdp {

struct UNetConfig {
  std::vector<int> channels{64, 128, 256};
  int kernel = 5;
  int gn_groups = 8;
  int temb_dim = 128;
  int heads = 4;
  bool cross_attn = true;  // false: film-unet ablation
  int cond_rows = 4;       // conditioning token rows (T_o for the causal compressor)
  int cond_dim = 128;
  // Clamp on the denoised estimate during sampling (standardized units);
  // <= 0 disables. Near-zero signal levels divide by sqrt(signal), so an
  // unclamped early estimate amplifies prediction error ~60x and the
  // trajectory never recovers.
  float sample_clip = 3.0f;

  void validate() const {
    if (channels.size() < 2) throw TensorError("UNetConfig: need at least two channel levels");
    if (kernel % 2 == 0) throw TensorError("UNetConfig: kernel must be odd");
    if (temb_dim % 2 != 0) throw TensorError("UNetConfig: temb_dim must be even");
    for (int c : channels)
      if (c % gn_groups != 0)
        throw TensorError("UNetConfig: channels must be divisible by gn_groups");
  }
  int downsamples() const { return static_cast<int>(channels.size()) - 1; }
  int time_multiple() const { return 1 << downsamples(); }
};

// Sinusoidal position features for a diffusion step (pre-MLP); cos half is
// all-ones at k=0.
template <typename S>
std::vector<S> sinusoid_features(int k, int dim) {
  int half = dim / 2;
  std::vector<S> out(dim);
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / (half > 1 ? half - 1 : 1));
    out[i] = static_cast<S>(std::sin(k * freq));
    out[half + i] = static_cast<S>(std::cos(k * freq));
  }
  return out;
}

template <typename S>
struct Conv1dBlock {
  TensorT<S> kernels, bias;
  TensorT<S> gn_gamma, gn_beta;
  int groups = 8, pad = 0;

  Conv1dBlock() = default;
  Conv1dBlock(int in_c, int out_c, int kernel, int groups_, Rng& rng) : groups(groups_) {
    kernels = TensorT<S>::randn({out_c, in_c, kernel}, rng, S(1) / std::sqrt(S(in_c * kernel)),
                                true);
    bias = TensorT<S>::zeros({out_c}, true);
    gn_gamma = TensorT<S>::full({out_c}, S(1), true);
    gn_beta = TensorT<S>::zeros({out_c}, true);
    pad = (kernel - 1) / 2;
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    return mish(group_norm(conv1d(x, kernels, bias, 1, pad), groups, gn_gamma, gn_beta));
  }

  // Variant that applies FiLM between the norm and the activation.
  TensorT<S> forward_film(const TensorT<S>& x, const TensorT<S>& scale,
                          const TensorT<S>& shift) const {
    auto h = group_norm(conv1d(x, kernels, bias, 1, pad), groups, gn_gamma, gn_beta);
    h = add(mul(h, add(scale, TensorT<S>::scalar(S(1)))), shift);
    return mish(h);
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    out.emplace_back(prefix + ".kernels", kernels);
    out.emplace_back(prefix + ".bias", bias);
    out.emplace_back(prefix + ".gn_gamma", gn_gamma);
    out.emplace_back(prefix + ".gn_beta", gn_beta);
  }
};

// Residual block: two conv blocks, FiLM from the conditioning vector after
// the first norm, 1x1 skip when channel count changes. Zero-init FiLM bias
// means a zero conditioning vector reduces FiLM to the identity.
template <typename S>
struct ResBlock1d {
  int out_c = 0;
  Conv1dBlock<S> block1, block2;
  Linear<S> film;              // cond -> [2*out_c]
  TensorT<S> skip_w;           // [out_c, in_c, 1] when in_c != out_c

  ResBlock1d() = default;
  ResBlock1d(int in_c, int out_c_, int kernel, int groups, int cond_dim, Rng& rng)
      : out_c(out_c_),
        block1(in_c, out_c_, kernel, groups, rng),
        block2(out_c_, out_c_, kernel, groups, rng),
        film(cond_dim, 2 * out_c_, rng) {
    if (in_c != out_c_)
      skip_w = TensorT<S>::randn({out_c_, in_c, 1}, rng, S(1) / std::sqrt(S(in_c)), true);
  }

  // x: [B,C,T]; cond: [B,cond_dim]
  TensorT<S> forward(const TensorT<S>& x, const TensorT<S>& cond) const {
    int B = x.dim(0);
    auto fs = reshape(film.forward(cond), {B, 2 * out_c, 1});
    auto scale = slice(fs, 1, 0, out_c);
    auto shift = slice(fs, 1, out_c, out_c);
    auto h = block1.forward_film(x, scale, shift);
    h = block2.forward(h);
    auto sk = skip_w.defined() ? conv1d(x, skip_w) : x;
    return add(h, sk);
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    block1.collect(prefix + ".block1", out);
    block2.collect(prefix + ".block2", out);
    film.collect(prefix + ".film", out);
    if (skip_w.defined()) out.emplace_back(prefix + ".skip", skip_w);
  }
};

// Pre-norm cross-attention over conditioning rows; queries are the temporal
// features, keys/values the observation tokens (their row order preserved).
template <typename S>
struct CrossAttnBlock1d {
  LayerNorm<S> ln_q, ln_kv;
  MultiHeadAttention<S> attn;

  CrossAttnBlock1d() = default;
  CrossAttnBlock1d(int channels, int cond_dim, int heads, Rng& rng)
      : ln_q(channels), ln_kv(cond_dim), attn(channels, cond_dim, channels, heads, rng) {}

  // x: [B,C,T]; cond: [B,R,D]
  TensorT<S> forward(const TensorT<S>& x, const TensorT<S>& cond, FwdCtx ctx) const {
    auto xq = permute(x, {0, 2, 1});  // [B,T,C]
    auto y = attn.forward(ln_q.forward(xq), ln_kv.forward(cond), nullptr, ctx);
    return add(x, permute(y, {0, 2, 1}));
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    ln_q.collect(prefix + ".ln_q", out);
    ln_kv.collect(prefix + ".ln_kv", out);
    attn.collect(prefix + ".attn", out);
  }
};

template <typename S>
struct Downsample1d {
  TensorT<S> kernels, bias;

  Downsample1d() = default;
  Downsample1d(int c, Rng& rng) {
    kernels = TensorT<S>::randn({c, c, 3}, rng, S(1) / std::sqrt(S(c * 3)), true);
    bias = TensorT<S>::zeros({c}, true);
  }
  TensorT<S> forward(const TensorT<S>& x) const { return conv1d(x, kernels, bias, 2, 1); }
  void collect(const std::string& prefix, NamedParams<S>& out) {
    out.emplace_back(prefix + ".kernels", kernels);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename S>
struct Upsample1d {
  TensorT<S> kernels, bias;

  Upsample1d() = default;
  Upsample1d(int c, Rng& rng) {
    kernels = TensorT<S>::randn({c, c, 3}, rng, S(1) / std::sqrt(S(c * 3)), true);
    bias = TensorT<S>::zeros({c}, true);
  }
  TensorT<S> forward(const TensorT<S>& x) const {
    return conv1d(upsample_last_x2(x), kernels, bias, 1, 1);
  }
  void collect(const std::string& prefix, NamedParams<S>& out) {
    out.emplace_back(prefix + ".kernels", kernels);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename S>
class DiffusionHead {
 public:
  DiffusionHead() = default;
  DiffusionHead(const UNetConfig& cfg, int t_o, int t_a, int d_a, int d_p, int k_train, Rng& rng)
      : cfg_(cfg), t_o_(t_o), t_a_(t_a), d_a_(d_a), d_p_(d_p),
        sched_(NoiseSchedule::cosine(k_train)) {
    cfg.validate();
    proprio_proj_ = Linear<S>(d_p, d_a, rng);
    temb1_ = Linear<S>(cfg.temb_dim, cfg.temb_dim * 4, rng);
    temb2_ = Linear<S>(cfg.temb_dim * 4, cfg.temb_dim, rng);
    int film_dim = cfg.temb_dim;
    if (!cfg.cross_attn) {
      obs_proj_ = Linear<S>(cfg.cond_rows * cfg.cond_dim, cfg.temb_dim, rng);
      film_dim = 2 * cfg.temb_dim;
    }

    int n = static_cast<int>(cfg.channels.size());
    std::vector<std::pair<int, int>> in_out;
    in_out.emplace_back(d_a, cfg.channels[0]);
    for (int i = 1; i < n; ++i) in_out.emplace_back(cfg.channels[i - 1], cfg.channels[i]);

    for (int i = 0; i < n; ++i) {
      auto [ci, co] = in_out[i];
      DownStage st;
      st.res1 = ResBlock1d<S>(ci, co, cfg.kernel, cfg.gn_groups, film_dim, rng);
      st.res2 = ResBlock1d<S>(co, co, cfg.kernel, cfg.gn_groups, film_dim, rng);
      if (cfg.cross_attn) {
        st.ca1 = CrossAttnBlock1d<S>(co, cfg.cond_dim, cfg.heads, rng);
        st.ca2 = CrossAttnBlock1d<S>(co, cfg.cond_dim, cfg.heads, rng);
      }
      if (i + 1 < n) st.down = Downsample1d<S>(cfg.channels[i], rng);
      downs_.push_back(std::move(st));
    }
    int cm = cfg.channels.back();
    mid1_ = ResBlock1d<S>(cm, cm, cfg.kernel, cfg.gn_groups, film_dim, rng);
    mid2_ = ResBlock1d<S>(cm, cm, cfg.kernel, cfg.gn_groups, film_dim, rng);
    if (cfg.cross_attn) {
      mid_ca1_ = CrossAttnBlock1d<S>(cm, cfg.cond_dim, cfg.heads, rng);
      mid_ca2_ = CrossAttnBlock1d<S>(cm, cfg.cond_dim, cfg.heads, rng);
    }
    for (int i = n - 1; i >= 1; --i) {
      auto [ci, co] = in_out[i];
      UpStage st;
      st.res1 = ResBlock1d<S>(co * 2, ci, cfg.kernel, cfg.gn_groups, film_dim, rng);
      st.res2 = ResBlock1d<S>(ci, ci, cfg.kernel, cfg.gn_groups, film_dim, rng);
      if (cfg.cross_attn) {
        st.ca1 = CrossAttnBlock1d<S>(ci, cfg.cond_dim, cfg.heads, rng);
        st.ca2 = CrossAttnBlock1d<S>(ci, cfg.cond_dim, cfg.heads, rng);
      }
      st.up = Upsample1d<S>(ci, rng);
      ups_.push_back(std::move(st));
    }
    final_block_ = Conv1dBlock<S>(cfg.channels[0] * 2, cfg.channels[0], cfg.kernel,
                                  cfg.gn_groups, rng);
    // Zero-init output conv: an untrained head predicts zero noise, so the
    // initial diffusion loss sits at the noise variance.
    final_w_ = TensorT<S>::zeros({d_a, cfg.channels[0], 1}, true);
    final_b_ = TensorT<S>::zeros({d_a}, true);
  }

  const NoiseSchedule& schedule() const { return sched_; }
  const UNetConfig& config() const { return cfg_; }
  int t_o() const { return t_o_; }
  int t_a() const { return t_a_; }
  int d_a() const { return d_a_; }

  // Diffusion-step embedding for a batch of per-sample step indices.
  TensorT<S> timestep_embedding(const std::vector<int>& ks) const {
    int B = static_cast<int>(ks.size());
    std::vector<S> rows(static_cast<size_t>(B) * cfg_.temb_dim);
    for (int i = 0; i < B; ++i) {
      if (ks[i] < 0 || ks[i] >= sched_.k_train())
        throw TensorError("timestep_embedding: step " + std::to_string(ks[i]) + " out of [0," +
                          std::to_string(sched_.k_train()) + ")");
      auto f = sinusoid_features<S>(ks[i], cfg_.temb_dim);
      std::copy(f.begin(), f.end(), rows.begin() + static_cast<size_t>(i) * cfg_.temb_dim);
    }
    auto base = TensorT<S>::from_data({B, cfg_.temb_dim}, std::move(rows));
    return temb2_.forward(mish(temb1_.forward(base)));
  }

  // a_k: [B,T_a,D_a] noisy actions; proprio: [B,T_o,D_p]; cond: [B,R,cond_dim];
  // ks: per-sample diffusion steps. Returns predicted noise [B,T_a,D_a]; the
  // proprioception prefix is internal only and never appears in the output.
  TensorT<S> predict_noise(const TensorT<S>& a_k, const TensorT<S>& proprio,
                           const TensorT<S>& cond, const std::vector<int>& ks,
                           FwdCtx ctx = {}) const {
    int B = a_k.dim(0);
    if (a_k.rank() != 3 || a_k.dim(1) != t_a_ || a_k.dim(2) != d_a_)
      throw TensorError("predict_noise: actions " + shape_str(a_k.shape()) + " != [B," +
                        std::to_string(t_a_) + "," + std::to_string(d_a_) + "]");
    if (proprio.rank() != 3 || proprio.dim(0) != B || proprio.dim(1) != t_o_ ||
        proprio.dim(2) != d_p_)
      throw TensorError("predict_noise: proprio " + shape_str(proprio.shape()) + " != [B," +
                        std::to_string(t_o_) + "," + std::to_string(d_p_) + "]");
    if (cond.rank() != 3 || cond.dim(0) != B || cond.dim(1) != cfg_.cond_rows ||
        cond.dim(2) != cfg_.cond_dim)
      throw TensorError("predict_noise: conditioning " + shape_str(cond.shape()) + " != [B," +
                        std::to_string(cfg_.cond_rows) + "," + std::to_string(cfg_.cond_dim) +
                        "]");
    if (static_cast<int>(ks.size()) != B)
      throw TensorError("predict_noise: ks size != batch");

    auto temb = timestep_embedding(ks);  // [B,temb]
    TensorT<S> c = temb;
    if (!cfg_.cross_attn)
      c = concat<S>({temb, obs_proj_.forward(reshape(cond, {B, cfg_.cond_rows * cfg_.cond_dim}))},
                    -1);

    auto prefix = proprio_proj_.forward(proprio);        // [B,T_o,D_a]
    auto seq = concat<S>({prefix, a_k}, 1);              // [B,T,D_a]
    int T = t_o_ + t_a_;
    auto x = permute(seq, {0, 2, 1});                    // [B,D_a,T]
    int mult = cfg_.time_multiple();
    int padded = (T + mult - 1) / mult * mult;
    if (padded != T) x = pad_last_replicate(x, padded - T);

    std::vector<TensorT<S>> skips;
    for (const auto& st : downs_) {
      x = st.res1.forward(x, c);
      if (cfg_.cross_attn) x = st.ca1.forward(x, cond, ctx);
      x = st.res2.forward(x, c);
      if (cfg_.cross_attn) x = st.ca2.forward(x, cond, ctx);
      skips.push_back(x);
      if (st.down.kernels.defined()) x = st.down.forward(x);
    }
    x = mid1_.forward(x, c);
    if (cfg_.cross_attn) x = mid_ca1_.forward(x, cond, ctx);
    x = mid2_.forward(x, c);
    if (cfg_.cross_attn) x = mid_ca2_.forward(x, cond, ctx);
    for (const auto& st : ups_) {
      x = concat<S>({x, skips.back()}, 1);
      skips.pop_back();
      x = st.res1.forward(x, c);
      if (cfg_.cross_attn) x = st.ca1.forward(x, cond, ctx);
      x = st.res2.forward(x, c);
      if (cfg_.cross_attn) x = st.ca2.forward(x, cond, ctx);
      x = st.up.forward(x);
    }
    x = concat<S>({x, skips.back()}, 1);
    skips.pop_back();
    x = final_block_.forward(x);
    x = conv1d(x, final_w_, final_b_);                   // [B,D_a,padded]
    x = slice(x, 2, 0, T);
    x = slice(x, 2, t_o_, t_a_);                         // drop the prefix positions
    return permute(x, {0, 2, 1});                        // [B,T_a,D_a]
  }

  // Deterministic DDIM sampling for one observation; actions stay in the
  // model's (relative, standardized) domain.
  TensorT<S> sample(const TensorT<S>& proprio, const TensorT<S>& cond, int k_infer,
                    Rng& rng) const {
    NoGradGuard ng;
    auto a = TensorT<S>::randn({1, t_a_, d_a_}, rng);
    auto p3 = proprio.rank() == 2 ? reshape(proprio, {1, t_o_, d_p_}) : proprio;
    auto c3 = cond.rank() == 2 ? reshape(cond, {1, cond.dim(0), cond.dim(1)}) : cond;
    auto levels = sched_.sub_schedule(k_infer);
    S clip = static_cast<S>(cfg_.sample_clip);
    for (size_t i = 0; i + 1 < levels.size(); ++i) {
      auto eps = predict_noise(a, p3, c3, {levels[i]});
      if (clip > S(0)) {
        auto a0 = sched_.a0_estimate(a, eps, levels[i]);
        auto vals = a0.data();
        for (auto& v : vals) v = std::clamp(v, -clip, clip);
        a = sched_.add_noise(TensorT<S>::from_data(a0.shape(), std::move(vals)), eps,
                             levels[i + 1]);
      } else {
        a = sched_.ddim_step(a, eps, levels[i], levels[i + 1]);
      }
    }
    return reshape(a, {t_a_, d_a_});
  }

  void collect(const std::string& prefix, NamedParams<S>& out) {
    proprio_proj_.collect(prefix + ".proprio_proj", out);
    temb1_.collect(prefix + ".temb1", out);
    temb2_.collect(prefix + ".temb2", out);
    if (!cfg_.cross_attn) obs_proj_.collect(prefix + ".obs_proj", out);
    for (size_t i = 0; i < downs_.size(); ++i) {
      auto p = prefix + ".down" + std::to_string(i);
      downs_[i].res1.collect(p + ".res1", out);
      downs_[i].res2.collect(p + ".res2", out);
      if (cfg_.cross_attn) {
        downs_[i].ca1.collect(p + ".ca1", out);
        downs_[i].ca2.collect(p + ".ca2", out);
      }
      if (downs_[i].down.kernels.defined()) downs_[i].down.collect(p + ".down", out);
    }
    mid1_.collect(prefix + ".mid1", out);
    mid2_.collect(prefix + ".mid2", out);
    if (cfg_.cross_attn) {
      mid_ca1_.collect(prefix + ".mid_ca1", out);
      mid_ca2_.collect(prefix + ".mid_ca2", out);
    }
    for (size_t i = 0; i < ups_.size(); ++i) {
      auto p = prefix + ".up" + std::to_string(i);
      ups_[i].res1.collect(p + ".res1", out);
      ups_[i].res2.collect(p + ".res2", out);
      if (cfg_.cross_attn) {
        ups_[i].ca1.collect(p + ".ca1", out);
        ups_[i].ca2.collect(p + ".ca2", out);
      }
      ups_[i].up.collect(p + ".up", out);
    }
    final_block_.collect(prefix + ".final_block", out);
    out.emplace_back(prefix + ".final.w", final_w_);
    out.emplace_back(prefix + ".final.b", final_b_);
  }

  Linear<S>& temb2() { return temb2_; }

 private:
  struct DownStage {
    ResBlock1d<S> res1, res2;
    CrossAttnBlock1d<S> ca1, ca2;
    Downsample1d<S> down;
  };
  struct UpStage {
    ResBlock1d<S> res1, res2;
    CrossAttnBlock1d<S> ca1, ca2;
    Upsample1d<S> up;
  };

  UNetConfig cfg_;
  int t_o_ = 0, t_a_ = 0, d_a_ = 0, d_p_ = 0;
  NoiseSchedule sched_{std::vector<double>{1.0}};
  Linear<S> proprio_proj_, temb1_, temb2_, obs_proj_;
  std::vector<DownStage> downs_;
  ResBlock1d<S> mid1_, mid2_;
  CrossAttnBlock1d<S> mid_ca1_, mid_ca2_;
  std::vector<UpStage> ups_;
  Conv1dBlock<S> final_block_;
  TensorT<S> final_w_, final_b_;
};

}  // namespace cdp
