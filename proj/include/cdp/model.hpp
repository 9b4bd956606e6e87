#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cdp/nn.hpp"
#include "cdp/perceiver.hpp"
#include "cdp/unet.hpp"
#include "cdp/vit.hpp"

namespace cdp {

// Ablation axes. Each named variant flips exactly one axis off the canonical
// configuration (LoRA-adapted frozen encoder, causal compressor, cross-attention
// conditioned head).
enum class EncoderMode { FrozenLora, Scratch };
enum class CompressorMode { Causal, MeanPool, FullSequence };
enum class HeadMode { AttnUnet, FilmUnet };

struct VariantConfig {
  EncoderMode encoder = EncoderMode::FrozenLora;
  CompressorMode compressor = CompressorMode::Causal;
  HeadMode head = HeadMode::AttnUnet;

  bool operator==(const VariantConfig& o) const {
    return encoder == o.encoder && compressor == o.compressor && head == o.head;
  }
};

inline std::string variant_name(const VariantConfig& v) {
  if (v == VariantConfig{}) return "canonical";
  if (v.compressor == CompressorMode::MeanPool && v.encoder == EncoderMode::FrozenLora &&
      v.head == HeadMode::AttnUnet)
    return "mean-pool";
  if (v.compressor == CompressorMode::FullSequence && v.encoder == EncoderMode::FrozenLora &&
      v.head == HeadMode::AttnUnet)
    return "full-seq";
  if (v.encoder == EncoderMode::Scratch && v.compressor == CompressorMode::Causal &&
      v.head == HeadMode::AttnUnet)
    return "scratch";
  if (v.head == HeadMode::FilmUnet && v.encoder == EncoderMode::FrozenLora &&
      v.compressor == CompressorMode::Causal)
    return "film-unet";
  return "custom";
}

inline VariantConfig parse_variant(const std::string& s) {
  VariantConfig v;
  if (s == "canonical") return v;
  if (s == "mean-pool") {
    v.compressor = CompressorMode::MeanPool;
    return v;
  }
  if (s == "full-seq") {
    v.compressor = CompressorMode::FullSequence;
    return v;
  }
  if (s == "scratch") {
    v.encoder = EncoderMode::Scratch;
    return v;
  }
  if (s == "film-unet") {
    v.head = HeadMode::FilmUnet;
    return v;
  }
  throw TensorError("unknown variant '" + s +
                    "' (expected canonical|mean-pool|full-seq|scratch|film-unet)");
}

struct ModelConfig {
  ViTConfig vit;            // 64px frames, 8px patches -> 64 tokens per frame
  LoRAConfig lora;
  PerceiverConfig perceiver;
  UNetConfig unet;
  int t_o = 4;              // observation horizon (frames per camera)
  int t_a = 20;             // predicted action steps
  int n_c = 2;              // cameras
  int d_a = 3;              // action dims: waypoint x, y, aperture
  int d_p = 3;              // proprio dims: gripper x, y, aperture
  int k_train = 100;
  int k_infer = 16;
  VariantConfig variant;

  // Propagates the shared dimensions into the component configs.
  ModelConfig resolved() const {
    ModelConfig c = *this;
    c.vit.validate();
    c.perceiver.t_o = c.t_o;
    c.perceiver.n_c = c.n_c;
    c.perceiver.l = c.vit.tokens();
    c.perceiver.token_dim = c.vit.token_dim;
    c.unet.cond_dim = c.vit.token_dim;
    c.unet.cross_attn = c.variant.head == HeadMode::AttnUnet;
    switch (c.variant.compressor) {
      case CompressorMode::Causal: c.unet.cond_rows = c.t_o; break;
      case CompressorMode::MeanPool: c.unet.cond_rows = c.n_c; break;
      case CompressorMode::FullSequence: c.unet.cond_rows = c.n_c * c.t_o * c.vit.tokens(); break;
    }
    c.perceiver.validate();
    c.unet.validate();
    if (c.t_a < 1 || c.t_o < 1 || c.n_c < 1)
      throw TensorError("ModelConfig: horizons and camera count must be positive");
    return c;
  }

  int frames_per_sample() const { return n_c * t_o; }
  int keys_per_sample() const { return n_c * t_o * vit.tokens(); }
};

// Per-channel standardization stats, stored with the checkpoint.
template <typename S>
struct NormStats {
  TensorT<S> mean, stdev;

  static NormStats identity(int dim) {
    return {TensorT<S>::zeros({dim}), TensorT<S>::full({dim}, S(1))};
  }
  // (x - mean) / std broadcast over the trailing axis.
  TensorT<S> apply(const TensorT<S>& x) const { return div(sub(x, mean), stdev); }
  TensorT<S> invert(const TensorT<S>& x) const { return add(mul(x, stdev), mean); }
};

template <typename S>
struct TrainBatch {
  TensorT<S> frames;   // [B*N_c*T_o, H, W, 3], camera-major within each sample
  TensorT<S> proprio;  // [B, T_o, D_p], raw units
  TensorT<S> actions;  // [B, T_a, D_a], relative, raw units
};

template <typename S>
struct LossParts {
  TensorT<S> loss;     // scalar
  TensorT<S> eps;      // injected noise
  TensorT<S> eps_hat;  // model prediction
  std::vector<int> ks;
};

// Full policy network: frozen-or-scratch ViT per frame, token compressor,
// diffusion action head. Component RNGs are forked from the seed with fixed
// salts, so two variants built from one seed share bit-identical weights for
// every component they have in common.
template <typename S>
class PolicyModel {
 public:
  PolicyModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg.resolved()) {
    Rng root(seed);
    Rng enc_rng = root.fork(1);
    encoder_.emplace(cfg_.vit, enc_rng);
    if (cfg_.variant.encoder == EncoderMode::FrozenLora) {
      Rng lora_rng = root.fork(2);
      encoder_->add_lora(cfg_.lora, lora_rng);
      encoder_->set_base_frozen(true);
    }
    if (cfg_.variant.compressor == CompressorMode::Causal) {
      Rng per_rng = root.fork(3);
      perceiver_.emplace(cfg_.perceiver, per_rng);
    }
    Rng head_rng = root.fork(4);
    head_.emplace(cfg_.unet, cfg_.t_o, cfg_.t_a, cfg_.d_a, cfg_.d_p, cfg_.k_train, head_rng);
    act_norm_ = NormStats<S>::identity(cfg_.d_a);
    prop_norm_ = NormStats<S>::identity(cfg_.d_p);
  }

  const ModelConfig& config() const { return cfg_; }
  ViTEncoder<S>& encoder() { return *encoder_; }
  DiffusionHead<S>& head() { return *head_; }
  Perceiver<S>& perceiver() { return *perceiver_; }
  const NormStats<S>& action_norm() const { return act_norm_; }
  const NormStats<S>& proprio_norm() const { return prop_norm_; }

  void set_norm_stats(const NormStats<S>& act, const NormStats<S>& prop) {
    copy_into(act_norm_.mean, act.mean, "action mean");
    copy_into(act_norm_.stdev, act.stdev, "action std");
    copy_into(prop_norm_.mean, prop.mean, "proprio mean");
    copy_into(prop_norm_.stdev, prop.stdev, "proprio std");
  }

  // Frames [F,H,W,3] with F a multiple of N_c*T_o -> token sequences
  // [B, N_c*T_o*L, D] laid out camera-major to match the compressor masks.
  TensorT<S> encode_obs(const TensorT<S>& frames, const FwdCtx& ctx = {}) {
    int fps = cfg_.frames_per_sample();
    if (frames.rank() != 4 || frames.dim(0) % fps != 0)
      throw TensorError("encode_obs: frames " + shape_str(frames.shape()) +
                        " not a multiple of " + std::to_string(fps) + " per sample");
    int B = frames.dim(0) / fps;
    auto tok = encoder_->encode(frames, ctx);  // [F*L, D]
    return reshape(tok, {B, cfg_.keys_per_sample(), cfg_.vit.token_dim});
  }

  // [B, N_c*T_o*L, D] -> conditioning rows [B, R, D] per the compressor mode.
  TensorT<S> compress(const TensorT<S>& tokens, const FwdCtx& ctx = {}) {
    int B = tokens.dim(0);
    switch (cfg_.variant.compressor) {
      case CompressorMode::Causal:
        return perceiver_->compress(tokens, ctx);
      case CompressorMode::MeanPool: {
        auto g = reshape(tokens, {B, cfg_.n_c, cfg_.t_o * cfg_.vit.tokens(), cfg_.vit.token_dim});
        return reshape(mean_axis_keep(g, 2), {B, cfg_.n_c, cfg_.vit.token_dim});
      }
      default:
        return tokens;
    }
  }

  // Diffusion BC loss on a batch; actions and proprio arrive in raw units and
  // are standardized internally. Per-sample diffusion steps and noise come
  // from `rng`.
  LossParts<S> training_loss_parts(const TrainBatch<S>& batch, Rng& rng, const FwdCtx& ctx = {}) {
    if (!batch.actions.defined() || batch.actions.rank() != 3 || batch.actions.dim(0) == 0)
      throw TensorError("training_loss: empty or malformed action batch");
    int B = batch.actions.dim(0);
    if (batch.actions.dim(1) != cfg_.t_a || batch.actions.dim(2) != cfg_.d_a)
      throw TensorError("training_loss: actions " + shape_str(batch.actions.shape()) +
                        " != [B," + std::to_string(cfg_.t_a) + "," + std::to_string(cfg_.d_a) +
                        "]");
    auto a0 = act_norm_.apply(batch.actions);
    auto prop = prop_norm_.apply(batch.proprio);
    auto cond = compress(encode_obs(batch.frames, ctx), ctx);

    LossParts<S> parts;
    parts.ks.reserve(B);
    std::vector<S> rs(B), rn(B);
    for (int b = 0; b < B; ++b) {
      int k = rng.uniform_int(cfg_.k_train);
      parts.ks.push_back(k);
      double sig = head_->schedule().signal(k);
      rs[b] = static_cast<S>(std::sqrt(sig));
      rn[b] = static_cast<S>(std::sqrt(1.0 - sig));
    }
    parts.eps = TensorT<S>::randn({B, cfg_.t_a, cfg_.d_a}, rng);
    auto root_sig = TensorT<S>::from_data({B, 1, 1}, std::move(rs));
    auto root_noise = TensorT<S>::from_data({B, 1, 1}, std::move(rn));
    auto a_k = add(mul(a0, root_sig), mul(parts.eps, root_noise));
    parts.eps_hat = head_->predict_noise(a_k, prop, cond, parts.ks, ctx);
    parts.loss = mse(parts.eps_hat, parts.eps);
    return parts;
  }

  TensorT<S> training_loss(const TrainBatch<S>& batch, Rng& rng, const FwdCtx& ctx = {}) {
    return training_loss_parts(batch, rng, ctx).loss;
  }

  // One observation -> relative action sequence [T_a, D_a] in raw units.
  // frames: [N_c*T_o, H, W, 3]; proprio: [T_o, D_p] raw.
  TensorT<S> infer(const TensorT<S>& frames, const TensorT<S>& proprio, Rng& rng) {
    NoGradGuard ng;
    auto cond = compress(encode_obs(frames));
    auto prop = prop_norm_.apply(reshape(proprio, {1, cfg_.t_o, cfg_.d_p}));
    auto a = head_->sample(prop, cond, cfg_.k_infer, rng);
    return act_norm_.invert(a);
  }

  // All tensors, including frozen weights and normalization stats (stats are
  // requires_grad=false so optimizers skip them).
  NamedParams<S> state() {
    NamedParams<S> out;
    encoder_->collect("enc", out);
    if (perceiver_) perceiver_->collect("perceiver", out);
    head_->collect("head", out);
    out.emplace_back("norm.act_mean", act_norm_.mean);
    out.emplace_back("norm.act_std", act_norm_.stdev);
    out.emplace_back("norm.prop_mean", prop_norm_.mean);
    out.emplace_back("norm.prop_std", prop_norm_.stdev);
    return out;
  }

 private:
  static void copy_into(TensorT<S>& dst, const TensorT<S>& src, const char* what) {
    if (src.shape() != dst.shape())
      throw TensorError(std::string("set_norm_stats: ") + what + " shape " +
                        shape_str(src.shape()) + " != " + shape_str(dst.shape()));
    dst.mutable_data() = src.data();
  }

  ModelConfig cfg_;
  std::optional<ViTEncoder<S>> encoder_;
  std::optional<Perceiver<S>> perceiver_;
  std::optional<DiffusionHead<S>> head_;
  NormStats<S> act_norm_, prop_norm_;
};

}  // namespace cdp
