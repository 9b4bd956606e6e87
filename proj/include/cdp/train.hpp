#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "cdp/image.hpp"
#include "cdp/model.hpp"
#include "cdp/policy.hpp"
#include "cdp/sim.hpp"
#include "cdp/store.hpp"

namespace cdp {

inline double wall_ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

// Every step of every episode opens a training window: the observation horizon
// ends at the step (front-filled at episode starts) and the action horizon
// starts there (tail-clamped at episode ends).
struct WindowIndex {
  int episode;
  int t;
};

inline std::vector<WindowIndex> all_windows(const std::vector<sim::Episode>& eps) {
  std::vector<WindowIndex> out;
  for (size_t e = 0; e < eps.size(); ++e)
    for (size_t t = 0; t < eps[e].steps.size(); ++t)
      out.push_back({static_cast<int>(e), static_cast<int>(t)});
  return out;
}

// Relative action target for window (e, t): expert waypoints over the action
// horizon minus the gripper position at t; the aperture channel stays as-is.
inline std::array<double, 3> window_action(const sim::Episode& ep, int t, int j) {
  int idx = std::min(t + j, static_cast<int>(ep.steps.size()) - 1);
  const auto& ref = ep.steps[t];
  const auto& a = ep.steps[idx].action;
  return {a[0] - ref.proprio[0], a[1] - ref.proprio[1], a[2]};
}

template <typename S>
std::pair<NormStats<S>, NormStats<S>> compute_norm_stats(const std::vector<sim::Episode>& eps,
                                                         int t_a) {
  double asum[3] = {0, 0, 0}, asq[3] = {0, 0, 0};
  double psum[3] = {0, 0, 0}, psq[3] = {0, 0, 0};
  long an = 0, pn = 0;
  for (const auto& ep : eps) {
    for (size_t t = 0; t < ep.steps.size(); ++t) {
      for (int j = 0; j < t_a; ++j) {
        auto a = window_action(ep, static_cast<int>(t), j);
        for (int c = 0; c < 3; ++c) {
          asum[c] += a[c];
          asq[c] += a[c] * a[c];
        }
        ++an;
      }
      for (int c = 0; c < 3; ++c) {
        psum[c] += ep.steps[t].proprio[c];
        psq[c] += ep.steps[t].proprio[c] * ep.steps[t].proprio[c];
      }
      ++pn;
    }
  }
  if (an == 0) throw TensorError("compute_norm_stats: empty dataset");
  auto finish = [](double* sum, double* sq, long n) {
    std::vector<S> mean(3), stdev(3);
    for (int c = 0; c < 3; ++c) {
      double m = sum[c] / n;
      double var = std::max(0.0, sq[c] / n - m * m);
      mean[c] = static_cast<S>(m);
      stdev[c] = static_cast<S>(std::max(std::sqrt(var), 1e-4));
    }
    return NormStats<S>{TensorT<S>::from_data({3}, std::move(mean)),
                        TensorT<S>::from_data({3}, std::move(stdev))};
  };
  return {finish(asum, asq, an), finish(psum, psq, pn)};
}

struct TrainOptions {
  int epochs = 12;
  int batch = 8;
  double lr = 3e-4;
  double jitter = 0.1;
  bool geo_aug = false;
  uint64_t seed = 1;
  int metrics_every = 25;
  int crop_px = 64;
};

// Assembles one minibatch of augmented views, raw proprio, and relative action
// targets for the given windows.
template <typename S>
TrainBatch<S> assemble_batch(const std::vector<sim::Episode>& eps,
                             const std::vector<WindowIndex>& windows, size_t lo, size_t hi,
                             const ModelConfig& cfg, const TrainOptions& opt, Rng& aug_rng) {
  int B = static_cast<int>(hi - lo);
  int crop = opt.crop_px;
  const int per = crop * crop * 3;
  std::vector<S> fbuf(static_cast<size_t>(B) * cfg.frames_per_sample() * per);
  std::vector<S> pbuf(static_cast<size_t>(B) * cfg.t_o * cfg.d_p);
  std::vector<S> abuf(static_cast<size_t>(B) * cfg.t_a * cfg.d_a);

  for (int b = 0; b < B; ++b) {
    const auto& w = windows[lo + b];
    const auto& ep = eps[w.episode];
    for (int cam = 0; cam < cfg.n_c; ++cam) {
      for (int i = 0; i < cfg.t_o; ++i) {
        int idx = std::max(0, w.t - (cfg.t_o - 1 - i));
        const Image8& raw = cam == 0 ? ep.steps[idx].fixed_cam : ep.steps[idx].hand_cam;
        Image8 view = prepare_view(raw, crop, opt.geo_aug, opt.jitter, aug_rng);
        S* dst = fbuf.data() +
                 (static_cast<size_t>(b) * cfg.frames_per_sample() + cam * cfg.t_o + i) * per;
        for (int k = 0; k < per; ++k) dst[k] = static_cast<S>(view.px[k]) / static_cast<S>(255);
      }
    }
    for (int i = 0; i < cfg.t_o; ++i) {
      int idx = std::max(0, w.t - (cfg.t_o - 1 - i));
      for (int c = 0; c < cfg.d_p; ++c)
        pbuf[(static_cast<size_t>(b) * cfg.t_o + i) * cfg.d_p + c] =
            static_cast<S>(ep.steps[idx].proprio[c]);
    }
    for (int j = 0; j < cfg.t_a; ++j) {
      auto a = window_action(ep, w.t, j);
      for (int c = 0; c < cfg.d_a; ++c)
        abuf[(static_cast<size_t>(b) * cfg.t_a + j) * cfg.d_a + c] = static_cast<S>(a[c]);
    }
  }
  TrainBatch<S> out;
  out.frames = TensorT<S>::from_data(
      {B * cfg.frames_per_sample(), crop, crop, 3}, std::move(fbuf));
  out.proprio = TensorT<S>::from_data({B, cfg.t_o, cfg.d_p}, std::move(pbuf));
  out.actions = TensorT<S>::from_data({B, cfg.t_a, cfg.d_a}, std::move(abuf));
  return out;
}

struct TrainSummary {
  int steps = 0;
  double first_loss = 0;
  double last_loss = 0;
};

// Behavior-cloning loop. With epochs == 0 the model is left untouched
// (normalization stats included), so a saved checkpoint equals initialization.
inline TrainSummary train_policy(PolicyModel<float>& model, const std::vector<sim::Episode>& eps,
                                 const TrainOptions& opt, MetricsWriter* metrics = nullptr) {
  TrainSummary summary;
  if (opt.epochs == 0) return summary;
  if (eps.empty()) throw TensorError("train_policy: no episodes");
  const ModelConfig& cfg = model.config();
  if (opt.crop_px != cfg.vit.image_size)
    throw TensorError("train_policy: crop " + std::to_string(opt.crop_px) +
                      " != encoder input " + std::to_string(cfg.vit.image_size));

  auto [act_stats, prop_stats] = compute_norm_stats<float>(eps, cfg.t_a);
  model.set_norm_stats(act_stats, prop_stats);

  auto windows = all_windows(eps);
  auto state = model.state();
  Adam<float> adam(state, static_cast<float>(opt.lr));
  Rng root(opt.seed);
  auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng shuffle_rng = root.fork(1000 + static_cast<uint64_t>(epoch));
    for (size_t i = windows.size(); i > 1; --i)
      std::swap(windows[i - 1], windows[shuffle_rng.uniform_int(static_cast<int>(i))]);

    for (size_t lo = 0; lo + 1 <= windows.size(); lo += opt.batch) {
      size_t hi = std::min(windows.size(), lo + opt.batch);
      Rng aug_rng = root.fork(2000000 + static_cast<uint64_t>(summary.steps));
      Rng noise_rng = root.fork(3000000 + static_cast<uint64_t>(summary.steps));
      Rng drop_rng = root.fork(4000000 + static_cast<uint64_t>(summary.steps));

      auto batch = assemble_batch<float>(eps, windows, lo, hi, cfg, opt, aug_rng);
      FwdCtx ctx;
      ctx.train = true;
      ctx.rng = &drop_rng;
      auto loss = model.training_loss(batch, noise_rng, ctx);
      double lv = loss.item();
      if (!std::isfinite(lv))
        throw TensorError("train_policy: non-finite loss at epoch " + std::to_string(epoch) +
                          " step " + std::to_string(summary.steps));
      adam.zero_grad();
      loss.backward();
      adam.step();

      if (summary.steps == 0) summary.first_loss = lv;
      summary.last_loss = lv;
      ++summary.steps;
      if (metrics && summary.steps % opt.metrics_every == 0)
        metrics->write({{"event", "train_step"},
                        {"epoch", epoch},
                        {"step", summary.steps},
                        {"loss", lv},
                        {"wall_ms", wall_ms_since(t0)}});
    }
  }
  if (metrics)
    metrics->write({{"event", "train_done"},
                    {"steps", summary.steps},
                    {"last_loss", summary.last_loss},
                    {"wall_ms", wall_ms_since(t0)}});
  return summary;
}

}  // namespace cdp
