#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "cdp/image.hpp"
#include "cdp/nn.hpp"
#include "cdp/sim.hpp"
#include "cdp/store.hpp"
#include "cdp/train.hpp"
#include "cdp/vit.hpp"

namespace cdp {

struct PretrainOptions {
  int steps = 500;
  int batch_pairs = 8;  // scenes per step; two augmented views each
  double lr = 1e-3;
  double tau = 0.1;
  double jitter = 0.3;
  uint64_t seed = 7;
  int render_px = sim::kRenderPx;
  int metrics_every = 25;
};

// Scene diversity for encoder pretraining: backgrounds 0-5 and object colors
// 0-4. Backgrounds 6-9 and colors 5-7 are reserved for held-out evaluation and
// never appear here.
inline sim::SceneConfig pretrain_scene(Rng& rng) {
  sim::SceneConfig sc;
  sc.background_id = rng.uniform_int(6);
  sc.object_shape = rng.uniform_int(3);
  sc.object_color = rng.uniform_int(5);
  sc.object_size = 0.035 + 0.025 * rng.uniform();
  return sc;
}

inline sim::EnvState pretrain_state(const sim::SceneConfig& sc, Rng& rng) {
  sim::EnvState st;
  st.object.x = 0.05 + 0.90 * rng.uniform();
  st.object.y = 0.05 + (sim::kWorkspaceH - 0.10) * rng.uniform();
  st.gripper.x = 0.05 + 0.90 * rng.uniform();
  st.gripper.y = 0.05 + (sim::kWorkspaceH - 0.10) * rng.uniform();
  st.aperture = rng.uniform();
  st.held = false;
  (void)sc;
  return st;
}

struct PretrainSummary {
  int steps = 0;
  double first_loss = 0;
  double last_loss = 0;
};

// Self-supervised encoder pretraining: two augmented crops of the same
// rendered scene must find each other among the batch (InfoNCE). A small
// projection head is trained alongside and discarded afterwards.
template <typename S>
PretrainSummary pretrain_encoder(ViTEncoder<S>& enc, const PretrainOptions& opt,
                                 MetricsWriter* metrics = nullptr) {
  const int P = opt.batch_pairs;
  const int N = 2 * P;
  if (P < 2) throw TensorError("pretrain_encoder: need at least 2 scene pairs");
  const int crop = enc.config().image_size;
  const int D = enc.config().token_dim;
  const int L = enc.config().tokens();
  const int per = crop * crop * 3;

  Rng root(opt.seed);
  Rng init = root.fork(1);
  Linear<S> proj1(D, D, init);
  Linear<S> proj2(D, 64, init);
  NamedParams<S> params;
  enc.collect("enc", params);
  proj1.collect("proj.fc1", params);
  proj2.collect("proj.fc2", params);
  Adam<S> adam(params, static_cast<S>(opt.lr));

  // Additive mask that removes self-similarity from the logits.
  std::vector<S> diag(static_cast<size_t>(N) * N, S(0));
  std::vector<S> onehot(static_cast<size_t>(N) * N, S(0));
  for (int i = 0; i < N; ++i) {
    diag[static_cast<size_t>(i) * N + i] = S(-1e9);
    int partner = i < P ? i + P : i - P;
    onehot[static_cast<size_t>(i) * N + partner] = S(1);
  }
  auto mask = TensorT<S>::from_data({N, N}, std::move(diag));
  auto target = TensorT<S>::from_data({N, N}, std::move(onehot));

  PretrainSummary summary;
  auto t0 = std::chrono::steady_clock::now();
  for (int step = 0; step < opt.steps; ++step) {
    Rng srng = root.fork(1000 + static_cast<uint64_t>(step));
    std::vector<S> buf(static_cast<size_t>(N) * per);
    for (int p = 0; p < P; ++p) {
      auto sc = pretrain_scene(srng);
      auto st = pretrain_state(sc, srng);
      Image8 frame = sim::render_fixed(st, sc, opt.render_px);
      for (int v = 0; v < 2; ++v) {
        Image8 view = prepare_view(frame, crop, /*geo_aug=*/true, opt.jitter, srng);
        S* dst = buf.data() + (static_cast<size_t>(v) * P + p) * per;
        for (int k = 0; k < per; ++k) dst[k] = static_cast<S>(view.px[k]) / static_cast<S>(255);
      }
    }
    auto frames = TensorT<S>::from_data({N, crop, crop, 3}, std::move(buf));

    FwdCtx ctx;
    ctx.train = true;
    Rng drop = root.fork(2000000 + static_cast<uint64_t>(step));
    ctx.rng = &drop;
    auto tokens = reshape(enc.encode(frames, ctx), {N, L, D});
    auto flat = reshape(mean_axis_keep(tokens, 1), {N, D});  // frame embedding
    auto z = proj2.forward(gelu(proj1.forward(flat)));       // [N, 64]
    auto norm = sqrt(add(sum_axis_keep(mul(z, z), 1), TensorT<S>::full({1, 1}, S(1e-8))));
    auto zn = div(z, norm);
    auto logits =
        add(affine(matmul(zn, permute(zn, {1, 0})), S(1) / static_cast<S>(opt.tau)), mask);
    auto logp = log_softmax_last(logits);
    auto loss = affine(sum_all(mul(logp, target)), S(-1) / static_cast<S>(N));

    double lv = loss.item();
    if (!std::isfinite(lv))
      throw TensorError("pretrain_encoder: non-finite loss at step " + std::to_string(step));
    adam.zero_grad();
    loss.backward();
    adam.step();

    if (step == 0) summary.first_loss = lv;
    summary.last_loss = lv;
    ++summary.steps;
    if (metrics && (step + 1) % opt.metrics_every == 0)
      metrics->write({{"event", "pretrain_step"},
                      {"step", step + 1},
                      {"loss", lv},
                      {"wall_ms", wall_ms_since(t0)}});
  }
  if (metrics)
    metrics->write({{"event", "pretrain_done"},
                    {"steps", summary.steps},
                    {"first_loss", summary.first_loss},
                    {"last_loss", summary.last_loss},
                    {"wall_ms", wall_ms_since(t0)}});
  return summary;
}

}  // namespace cdp
