#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cdp/policy.hpp"

using namespace cdp;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.vit.image_size = 16;
  cfg.vit.patch = 8;
  cfg.vit.depth = 1;
  cfg.vit.heads = 2;
  cfg.vit.dim = 16;
  cfg.vit.token_dim = 16;
  cfg.lora.rank = 2;
  cfg.lora.dropout = 0.0f;
  cfg.perceiver.blocks = 1;
  cfg.perceiver.heads = 2;
  cfg.perceiver.dropout = 0.0f;
  cfg.unet.channels = {8, 16};
  cfg.unet.kernel = 3;
  cfg.unet.gn_groups = 4;
  cfg.unet.temb_dim = 8;
  cfg.unet.heads = 2;
  cfg.t_o = 2;
  cfg.t_a = 16;
  cfg.n_c = 2;
  cfg.k_train = 10;
  cfg.k_infer = 4;
  return cfg;
}

std::vector<std::array<double, 3>> mock_traj(int t0, int len) {
  std::vector<std::array<double, 3>> tr(len);
  for (int i = 0; i < len; ++i)
    tr[i] = {0.01 * t0 + 0.001 * i, 0.5 - 0.002 * i + 0.03 * t0, (t0 + i) % 2 ? 1.0 : 0.0};
  return tr;
}

}  // namespace

TEST_CASE("relative/absolute action transforms are exact inverses") {
  Rng rng(1);
  auto abs = Tensor::randn({8, 3}, rng);
  double rx = 0.62, ry = 0.91;
  auto rel = to_relative(abs, rx, ry);
  // aperture channel untouched
  for (int t = 0; t < 8; ++t) CHECK(rel.data()[t * 3 + 2] == abs.data()[t * 3 + 2]);
  auto back = from_relative(rel, rx, ry);
  for (size_t i = 0; i < abs.data().size(); ++i)
    CHECK(std::abs(back.data()[i] - abs.data()[i]) <= 1e-6f);
  CHECK_THROWS_AS(to_relative(Tensor::zeros({8, 2}), 0, 0), TensorError);
}

TEST_CASE("ensemble: single prediction passes through") {
  EnsembleBuffer buf(12);
  buf.add(0, mock_traj(0, 16));
  auto a = buf.action_at(3);
  auto expect = mock_traj(0, 16)[3];
  CHECK(a[0] == expect[0]);
  CHECK(a[1] == expect[1]);
  CHECK(a[2] == expect[2]);
}

TEST_CASE("ensemble: overlapping predictions average uniformly") {
  EnsembleBuffer buf(12);
  buf.add(0, mock_traj(0, 16));
  buf.add(4, mock_traj(4, 16));
  auto a = buf.action_at(6);
  auto e0 = mock_traj(0, 16)[6], e1 = mock_traj(4, 16)[2];
  for (int c = 0; c < 3; ++c) CHECK(a[c] == doctest::Approx((e0[c] + e1[c]) / 2).epsilon(1e-12));
}

TEST_CASE("ensemble: only the first window steps of a prediction participate") {
  EnsembleBuffer buf(4);
  buf.add(0, mock_traj(0, 16));
  buf.add(2, mock_traj(2, 16));
  // t=5: offset 5 for the first (>= window), offset 3 for the second (in window)
  auto a = buf.action_at(5);
  auto e = mock_traj(2, 16)[3];
  CHECK(a[0] == e[0]);
  CHECK(a[1] == e[1]);
}

TEST_CASE("ensemble: starvation is an error; pruning drops only spent entries") {
  EnsembleBuffer buf(4);
  CHECK_THROWS_AS(buf.action_at(0), TensorError);
  buf.add(0, mock_traj(0, 8));
  CHECK_THROWS_AS(buf.action_at(4), TensorError);  // beyond the window
  buf.add(4, mock_traj(4, 8));
  buf.prune(6);
  CHECK(buf.size() == 1);
  CHECK_NOTHROW(buf.action_at(6));
}

TEST_CASE("ensemble: merge order never changes the executed action") {
  EnsembleBuffer ab(12), ba(12);
  ab.add(0, mock_traj(0, 16));
  ab.add(4, mock_traj(4, 16));
  ab.add(8, mock_traj(8, 16));
  ba.add(8, mock_traj(8, 16));
  ba.add(0, mock_traj(0, 16));
  ba.add(4, mock_traj(4, 16));
  for (int t = 8; t < 12; ++t) {
    auto x = ab.action_at(t), y = ba.action_at(t);
    for (int c = 0; c < 3; ++c) CHECK(x[c] == y[c]);
  }
}

TEST_CASE("streaming execution equals the offline ensemble over 200 steps") {
  const int steps = 200, replan = 4, window = 12, horizon = 16;

  EnsembleBuffer offline(window);
  for (int t0 = 0; t0 < steps; t0 += replan) offline.add(t0, mock_traj(t0, horizon));
  std::vector<std::array<double, 3>> offline_actions;
  for (int t = 0; t < steps; ++t) offline_actions.push_back(offline.action_at(t));

  EnsembleBuffer streaming(window);
  for (int t = 0; t < steps; ++t) {
    if (t % replan == 0) streaming.add(t, mock_traj(t, horizon));
    auto a = streaming.action_at(t);
    for (int c = 0; c < 3; ++c) CHECK(a[c] == offline_actions[t][c]);
    streaming.prune(t);
  }
}

TEST_CASE("observation history front-fills at episode start, oldest first") {
  detail::ObsHistory h;
  h.reset(3);
  sim::StepObs o1;
  o1.fixed_cam = Image8::make(4, 4, 10);
  o1.hand_cam = Image8::make(4, 4, 11);
  o1.proprio[0] = 0.1;
  h.push(o1);
  CHECK(h.at(0).proprio[0] == 0.1);
  CHECK(h.at(2).proprio[0] == 0.1);  // replicated forward

  sim::StepObs o2 = o1;
  o2.fixed_cam = Image8::make(4, 4, 20);
  o2.proprio[0] = 0.2;
  h.push(o2);
  CHECK(h.at(0).proprio[0] == 0.1);  // oldest still the first real obs
  CHECK(h.at(1).proprio[0] == 0.1);  // front-fill
  CHECK(h.at(2).proprio[0] == 0.2);

  sim::StepObs o3 = o2;
  o3.proprio[0] = 0.3;
  h.push(o3);
  sim::StepObs o4 = o3;
  o4.proprio[0] = 0.4;
  h.push(o4);  // rolls o1 out
  CHECK(h.at(0).proprio[0] == 0.2);
  CHECK(h.at(2).proprio[0] == 0.4);
}

TEST_CASE("frames tensor is camera-major with the horizon oldest-first") {
  detail::ObsHistory h;
  h.reset(2);
  sim::StepObs a;
  a.fixed_cam = Image8::make(6, 6, 100);
  a.hand_cam = Image8::make(6, 6, 200);
  h.push(a);
  sim::StepObs b;
  b.fixed_cam = Image8::make(6, 6, 110);
  b.hand_cam = Image8::make(6, 6, 210);
  h.push(b);
  auto t = detail::frames_tensor<float>(h, 4);
  REQUIRE(t.shape() == Shape{4, 4, 4, 3});
  const int per = 4 * 4 * 3;
  CHECK(t.data()[0 * per] == doctest::Approx(100.0 / 255));  // cam0 oldest
  CHECK(t.data()[1 * per] == doctest::Approx(110.0 / 255));  // cam0 newest
  CHECK(t.data()[2 * per] == doctest::Approx(200.0 / 255));  // cam1 oldest
  CHECK(t.data()[3 * per] == doctest::Approx(210.0 / 255));  // cam1 newest
}

TEST_CASE("sequential policy agent: deterministic rollouts, no starvation") {
  ModelConfig cfg = tiny_cfg();
  PolicyModel<float> model(cfg, 99);
  RolloutConfig rc;
  rc.crop_px = cfg.vit.image_size;

  auto rollout = [&](uint64_t seed) {
    PolicyAgent<float> agent(model, rc, Rng(seed));
    sim::TransportEnv env;
    env.reset(sim::SceneConfig{}, {0.3, 0.7});
    agent.begin_episode();
    std::vector<double> xs;
    for (int t = 0; t < 24; ++t) {
      auto obs = sim::observe(env, 18);
      auto act = agent.act(obs);
      env.step(act);
      xs.push_back(act.x);
      xs.push_back(act.y);
      xs.push_back(act.g);
    }
    return xs;
  };
  auto r1 = rollout(7), r2 = rollout(7), r3 = rollout(8);
  CHECK(r1 == r2);
  CHECK(r1 != r3);
  for (double v : r1) CHECK(std::isfinite(v));
}

TEST_CASE("threaded policy agent completes episodes using merged predictions") {
  ModelConfig cfg = tiny_cfg();
  PolicyModel<float> model(cfg, 99);
  RolloutConfig rc;
  rc.crop_px = cfg.vit.image_size;

  ThreadedPolicyAgent<float> agent(model, rc, Rng(7));
  sim::TransportEnv env;
  for (int ep = 0; ep < 2; ++ep) {
    env.reset(sim::SceneConfig{}, {0.3, 0.7});
    agent.begin_episode();
    for (int t = 0; t < 20 && !env.done(); ++t) {
      auto obs = sim::observe(env, 18);
      auto act = agent.act(obs);
      CHECK(std::isfinite(act.x));
      CHECK(std::isfinite(act.y));
      env.step(act);
    }
  }
}
