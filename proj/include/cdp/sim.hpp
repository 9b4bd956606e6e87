#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdp/image.hpp"
#include "cdp/rng.hpp"
#include "cdp/tensor.hpp"

namespace cdp::sim {

// Planar tabletop, 45:60 aspect, normalized so x in [0,1] (left-right) and
// y in [0,1.333] (near-far). All radii and step limits are fractions of the
// workspace width.
constexpr double kWorkspaceW = 1.0;
constexpr double kWorkspaceH = 4.0 / 3.0;
constexpr double kMaxStep = 0.04;        // per-step gripper displacement cap
constexpr double kApertureRate = 0.25;   // per-step aperture change cap
constexpr double kApertureThresh = 0.5;  // below = closed, above = open
constexpr double kGraspRadius = 0.03;    // 3% of width
constexpr double kReachRadius = 0.06;
constexpr double kDropRadius = 0.10;
constexpr int kMaxEpisodeSteps = 200;

constexpr double kDropX = 0.80, kDropY = 0.667;   // fixed drop target, right half
constexpr double kGripHomeX = 0.70, kGripHomeY = 0.90;

struct Vec2 {
  double x = 0, y = 0;
};

inline double dist(const Vec2& a, const Vec2& b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Object shapes: 0 = square, 1 = disc, 2 = triangle.
// Background ids address deterministic procedural patterns; object color ids a
// fixed palette. Camera fields perturb the fixed camera only.
struct SceneConfig {
  int background_id = 0;
  int object_shape = 0;
  int object_color = 0;
  double object_size = 0.045;  // half extent, workspace units
  double camera_dx = 0.0;      // view shift, fraction of workspace width
  double camera_dy = 0.0;
  double camera_warp = 0.0;    // corner displacement scale for the fixed camera
};

struct EnvState {
  Vec2 object;
  Vec2 gripper;
  double aperture = 1.0;  // 1 = fully open, 0 = fully closed
  bool held = false;
  int steps = 0;
};

// Absolute target waypoint plus aperture command, all in workspace units.
struct Action {
  double x = 0, y = 0, g = 1.0;
};

struct StageResult {
  bool reach = false;
  bool grasp = false;
  bool drop = false;
  int steps = 0;
};

class TransportEnv {
 public:
  // Places the object at an explicit position (evaluation trials are
  // pre-generated, data collection draws positions before reset).
  void reset(const SceneConfig& scene, const Vec2& object_pos) {
    scene_ = scene;
    st_ = EnvState{};
    st_.object = object_pos;
    st_.gripper = {kGripHomeX, kGripHomeY};
    st_.aperture = 1.0;
    stages_ = StageResult{};
  }

  // Draws the object position uniformly over the left half, away from edges.
  static Vec2 draw_object_pos(Rng& rng, double size) {
    double m = size + 0.02;
    return {rng.uniform(m, 0.5 - m), rng.uniform(m, kWorkspaceH - m)};
  }

  const EnvState& state() const { return st_; }
  const SceneConfig& scene() const { return scene_; }
  const StageResult& stages() const { return stages_; }
  bool done() const { return stages_.drop || st_.steps >= kMaxEpisodeSteps; }

  void step(const Action& a) {
    if (!std::isfinite(a.x) || !std::isfinite(a.y) || !std::isfinite(a.g))
      throw TensorError("TransportEnv::step: non-finite action");
    Vec2 target{std::clamp(a.x, 0.0, kWorkspaceW), std::clamp(a.y, 0.0, kWorkspaceH)};
    double dx = target.x - st_.gripper.x, dy = target.y - st_.gripper.y;
    double d = std::hypot(dx, dy);
    if (d > kMaxStep) {
      dx *= kMaxStep / d;
      dy *= kMaxStep / d;
    }
    st_.gripper.x += dx;
    st_.gripper.y += dy;

    double g_cmd = std::clamp(a.g, 0.0, 1.0);
    double da = std::clamp(g_cmd - st_.aperture, -kApertureRate, kApertureRate);
    bool was_closed = st_.aperture < kApertureThresh;
    st_.aperture += da;
    bool is_closed = st_.aperture < kApertureThresh;

    if (!was_closed && is_closed && !st_.held &&
        dist(st_.gripper, st_.object) <= kGraspRadius) {
      st_.held = true;
      stages_.grasp = true;
    }
    if (was_closed && !is_closed && st_.held) {
      st_.held = false;
      if (dist(st_.object, {kDropX, kDropY}) <= kDropRadius) stages_.drop = true;
    }
    if (st_.held) st_.object = st_.gripper;

    if (dist(st_.gripper, st_.object) <= kReachRadius) stages_.reach = true;
    ++st_.steps;
    stages_.steps = st_.steps;
  }

 private:
  SceneConfig scene_;
  EnvState st_;
  StageResult stages_;
};

// ---------------------------------------------------------------------------
// Rendering. Every camera is a map from output pixels to workspace points; the
// scene is sampled analytically at those points, so renders are deterministic
// and camera perturbations are exact world-space transforms.

constexpr int kRenderPx = 72;  // native render size; crops produce the 64px input

namespace detail {

struct Rgb {
  uint8_t r, g, b;
};

inline Rgb object_palette(int id) {
  static const Rgb table[8] = {{200, 40, 40},  {40, 170, 60},  {230, 150, 30}, {150, 60, 190},
                               {40, 170, 190}, {230, 210, 50}, {230, 90, 160}, {120, 80, 40}};
  return table[((id % 8) + 8) % 8];
}

inline Rgb background_at(int id, double wx, double wy) {
  int family = ((id % 10) + 10) % 10;
  // Two tones per pattern, varied with the id so unseen ids look new.
  int shade = 150 + 12 * (family % 4);
  uint8_t hi = static_cast<uint8_t>(shade), lo = static_cast<uint8_t>(shade - 55);
  switch (family % 5) {
    case 0:
      return {hi, hi, static_cast<uint8_t>(hi - 10)};  // plain
    case 1: {
      int cell = (static_cast<int>(std::floor(wx / 0.12)) +
                  static_cast<int>(std::floor(wy / 0.12))) &
                 1;
      return cell ? Rgb{hi, hi, lo} : Rgb{lo, lo, hi};
    }
    case 2: {
      int band = static_cast<int>(std::floor((wx + 2.0) / 0.09)) & 1;
      return band ? Rgb{hi, lo, lo} : Rgb{hi, hi, hi};
    }
    case 3: {
      double fx = wx / 0.15 - std::floor(wx / 0.15) - 0.5;
      double fy = wy / 0.15 - std::floor(wy / 0.15) - 0.5;
      return (fx * fx + fy * fy < 0.04) ? Rgb{lo, hi, lo} : Rgb{hi, hi, hi};
    }
    default: {
      double t = std::clamp((wx + wy) / (kWorkspaceW + kWorkspaceH), 0.0, 1.0);
      return {static_cast<uint8_t>(lo + t * (hi - lo)), static_cast<uint8_t>(hi - t * 40),
              static_cast<uint8_t>(lo + t * 30)};
    }
  }
}

inline bool inside_object(const SceneConfig& sc, const Vec2& obj, double wx, double wy) {
  double dx = wx - obj.x, dy = wy - obj.y, s = sc.object_size;
  switch (((sc.object_shape % 3) + 3) % 3) {
    case 0:
      return std::abs(dx) <= s && std::abs(dy) <= s;
    case 1:
      return dx * dx + dy * dy <= s * s;
    default:
      return dy >= -s && dy <= s && std::abs(dx) <= (s - dy) * 0.5;
  }
}

// Scene sample at a workspace point; draw order gripper > object > marker > table.
inline Rgb world_color(const EnvState& st, const SceneConfig& sc, double wx, double wy) {
  if (wx < 0 || wx > kWorkspaceW || wy < 0 || wy > kWorkspaceH) return {18, 18, 18};
  double finger_off = 0.015 + 0.035 * st.aperture;
  double fr = 0.016;
  for (int side = -1; side <= 1; side += 2) {
    double fx = st.gripper.x + side * finger_off, fy = st.gripper.y;
    if ((wx - fx) * (wx - fx) + (wy - fy) * (wy - fy) <= fr * fr) return {35, 35, 205};
  }
  double gx = wx - st.gripper.x, gy = wy - st.gripper.y;
  if (gx * gx + gy * gy <= 0.011 * 0.011) return {15, 15, 90};
  if (inside_object(sc, st.object, wx, wy)) return object_palette(sc.object_color);
  double dd = std::hypot(wx - kDropX, wy - kDropY);
  if (std::abs(dd - kDropRadius) <= 0.012) return {95, 95, 95};
  return background_at(sc.background_id, wx, wy);
}

}  // namespace detail

// Fixed camera: pixel (row,col) -> workspace point through a quad whose corners
// are the (shifted, warped) workspace corners. With zero shift and warp the map
// is the exact linear stretch used by the centroid oracle.
inline Vec2 fixed_camera_point(const SceneConfig& sc, double u, double v) {
  // Deterministic corner displacement pattern scaled by camera_warp.
  static const double px[4] = {1.0, -0.8, 0.5, -0.6};
  static const double py[4] = {0.6, 0.3, -0.7, -0.4};
  double cx[4], cy[4];
  const double bx[4] = {0.0, kWorkspaceW, 0.0, kWorkspaceW};
  const double by[4] = {0.0, 0.0, kWorkspaceH, kWorkspaceH};
  for (int k = 0; k < 4; ++k) {
    cx[k] = bx[k] + sc.camera_dx * kWorkspaceW + sc.camera_warp * px[k];
    cy[k] = by[k] + sc.camera_dy * kWorkspaceW + sc.camera_warp * py[k];
  }
  double wx = (cx[0] * (1 - u) + cx[1] * u) * (1 - v) + (cx[2] * (1 - u) + cx[3] * u) * v;
  double wy = (cy[0] * (1 - u) + cy[1] * u) * (1 - v) + (cy[2] * (1 - u) + cy[3] * u) * v;
  return {wx, wy};
}

inline Image8 render_fixed(const EnvState& st, const SceneConfig& sc, int px = kRenderPx) {
  Image8 im = Image8::make(px, px);
  for (int y = 0; y < px; ++y) {
    double v = double(y) / (px - 1);
    for (int x = 0; x < px; ++x) {
      double u = double(x) / (px - 1);
      Vec2 w = fixed_camera_point(sc, u, v);
      detail::Rgb c = detail::world_color(st, sc, w.x, w.y);
      im.at(y, x, 0) = c.r;
      im.at(y, x, 1) = c.g;
      im.at(y, x, 2) = c.b;
    }
  }
  return im;
}

constexpr double kHandViewSpan = 0.40;  // in-hand camera window, workspace units

inline Image8 render_hand(const EnvState& st, const SceneConfig& sc, int px = kRenderPx) {
  Image8 im = Image8::make(px, px);
  for (int y = 0; y < px; ++y) {
    double wy = st.gripper.y + (double(y) / (px - 1) - 0.5) * kHandViewSpan;
    for (int x = 0; x < px; ++x) {
      double wx = st.gripper.x + (double(x) / (px - 1) - 0.5) * kHandViewSpan;
      detail::Rgb c = detail::world_color(st, sc, wx, wy);
      im.at(y, x, 0) = c.r;
      im.at(y, x, 1) = c.g;
      im.at(y, x, 2) = c.b;
    }
  }
  return im;
}

// Inverse of the unperturbed fixed camera, for the centroid oracle.
inline Vec2 fixed_pixel_to_world(double row, double col, int px = kRenderPx) {
  return {col / (px - 1) * kWorkspaceW, row / (px - 1) * kWorkspaceH};
}

// ---------------------------------------------------------------------------
// Scripted expert: approach with an open gripper, close inside the grasp
// radius, carry to the drop target, release. Waypoints get small seeded jitter
// so demonstrations are not pixel-identical trajectories.

class ScriptedExpert {
 public:
  explicit ScriptedExpert(Rng rng, double jitter = 0.008) : rng_(rng), jitter_(jitter) {}

  Action act(const EnvState& st) {
    Action a;
    bool precise = false;  // no jitter while closing or releasing
    if (!st.held) {
      double d = dist(st.gripper, st.object);
      a.x = st.object.x;
      a.y = st.object.y;
      if (st.aperture < kApertureThresh && d > kGraspRadius) {
        a.g = 1.0;  // closed on nothing: reopen and retry
      } else if (d > kGraspRadius * 0.5) {
        a.g = 1.0;
      } else {
        a.g = 0.0;
        precise = true;
      }
    } else {
      a.x = kDropX;
      a.y = kDropY;
      if (dist(st.gripper, {kDropX, kDropY}) > kDropRadius * 0.4) {
        a.g = 0.0;
      } else {
        a.g = 1.0;  // release over the target
        precise = true;
      }
    }
    if (!precise) {
      a.x = std::clamp(a.x + rng_.normal() * jitter_, 0.0, kWorkspaceW);
      a.y = std::clamp(a.y + rng_.normal() * jitter_, 0.0, kWorkspaceH);
    }
    return a;
  }

 private:
  Rng rng_;
  double jitter_;
};

// ---------------------------------------------------------------------------
// Generalization levels. Demonstrations always use the canonical scene
// (background 0, red square). Backgrounds 1-5 and colors 1-4 appear in encoder
// pretraining but never in demos; backgrounds 6-9 and colors 5-7 appear
// nowhere before the corresponding evaluations.

enum class Level { L0, L1Bg, L1Obj, L1Cam, L2 };

inline const char* level_name(Level l) {
  switch (l) {
    case Level::L0: return "l0";
    case Level::L1Bg: return "l1bg";
    case Level::L1Obj: return "l1obj";
    case Level::L1Cam: return "l1cam";
    default: return "l2";
  }
}

inline Level parse_level(const std::string& s) {
  if (s == "l0") return Level::L0;
  if (s == "l1bg") return Level::L1Bg;
  if (s == "l1obj") return Level::L1Obj;
  if (s == "l1cam") return Level::L1Cam;
  if (s == "l2") return Level::L2;
  throw TensorError("unknown level '" + s + "' (expected l0|l1bg|l1obj|l1cam|l2)");
}

inline SceneConfig scene_for_level(Level level, Rng& rng) {
  SceneConfig sc;  // canonical: background 0, red square, nominal camera
  switch (level) {
    case Level::L0:
      break;
    case Level::L1Bg:
      sc.background_id = 1 + rng.uniform_int(5);
      break;
    case Level::L1Obj:
      sc.object_shape = 1 + rng.uniform_int(2);
      sc.object_color = 1 + rng.uniform_int(4);
      sc.object_size = rng.uniform(0.035, 0.06);
      break;
    case Level::L1Cam:
      sc.camera_dx = 0.12;
      sc.camera_dy = 0.04;
      sc.camera_warp = 0.035;
      break;
    case Level::L2:
      sc.background_id = 6 + rng.uniform_int(4);
      sc.object_shape = rng.uniform_int(3);
      sc.object_color = 5 + rng.uniform_int(3);
      sc.object_size = rng.uniform(0.035, 0.06);
      break;
  }
  return sc;
}

struct TrialSpec {
  SceneConfig scene;
  Vec2 object_pos;
};

inline std::vector<TrialSpec> make_trials(Level level, int n, uint64_t seed) {
  std::vector<TrialSpec> out;
  out.reserve(n);
  Rng base(seed);
  for (int i = 0; i < n; ++i) {
    Rng r = base.fork(static_cast<uint64_t>(i) + 1);
    TrialSpec t;
    t.scene = scene_for_level(level, r);
    t.object_pos = TransportEnv::draw_object_pos(r, t.scene.object_size);
    out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episode rollouts. Agents see both camera frames plus proprioception each
// step and answer with an absolute waypoint action.

struct StepObs {
  Image8 fixed_cam;
  Image8 hand_cam;
  double proprio[3];  // gripper x, y, aperture
  int t = 0;
};

class Agent {
 public:
  virtual ~Agent() = default;
  virtual void begin_episode() {}
  virtual Action act(const StepObs& obs) = 0;
};

inline StepObs observe(const TransportEnv& env, int render_px = kRenderPx) {
  StepObs o;
  o.fixed_cam = render_fixed(env.state(), env.scene(), render_px);
  o.hand_cam = render_hand(env.state(), env.scene(), render_px);
  o.proprio[0] = env.state().gripper.x;
  o.proprio[1] = env.state().gripper.y;
  o.proprio[2] = env.state().aperture;
  o.t = env.state().steps;
  return o;
}

inline StageResult run_episode(TransportEnv& env, Agent& agent, int max_steps = kMaxEpisodeSteps,
                               int render_px = kRenderPx) {
  agent.begin_episode();
  while (!env.done() && env.state().steps < max_steps) {
    StepObs o = observe(env, render_px);
    env.step(agent.act(o));
  }
  return env.stages();
}

class ExpertAgent : public Agent {
 public:
  explicit ExpertAgent(Rng rng, double jitter = 0.008) : rng_(rng), jitter_(jitter) {}
  void begin_episode() override {
    expert_ = ScriptedExpert(rng_.fork(++episode_), jitter_);
  }
  Action act(const StepObs& obs) override {
    (void)obs;
    return expert_->act(*env_state_);
  }
  // The expert reads privileged state rather than pixels.
  void bind(const EnvState* st) { env_state_ = st; }

 private:
  Rng rng_;
  double jitter_;
  uint64_t episode_ = 0;
  std::optional<ScriptedExpert> expert_;
  const EnvState* env_state_ = nullptr;
};

struct EvalReport {
  Level level = Level::L0;
  int trials = 0;
  double reach_rate = 0, grasp_rate = 0, drop_rate = 0;
  std::vector<StageResult> per_trial;
};

inline EvalReport evaluate(Agent& agent, Level level, int n_trials, uint64_t seed,
                           int max_steps = kMaxEpisodeSteps,
                           const std::function<void(int, const StageResult&)>& on_trial = {}) {
  EvalReport rep;
  rep.level = level;
  rep.trials = n_trials;
  auto trials = make_trials(level, n_trials, seed);
  TransportEnv env;
  for (int i = 0; i < n_trials; ++i) {
    env.reset(trials[i].scene, trials[i].object_pos);
    if (auto* ea = dynamic_cast<ExpertAgent*>(&agent)) ea->bind(&env.state());
    StageResult r = run_episode(env, agent, max_steps);
    rep.per_trial.push_back(r);
    rep.reach_rate += r.reach;
    rep.grasp_rate += r.grasp;
    rep.drop_rate += r.drop;
    if (on_trial) on_trial(i, r);
  }
  if (n_trials > 0) {
    rep.reach_rate /= n_trials;
    rep.grasp_rate /= n_trials;
    rep.drop_rate /= n_trials;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Demonstration episodes: per-step camera frames, proprioception, and the
// expert's absolute action.

struct DemoStep {
  Image8 fixed_cam;
  Image8 hand_cam;
  double proprio[3] = {0, 0, 0};
  double action[3] = {0, 0, 0};
};

struct Episode {
  SceneConfig scene;
  Vec2 object_start;
  std::vector<DemoStep> steps;
};

// Rolls the scripted expert in the canonical scene. Failed rollouts (the
// jittered expert missing within the step cap) are discarded and regenerated;
// the count of discards is reported through the optional counter.
inline std::vector<Episode> generate_demos(int n_episodes, uint64_t seed,
                                           int render_px = kRenderPx, int* discarded = nullptr,
                                           Level level = Level::L0) {
  std::vector<Episode> out;
  out.reserve(n_episodes);
  Rng base(seed);
  int discards = 0;
  uint64_t attempt = 0;
  while (static_cast<int>(out.size()) < n_episodes) {
    Rng r = base.fork(++attempt);
    Episode ep;
    ep.scene = scene_for_level(level, r);
    ep.object_start = TransportEnv::draw_object_pos(r, ep.scene.object_size);
    TransportEnv env;
    env.reset(ep.scene, ep.object_start);
    ScriptedExpert expert(r.fork(9001));
    while (!env.done()) {
      DemoStep step;
      step.fixed_cam = render_fixed(env.state(), env.scene(), render_px);
      step.hand_cam = render_hand(env.state(), env.scene(), render_px);
      step.proprio[0] = env.state().gripper.x;
      step.proprio[1] = env.state().gripper.y;
      step.proprio[2] = env.state().aperture;
      Action a = expert.act(env.state());
      step.action[0] = a.x;
      step.action[1] = a.y;
      step.action[2] = a.g;
      ep.steps.push_back(std::move(step));
      env.step(a);
    }
    if (env.stages().drop) {
      out.push_back(std::move(ep));
    } else {
      ++discards;
    }
  }
  if (discarded) *discarded = discards;
  return out;
}

}  // namespace cdp::sim
