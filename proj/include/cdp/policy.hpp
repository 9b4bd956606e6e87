#pragma once

#include <algorithm>
#include <array>
#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "cdp/image.hpp"
#include "cdp/model.hpp"
#include "cdp/sim.hpp"

namespace cdp {

// Actions are predicted relative to the gripper position at the reference
// (latest) observation step; the aperture channel stays absolute.
template <typename S>
TensorT<S> to_relative(const TensorT<S>& actions, double ref_x, double ref_y) {
  NoGradGuard ng;
  if (actions.rank() != 2 || actions.dim(1) != 3)
    throw TensorError("to_relative: expected [T,3], got " + shape_str(actions.shape()));
  auto out = actions.data();
  for (int t = 0; t < actions.dim(0); ++t) {
    out[t * 3 + 0] -= static_cast<S>(ref_x);
    out[t * 3 + 1] -= static_cast<S>(ref_y);
  }
  return TensorT<S>::from_data(actions.shape(), std::move(out));
}

template <typename S>
TensorT<S> from_relative(const TensorT<S>& actions, double ref_x, double ref_y) {
  return to_relative(actions, -ref_x, -ref_y);
}

// Temporal ensemble: every prediction covers [t0, t0 + horizon); the executed
// action at t is the unweighted mean over all stored predictions whose first
// `window` steps cover t. Purely a function of the stored set, so merge order
// never matters.
class EnsembleBuffer {
 public:
  explicit EnsembleBuffer(int window) : window_(window) {
    if (window < 1) throw TensorError("EnsembleBuffer: window must be positive");
  }

  void add(int t0, std::vector<std::array<double, 3>> traj) {
    if (traj.empty()) throw TensorError("EnsembleBuffer: empty trajectory");
    entries_.push_back({t0, std::move(traj)});
  }

  int size() const { return static_cast<int>(entries_.size()); }

  std::optional<std::array<double, 3>> try_action_at(int t) const {
    std::array<double, 3> acc{0, 0, 0};
    int n = 0;
    for (const auto& e : entries_) {
      int off = t - e.t0;
      if (off < 0 || off >= window_ || off >= static_cast<int>(e.traj.size())) continue;
      for (int c = 0; c < 3; ++c) acc[c] += e.traj[off][c];
      ++n;
    }
    if (n == 0) return std::nullopt;
    for (int c = 0; c < 3; ++c) acc[c] /= n;
    return acc;
  }

  std::array<double, 3> action_at(int t) const {
    auto a = try_action_at(t);
    if (!a)
      throw TensorError("EnsembleBuffer: no prediction covers step " + std::to_string(t));
    return *a;
  }

  // Drops predictions that can no longer contribute at or after step t.
  void prune(int t) {
    std::erase_if(entries_, [&](const Entry& e) { return e.t0 + window_ <= t; });
  }

 private:
  struct Entry {
    int t0;
    std::vector<std::array<double, 3>> traj;
  };
  int window_;
  std::vector<Entry> entries_;
};

namespace detail {

// Rolling observation history with front-fill: until the horizon is full, the
// oldest frame is replicated backwards in time.
struct ObsHistory {
  struct Snap {
    Image8 fixed_cam, hand_cam;
    std::array<double, 3> proprio;
  };
  int t_o = 1;
  std::deque<Snap> snaps;

  void reset(int horizon) {
    t_o = horizon;
    snaps.clear();
  }
  void push(const sim::StepObs& o) {
    snaps.push_back({o.fixed_cam, o.hand_cam, {o.proprio[0], o.proprio[1], o.proprio[2]}});
    while (static_cast<int>(snaps.size()) > t_o) snaps.pop_front();
  }
  const Snap& at(int i) const {  // i = 0 oldest .. t_o-1 newest, front-filled
    int missing = t_o - static_cast<int>(snaps.size());
    return snaps[static_cast<size_t>(std::max(0, i - missing))];
  }
};

// Camera-major frame tensor: both cameras' horizons concatenated, each
// oldest-first, matching the compressor key layout.
template <typename S>
TensorT<S> frames_tensor(const ObsHistory& h, int crop_px) {
  const int per = crop_px * crop_px * 3;
  std::vector<S> buf(static_cast<size_t>(2 * h.t_o) * per);
  for (int cam = 0; cam < 2; ++cam) {
    for (int i = 0; i < h.t_o; ++i) {
      const Image8& raw = cam == 0 ? h.at(i).fixed_cam : h.at(i).hand_cam;
      Image8 im = center_crop(raw, crop_px);
      S* dst = buf.data() + (static_cast<size_t>(cam) * h.t_o + i) * per;
      for (int k = 0; k < per; ++k) dst[k] = static_cast<S>(im.px[k]) / static_cast<S>(255);
    }
  }
  return TensorT<S>::from_data({2 * h.t_o, crop_px, crop_px, 3}, std::move(buf));
}

template <typename S>
TensorT<S> proprio_tensor(const ObsHistory& h) {
  std::vector<S> buf(static_cast<size_t>(h.t_o) * 3);
  for (int i = 0; i < h.t_o; ++i)
    for (int c = 0; c < 3; ++c) buf[i * 3 + c] = static_cast<S>(h.at(i).proprio[c]);
  return TensorT<S>::from_data({h.t_o, 3}, std::move(buf));
}

template <typename S>
std::vector<std::array<double, 3>> traj_rows(const TensorT<S>& t) {
  std::vector<std::array<double, 3>> rows(t.dim(0));
  for (int i = 0; i < t.dim(0); ++i)
    for (int c = 0; c < 3; ++c) rows[i][c] = static_cast<double>(t.data()[i * 3 + c]);
  return rows;
}

}  // namespace detail

struct RolloutConfig {
  int replan_every = 4;
  int ensemble_window = 12;
  int crop_px = 64;
};

// Sequential policy runner: re-infers on a fixed cadence, executes the
// ensemble mean. Inference randomness is forked per step index, so a rollout
// is a deterministic function of (model, environment, seed).
template <typename S>
class PolicyAgent : public sim::Agent {
 public:
  PolicyAgent(PolicyModel<S>& model, const RolloutConfig& rc, Rng rng)
      : model_(&model), rc_(rc), rng_(rng) {}

  void begin_episode() override {
    hist_.reset(model_->config().t_o);
    ensemble_.emplace(rc_.ensemble_window);
    t_ = 0;
    ++episode_;
  }

  sim::Action act(const sim::StepObs& obs) override {
    hist_.push(obs);
    if (t_ % rc_.replan_every == 0) {
      auto frames = detail::frames_tensor<S>(hist_, rc_.crop_px);
      auto prop = detail::proprio_tensor<S>(hist_);
      Rng r = rng_.fork(episode_ * 100003ull + static_cast<uint64_t>(t_));
      auto rel = model_->infer(frames, prop, r);
      auto abs = from_relative(rel, obs.proprio[0], obs.proprio[1]);
      auto rows = detail::traj_rows(abs);
      if (on_plan) on_plan(t_, rows);
      ensemble_->add(t_, std::move(rows));
    }
    auto a = ensemble_->action_at(t_);
    ensemble_->prune(t_);
    ++t_;
    return {a[0], a[1], std::clamp(a[2], 0.0, 1.0)};
  }

  // Invoked with each fresh plan (start step, trajectory rows); lets replay
  // oracles rebuild the ensemble from a complete log.
  std::function<void(int, const std::vector<std::array<double, 3>>&)> on_plan;

 private:
  PolicyModel<S>* model_;
  RolloutConfig rc_;
  Rng rng_;
  detail::ObsHistory hist_;
  std::optional<EnsembleBuffer> ensemble_;
  int t_ = 0;
  uint64_t episode_ = 0;
};

// Parallel runner: inference happens on a worker thread and finished
// trajectories merge into the shared ensemble as they arrive. Execution only
// blocks when no prediction covers the current step (in practice the first
// step of an episode).
template <typename S>
class ThreadedPolicyAgent : public sim::Agent {
 public:
  ThreadedPolicyAgent(PolicyModel<S>& model, const RolloutConfig& rc, Rng rng)
      : model_(&model), rc_(rc), rng_(rng) {
    worker_ = std::thread([this] { worker_loop(); });
  }

  ~ThreadedPolicyAgent() override {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_work_.notify_all();
    worker_.join();
  }

  void begin_episode() override {
    std::unique_lock<std::mutex> lk(mu_);
    cv_done_.wait(lk, [&] { return queue_.empty() && !busy_; });
    hist_.reset(model_->config().t_o);
    ensemble_.emplace(rc_.ensemble_window);
    t_ = 0;
    ++episode_;
  }

  sim::Action act(const sim::StepObs& obs) override {
    hist_.push(obs);
    if (t_ % rc_.replan_every == 0) {
      Request req;
      req.t0 = t_;
      req.frames = detail::frames_tensor<S>(hist_, rc_.crop_px);
      req.proprio = detail::proprio_tensor<S>(hist_);
      req.ref_x = obs.proprio[0];
      req.ref_y = obs.proprio[1];
      req.episode = episode_;
      {
        std::lock_guard<std::mutex> lk(mu_);
        queue_.push_back(std::move(req));
      }
      cv_work_.notify_one();
    }
    std::array<double, 3> a;
    {
      std::unique_lock<std::mutex> lk(mu_);
      for (;;) {
        auto got = ensemble_->try_action_at(t_);
        if (got) {
          a = *got;
          break;
        }
        if (queue_.empty() && !busy_)
          throw TensorError("ThreadedPolicyAgent: no prediction covers step " +
                            std::to_string(t_) + " and none in flight");
        cv_done_.wait(lk);
      }
      ensemble_->prune(t_);
    }
    ++t_;
    return {a[0], a[1], std::clamp(a[2], 0.0, 1.0)};
  }

 private:
  struct Request {
    int t0 = 0;
    TensorT<S> frames, proprio;
    double ref_x = 0, ref_y = 0;
    uint64_t episode = 0;
  };

  void worker_loop() {
    for (;;) {
      Request req;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_work_.wait(lk, [&] { return stop_ || !queue_.empty(); });
        if (stop_) return;
        req = std::move(queue_.front());
        queue_.pop_front();
        busy_ = true;
      }
      Rng r = rng_.fork(req.episode * 100003ull + static_cast<uint64_t>(req.t0));
      auto rel = model_->infer(req.frames, req.proprio, r);
      auto abs = from_relative(rel, req.ref_x, req.ref_y);
      auto rows = detail::traj_rows(abs);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (req.episode == episode_) ensemble_->add(req.t0, std::move(rows));
        busy_ = false;
      }
      cv_done_.notify_all();
    }
  }

  PolicyModel<S>* model_;
  RolloutConfig rc_;
  Rng rng_;
  detail::ObsHistory hist_;
  std::optional<EnsembleBuffer> ensemble_;
  int t_ = 0;
  uint64_t episode_ = 0;

  std::mutex mu_;
  std::condition_variable cv_work_, cv_done_;
  std::deque<Request> queue_;
  bool busy_ = false;
  bool stop_ = false;
  std::thread worker_;
};

}  // namespace cdp
