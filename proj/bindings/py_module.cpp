// Python bindings: dataset generation, encoder pretraining, policy training,
// evaluation, and direct policy inference on numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cdp/config.hpp"
#include "cdp/policy.hpp"
#include "cdp/pretrain.hpp"
#include "cdp/store.hpp"
#include "cdp/train.hpp"

namespace py = pybind11;
using namespace cdp;

namespace {

RunConfig config_from_dict(const py::dict& overrides) {
  RunConfig cfg;
  for (auto item : overrides) {
    std::string key = py::str(item.first);
    cfg.set(key, py::str(item.second));
  }
  return cfg;
}

Tensor tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<int>(a.shape(i));
  std::vector<float> data(a.data(), a.data() + a.size());
  return Tensor::from_data(shape, std::move(data));
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict report_to_dict(const sim::EvalReport& rep) {
  py::list per;
  for (const auto& r : rep.per_trial) {
    py::dict d;
    d["reach"] = r.reach;
    d["grasp"] = r.grasp;
    d["drop"] = r.drop;
    d["steps"] = r.steps;
    per.append(d);
  }
  py::dict out;
  out["level"] = sim::level_name(rep.level);
  out["trials"] = rep.trials;
  out["reach_rate"] = rep.reach_rate;
  out["grasp_rate"] = rep.grasp_rate;
  out["drop_rate"] = rep.drop_rate;
  out["per_trial"] = per;
  return out;
}

// Owns a model restored from a checkpoint and exposes rollout-grade inference.
class PyPolicy {
 public:
  explicit PyPolicy(const std::string& ckpt_path) {
    auto ck = load_checkpoint(ckpt_path);
    RunConfig cfg;
    if (ck.config.contains("run")) cfg.merge(ck.config.at("run"), ckpt_path);
    cfg_ = cfg;
    model_.emplace(cfg.model_config(), 0);
    auto state = model_->state();
    apply_checkpoint_state(ck, state);
  }

  py::dict config() const {
    py::dict d;
    for (auto& [k, v] : cfg_.raw().items()) d[py::str(k)] = py::str(v.dump());
    return d;
  }

  // frames: [N_c*T_o, H, W, 3] float in [0,1]; proprio: [T_o, 3] raw.
  py::array_t<float> infer(
      py::array_t<float, py::array::c_style | py::array::forcecast> frames,
      py::array_t<float, py::array::c_style | py::array::forcecast> proprio, uint64_t seed) {
    Rng rng(seed);
    auto out = model_->infer(tensor_from_array(frames), tensor_from_array(proprio), rng);
    return array_from_tensor(out);
  }

  py::dict evaluate(const std::string& level, int trials, uint64_t seed, int max_steps,
                    int replan_every, int ensemble_window) {
    RolloutConfig rc;
    rc.replan_every = replan_every;
    rc.ensemble_window = ensemble_window;
    rc.crop_px = model_->config().vit.image_size;
    PolicyAgent<float> agent(*model_, rc, Rng(seed));
    auto rep = sim::evaluate(agent, sim::parse_level(level), trials, seed, max_steps);
    return report_to_dict(rep);
  }

 private:
  RunConfig cfg_;
  std::optional<PolicyModel<float>> model_;
};

}  // namespace

PYBIND11_MODULE(_cdp, m) {
  m.doc() = "Causal-attention diffusion policy: training and evaluation core";

  m.def(
      "generate_demos",
      [](const std::string& out_dir, int episodes, uint64_t seed, int render_px) {
        int discarded = 0;
        auto eps = sim::generate_demos(episodes, seed, render_px, &discarded);
        save_dataset(out_dir, eps,
                     {{"seed", seed}, {"render_px", render_px}, {"discarded", discarded}});
        long steps = 0;
        for (auto& ep : eps) steps += static_cast<long>(ep.steps.size());
        py::dict d;
        d["episodes"] = eps.size();
        d["steps"] = steps;
        d["discarded"] = discarded;
        return d;
      },
      py::arg("out_dir"), py::arg("episodes") = 50, py::arg("seed") = 2024,
      py::arg("render_px") = sim::kRenderPx,
      "Roll the scripted expert and save a demonstration dataset.");

  m.def(
      "pretrain_encoder",
      [](const std::string& out_ckpt, const py::dict& overrides) {
        RunConfig cfg = config_from_dict(overrides);
        auto mc = cfg.model_config();
        Rng rng(static_cast<uint64_t>(cfg.geti("pretrain.seed")));
        ViTEncoder<float> enc(mc.vit, rng);
        PretrainOptions opt;
        opt.steps = cfg.geti("pretrain.steps");
        opt.batch_pairs = cfg.geti("pretrain.batch_pairs");
        opt.lr = cfg.getd("pretrain.lr");
        opt.tau = cfg.getd("pretrain.tau");
        opt.seed = static_cast<uint64_t>(cfg.geti("pretrain.seed"));
        opt.render_px = cfg.geti("data.render_px");
        auto summary = pretrain_encoder(enc, opt);
        NamedParams<float> state;
        enc.collect("enc", state);
        save_checkpoint(out_ckpt, state, {{"kind", "encoder"}, {"run", cfg.raw()}});
        py::dict d;
        d["steps"] = summary.steps;
        d["first_loss"] = summary.first_loss;
        d["last_loss"] = summary.last_loss;
        return d;
      },
      py::arg("out_ckpt"), py::arg("overrides") = py::dict(),
      "Contrastive encoder pretraining; saves an encoder checkpoint.");

  m.def(
      "train_policy",
      [](const std::string& data_dir, const std::string& out_ckpt, const py::dict& overrides) {
        RunConfig cfg = config_from_dict(overrides);
        auto mc = cfg.model_config();
        auto eps = load_dataset(data_dir);
        PolicyModel<float> model(mc, static_cast<uint64_t>(cfg.geti("train.seed")));
        std::string enc_ckpt = cfg.gets("train.encoder_ckpt");
        if (mc.variant.encoder == EncoderMode::FrozenLora && !enc_ckpt.empty()) {
          auto ck = load_checkpoint(enc_ckpt);
          auto dst = model.state();
          apply_checkpoint_subset(ck, dst);
        }
        TrainOptions opt;
        opt.epochs = cfg.geti("train.epochs");
        opt.batch = cfg.geti("train.batch");
        opt.lr = cfg.getd("train.lr");
        opt.jitter = cfg.getd("train.jitter");
        opt.geo_aug = cfg.getb("train.geo_aug");
        opt.seed = static_cast<uint64_t>(cfg.geti("train.seed"));
        opt.metrics_every = cfg.geti("train.metrics_every");
        opt.crop_px = mc.vit.image_size;
        auto summary = train_policy(model, eps, opt);
        save_model_checkpoint(out_ckpt, model, {{"run", cfg.raw()}});
        py::dict d;
        d["steps"] = summary.steps;
        d["first_loss"] = summary.first_loss;
        d["last_loss"] = summary.last_loss;
        return d;
      },
      py::arg("data_dir"), py::arg("out_ckpt"), py::arg("overrides") = py::dict(),
      "Behavior-clone a policy on a saved dataset; saves a policy checkpoint.");

  m.def(
      "expert_rollouts",
      [](const std::string& level, int trials, uint64_t seed) {
        sim::ExpertAgent agent{Rng(seed)};
        auto rep = sim::evaluate(agent, sim::parse_level(level), trials, seed);
        return report_to_dict(rep);
      },
      py::arg("level") = "l0", py::arg("trials") = 10, py::arg("seed") = 1,
      "Scripted-expert success rates (simulator sanity check).");

  m.def("default_config", [] {
    const nlohmann::json defaults = RunConfig::defaults();
    py::dict d;
    for (auto& [k, v] : defaults.items()) d[py::str(k)] = py::str(v.dump());
    return d;
  });

  py::class_<PyPolicy>(m, "Policy")
      .def(py::init<const std::string&>(), py::arg("ckpt_path"))
      .def("config", &PyPolicy::config)
      .def("infer", &PyPolicy::infer, py::arg("frames"), py::arg("proprio"), py::arg("seed") = 0,
           "Frames [N_c*T_o,H,W,3] in [0,1] + proprio [T_o,3] -> relative actions [T_a,3].")
      .def("evaluate", &PyPolicy::evaluate, py::arg("level") = "l0", py::arg("trials") = 15,
           py::arg("seed") = 5005, py::arg("max_steps") = sim::kMaxEpisodeSteps,
           py::arg("replan_every") = 4, py::arg("ensemble_window") = 12);
}
