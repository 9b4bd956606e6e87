// Command-line driver: demonstration generation, encoder pretraining, policy
// training, evaluation, and the ablation grid.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "cdp/config.hpp"
#include "cdp/policy.hpp"
#include "cdp/pretrain.hpp"
#include "cdp/store.hpp"
#include "cdp/train.hpp"

using namespace cdp;
namespace fsys = std::filesystem;

namespace {

void apply_overrides(RunConfig& cfg, const std::string& config_file,
                     const std::vector<std::string>& sets) {
  if (!config_file.empty()) cfg.load_file(config_file);
  for (const auto& kv : sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw TensorError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

std::string default_path(const RunConfig& cfg, const std::string& leaf) {
  return (fsys::path(cfg.data_root()) / leaf).string();
}

int run_gen_data(const RunConfig& cfg, std::string out) {
  if (out.empty()) out = default_path(cfg, "demos");
  int discarded = 0;
  auto eps = sim::generate_demos(cfg.geti("data.episodes"),
                                 static_cast<uint64_t>(cfg.geti("data.seed")),
                                 cfg.geti("data.render_px"), &discarded);
  save_dataset(out, eps,
               {{"seed", cfg.geti("data.seed")},
                {"render_px", cfg.geti("data.render_px")},
                {"discarded", discarded}});
  long steps = 0;
  for (auto& ep : eps) steps += static_cast<long>(ep.steps.size());
  std::cout << "wrote " << eps.size() << " episodes (" << steps << " steps, " << discarded
            << " discarded rollouts) to " << out << "\n";
  return 0;
}

int run_pretrain(const RunConfig& cfg, std::string out) {
  if (out.empty()) out = default_path(cfg, "encoder.ckpt");
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

  fsys::create_directories(fsys::path(out).parent_path().empty()
                               ? "."
                               : fsys::path(out).parent_path().string());
  MetricsWriter mw(out + ".metrics.jsonl");
  auto summary = pretrain_encoder(enc, opt, &mw);
  NamedParams<float> state;
  enc.collect("enc", state);
  save_checkpoint(out, state, {{"kind", "encoder"}, {"run", cfg.raw()}});
  std::cout << "pretrained encoder for " << summary.steps << " steps, loss "
            << summary.first_loss << " -> " << summary.last_loss << ", saved " << out << "\n";
  return 0;
}

int run_train(const RunConfig& cfg, std::string data_dir, std::string out) {
  auto mc = cfg.model_config();
  if (data_dir.empty()) data_dir = default_path(cfg, "demos");
  if (out.empty())
    out = default_path(cfg, "policy_" + variant_name(mc.variant) + ".ckpt");

  auto eps = load_dataset(data_dir);
  PolicyModel<float> model(mc, static_cast<uint64_t>(cfg.geti("train.seed")));

  std::string enc_ckpt = cfg.gets("train.encoder_ckpt");
  if (enc_ckpt.empty()) {
    std::string dflt = default_path(cfg, "encoder.ckpt");
    if (fsys::exists(dflt)) enc_ckpt = dflt;
  }
  if (mc.variant.encoder == EncoderMode::FrozenLora && !enc_ckpt.empty()) {
    auto ck = load_checkpoint(enc_ckpt);
    auto dst = model.state();
    int applied = apply_checkpoint_subset(ck, dst);
    std::cout << "warm-started " << applied << " encoder tensors from " << enc_ckpt << "\n";
  } else if (mc.variant.encoder == EncoderMode::FrozenLora) {
    std::cout << "note: no encoder checkpoint found; the frozen encoder keeps its random init\n";
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

  MetricsWriter mw(out + ".metrics.jsonl");
  auto summary = train_policy(model, eps, opt, &mw);
  save_model_checkpoint(out, model, {{"run", cfg.raw()}});
  std::cout << "trained " << variant_name(mc.variant) << " for " << summary.steps
            << " steps, loss " << summary.first_loss << " -> " << summary.last_loss
            << ", saved " << out << "\n";
  return 0;
}

nlohmann::json eval_to_json(const sim::EvalReport& rep) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& r : rep.per_trial)
    per.push_back({{"reach", r.reach}, {"grasp", r.grasp}, {"drop", r.drop}});
  return {{"level", sim::level_name(rep.level)},
          {"trials", rep.trials},
          {"reach_rate", rep.reach_rate},
          {"grasp_rate", rep.grasp_rate},
          {"drop_rate", rep.drop_rate},
          {"per_trial", per}};
}

sim::EvalReport eval_checkpoint(const std::string& ckpt, sim::Level level, int trials,
                                uint64_t seed, int max_steps, bool parallel,
                                const RunConfig& eval_cfg) {
  auto ck = load_checkpoint(ckpt);
  RunConfig cfg;
  if (ck.config.contains("run")) cfg.merge(ck.config.at("run"), ckpt);
  auto mc = cfg.model_config();
  PolicyModel<float> model(mc, 0);  // weights come from the checkpoint
  auto state = model.state();
  apply_checkpoint_state(ck, state);

  RolloutConfig rc;
  rc.replan_every = eval_cfg.geti("eval.replan");
  rc.ensemble_window = eval_cfg.geti("eval.window");
  rc.crop_px = mc.vit.image_size;

  if (parallel) {
    ThreadedPolicyAgent<float> agent(model, rc, Rng(seed));
    return sim::evaluate(agent, level, trials, seed, max_steps);
  }
  PolicyAgent<float> agent(model, rc, Rng(seed));
  return sim::evaluate(agent, level, trials, seed, max_steps);
}

int run_eval(const RunConfig& cfg, const std::string& ckpt, const std::string& level_s,
             std::string out) {
  if (ckpt.empty()) throw TensorError("eval: --ckpt is required");
  sim::Level level = sim::parse_level(level_s);
  auto rep = eval_checkpoint(ckpt, level, cfg.geti("eval.trials"),
                             static_cast<uint64_t>(cfg.geti("eval.seed")),
                             cfg.geti("eval.max_steps"), cfg.getb("eval.parallel"), cfg);
  auto j = eval_to_json(rep);
  j["ckpt"] = ckpt;
  if (!out.empty()) {
    std::ofstream(out) << j.dump(2) << "\n";
    std::cout << "wrote " << out << "\n";
  }
  std::cout << sim::level_name(level) << ": reach " << rep.reach_rate << "  grasp "
            << rep.grasp_rate << "  drop " << rep.drop_rate << "  (" << rep.trials
            << " trials)\n";
  return 0;
}

// Ablation grid: model rows x generalization levels, optionally over several
// training seeds. Rows reuse one demo dataset and one pretrained encoder.
struct AblateRow {
  std::string name;
  std::string variant;
  bool geo_aug = false;
  int obs_horizon = 0;  // 0: keep the configured default
};

int run_ablate(const RunConfig& base, std::string out_dir, const std::string& seeds_csv,
               bool obs_sweep) {
  if (out_dir.empty()) out_dir = default_path(base, "ablate");
  fsys::create_directories(out_dir);

  std::vector<uint64_t> seeds;
  {
    std::stringstream ss(seeds_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) throw TensorError("ablate: need at least one seed");

  std::vector<AblateRow> rows = {
      {"canonical", "canonical", false, 0}, {"mean-pool", "mean-pool", false, 0},
      {"full-seq", "full-seq", false, 0},   {"scratch", "scratch", false, 0},
      {"film-unet", "film-unet", false, 0}, {"canonical+geo", "canonical", true, 0},
  };
  if (obs_sweep)
    for (int h : {2, 4, 8}) rows.push_back({"T_o=" + std::to_string(h), "canonical", false, h});

  std::string data_dir = default_path(base, "demos");
  if (!fsys::exists(data_dir)) run_gen_data(base, data_dir);
  std::string enc_ckpt = default_path(base, "encoder.ckpt");
  if (!fsys::exists(enc_ckpt)) run_pretrain(base, enc_ckpt);

  const sim::Level levels[] = {sim::Level::L0, sim::Level::L1Bg, sim::Level::L1Obj,
                               sim::Level::L1Cam, sim::Level::L2};
  nlohmann::json table = nlohmann::json::array();
  for (const auto& row : rows) {
    for (uint64_t seed : seeds) {
      RunConfig cfg = base;
      cfg.set("model.variant", row.variant);
      cfg.set("train.geo_aug", row.geo_aug ? "true" : "false");
      cfg.set("train.seed", std::to_string(seed));
      cfg.set("train.encoder_ckpt", row.variant == "scratch" ? "" : enc_ckpt);
      if (row.obs_horizon > 0) cfg.set("model.obs_horizon", std::to_string(row.obs_horizon));

      std::string tag = row.name + "_s" + std::to_string(seed);
      for (auto& c : tag)
        if (c == '=' || c == '+') c = '-';
      std::string ckpt = (fsys::path(out_dir) / (tag + ".ckpt")).string();
      if (!fsys::exists(ckpt)) {
        std::cout << "== training " << tag << "\n";
        run_train(cfg, data_dir, ckpt);
      } else {
        std::cout << "== reusing " << ckpt << "\n";
      }

      nlohmann::json rec = {{"row", row.name}, {"seed", seed}, {"levels", nlohmann::json::object()}};
      for (auto level : levels) {
        auto rep = eval_checkpoint(ckpt, level, cfg.geti("eval.trials"),
                                   static_cast<uint64_t>(cfg.geti("eval.seed")),
                                   cfg.geti("eval.max_steps"), false, cfg);
        rec["levels"][sim::level_name(level)] = eval_to_json(rep);
        std::cout << tag << " " << sim::level_name(level) << ": reach " << rep.reach_rate
                  << " grasp " << rep.grasp_rate << " drop " << rep.drop_rate << "\n";
      }
      table.push_back(rec);
      std::ofstream(fsys::path(out_dir) / "summary.json") << table.dump(2) << "\n";
    }
  }
  std::cout << "ablation summary at " << (fsys::path(out_dir) / "summary.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal-attention diffusion policy on the Transport benchmark"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> sets;
  app.add_option("--config", config_file, "JSON config file")->capture_default_str();
  app.add_option("--set", sets, "Override a config key (key=value), repeatable");

  std::string out, data_dir, ckpt, level = "l0", seeds_csv = "1";
  bool obs_sweep = false;

  auto* gen = app.add_subcommand("gen-data", "Generate scripted-expert demonstrations");
  gen->add_option("--out", out, "Dataset directory");

  auto* pre = app.add_subcommand("pretrain-encoder", "Contrastive pretraining of the encoder");
  pre->add_option("--out", out, "Checkpoint path");

  auto* tr = app.add_subcommand("train", "Behavior-clone a policy on a demo dataset");
  tr->add_option("--data", data_dir, "Dataset directory");
  tr->add_option("--out", out, "Checkpoint path");

  auto* ev = app.add_subcommand("eval", "Evaluate a trained policy");
  ev->add_option("--ckpt", ckpt, "Policy checkpoint")->required();
  ev->add_option("--level", level, "l0|l1bg|l1obj|l1cam|l2");
  ev->add_option("--out", out, "Report JSON path");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate the ablation grid");
  ab->add_option("--out", out, "Output directory");
  ab->add_option("--seeds", seeds_csv, "Comma-separated training seeds");
  ab->add_flag("--obs-sweep", obs_sweep, "Also sweep the observation horizon {2,4,8}");

  // --config/--set live on the parent; let them appear after the verb too.
  for (auto* sub : {gen, pre, tr, ev, ab}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg;
    apply_overrides(cfg, config_file, sets);
    if (gen->parsed()) return run_gen_data(cfg, out);
    if (pre->parsed()) return run_pretrain(cfg, out);
    if (tr->parsed()) return run_train(cfg, data_dir, out);
    if (ev->parsed()) return run_eval(cfg, ckpt, level, out);
    if (ab->parsed()) return run_ablate(cfg, out, seeds_csv, obs_sweep);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
