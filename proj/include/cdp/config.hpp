#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cdp/model.hpp"

namespace cdp {

using json = nlohmann::json;

// Flat, namespaced run configuration. Every known key has a typed default;
// files and command-line overrides may only touch known keys, so typos fail
// loudly instead of silently running with defaults.
class RunConfig {
 public:
  RunConfig() : v_(defaults()) {}

  static json defaults() {
    return json{
        {"data.root", ""},  // empty: $CDP_DATA_ROOT or ./data
        {"data.episodes", 50},
        {"data.seed", 2024},
        {"data.render_px", 72},

        {"model.variant", "canonical"},
        {"model.obs_horizon", 4},
        {"model.action_horizon", 20},
        {"model.image_size", 64},
        {"model.patch", 8},
        {"model.vit_depth", 4},
        {"model.vit_dim", 128},
        {"model.vit_heads", 4},
        {"model.token_dim", 128},
        {"model.lora_rank", 16},
        {"model.lora_alpha", 16.0},
        {"model.lora_dropout", 0.1},
        {"model.perceiver_blocks", 4},
        {"model.perceiver_heads", 4},
        {"model.perceiver_dropout", 0.1},
        {"model.unet_channels", "64,128,256"},
        {"model.unet_kernel", 5},
        {"model.unet_heads", 4},
        {"model.temb_dim", 128},
        {"model.k_train", 100},
        {"model.k_infer", 16},
        {"model.sample_clip", 3.0},

        {"pretrain.steps", 500},
        {"pretrain.batch_pairs", 8},
        {"pretrain.lr", 1e-3},
        {"pretrain.seed", 7},
        {"pretrain.tau", 0.1},

        {"train.epochs", 12},
        {"train.batch", 8},
        {"train.lr", 3e-4},
        {"train.seed", 1},
        {"train.jitter", 0.1},
        {"train.geo_aug", false},
        {"train.metrics_every", 25},
        {"train.encoder_ckpt", ""},

        {"eval.trials", 15},
        {"eval.seed", 5005},
        {"eval.max_steps", 200},
        {"eval.replan", 4},
        {"eval.window", 12},
        {"eval.parallel", false},
    };
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw TensorError("config: cannot open " + path);
    json j;
    try {
      f >> j;
    } catch (const std::exception& e) {
      throw TensorError("config: parse error in " + path + ": " + e.what());
    }
    for (auto& [key, val] : j.items()) assign(key, val, path);
  }

  // Merge an in-memory snapshot (e.g. the copy stored in a checkpoint).
  void merge(const json& j, const std::string& src = "snapshot") {
    for (auto& [key, val] : j.items()) assign(key, val, src);
  }

  // CLI override with a string value, coerced to the default's type.
  void set(const std::string& key, const std::string& value) {
    if (!v_.contains(key)) throw TensorError("config: unknown key '" + key + "'");
    json& cur = v_[key];
    try {
      if (cur.is_string())
        cur = value;
      else if (cur.is_boolean())
        cur = (value == "true" || value == "1" || value == "on");
      else if (cur.is_number_integer())
        cur = std::stoll(value);
      else
        cur = std::stod(value);
    } catch (const std::exception&) {
      throw TensorError("config: cannot parse '" + value + "' for key '" + key + "'");
    }
  }

  int geti(const std::string& key) const { return fetch(key).get<int>(); }
  double getd(const std::string& key) const { return fetch(key).get<double>(); }
  bool getb(const std::string& key) const { return fetch(key).get<bool>(); }
  std::string gets(const std::string& key) const { return fetch(key).get<std::string>(); }

  const json& raw() const { return v_; }

  std::string data_root() const {
    std::string r = gets("data.root");
    if (!r.empty()) return r;
    if (const char* env = std::getenv("CDP_DATA_ROOT")) return env;
    return "data";
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.variant = parse_variant(gets("model.variant"));
    m.t_o = geti("model.obs_horizon");
    m.t_a = geti("model.action_horizon");
    m.vit.image_size = geti("model.image_size");
    m.vit.patch = geti("model.patch");
    m.vit.depth = geti("model.vit_depth");
    m.vit.dim = geti("model.vit_dim");
    m.vit.heads = geti("model.vit_heads");
    m.vit.token_dim = geti("model.token_dim");
    m.lora.rank = geti("model.lora_rank");
    m.lora.alpha = static_cast<float>(getd("model.lora_alpha"));
    m.lora.dropout = static_cast<float>(getd("model.lora_dropout"));
    m.perceiver.blocks = geti("model.perceiver_blocks");
    m.perceiver.heads = geti("model.perceiver_heads");
    m.perceiver.dropout = static_cast<float>(getd("model.perceiver_dropout"));
    m.unet.channels.clear();
    std::stringstream ss(gets("model.unet_channels"));
    std::string tok;
    while (std::getline(ss, tok, ',')) m.unet.channels.push_back(std::stoi(tok));
    m.unet.kernel = geti("model.unet_kernel");
    m.unet.heads = geti("model.unet_heads");
    m.unet.temb_dim = geti("model.temb_dim");
    m.k_train = geti("model.k_train");
    m.k_infer = geti("model.k_infer");
    m.unet.sample_clip = static_cast<float>(getd("model.sample_clip"));
    return m.resolved();
  }

 private:
  const json& fetch(const std::string& key) const {
    auto it = v_.find(key);
    if (it == v_.end()) throw TensorError("config: unknown key '" + key + "'");
    return *it;
  }

  void assign(const std::string& key, const json& val, const std::string& src) {
    if (!v_.contains(key))
      throw TensorError("config: unknown key '" + key + "' in " + src);
    json& cur = v_[key];
    bool ok = (cur.is_string() && val.is_string()) || (cur.is_boolean() && val.is_boolean()) ||
              (cur.is_number() && val.is_number());
    if (!ok)
      throw TensorError("config: wrong type for key '" + key + "' in " + src);
    if (cur.is_number_integer() && val.is_number_float())
      throw TensorError("config: key '" + key + "' expects an integer in " + src);
    cur = val;
  }

  json v_;
};

}  // namespace cdp
