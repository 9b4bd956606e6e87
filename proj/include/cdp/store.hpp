#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdp/model.hpp"
#include "cdp/sim.hpp"

namespace cdp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Checkpoints: magic, little-endian length-prefixed JSON manifest, then raw
// float32 payload in manifest order. Floats round-trip bit-exactly.

constexpr char kCkptMagic[8] = {'C', 'D', 'P', 'C', 'K', 'P', 'T', '1'};

struct CheckpointData {
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline void save_checkpoint(const std::string& path, NamedParams<float>& state,
                            const nlohmann::json& config_snapshot) {
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["config"] = config_snapshot;
  auto& tens = manifest["tensors"] = nlohmann::json::array();
  for (auto& [name, p] : state)
    tens.push_back({{"name", name}, {"shape", p.shape()}});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw TensorError("save_checkpoint: cannot open " + path);
  f.write(kCkptMagic, 8);
  std::string mj = manifest.dump();
  uint64_t len = mj.size();
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(mj.data(), static_cast<std::streamsize>(mj.size()));
  for (auto& [name, p] : state)
    f.write(reinterpret_cast<const char*>(p.data().data()),
            static_cast<std::streamsize>(p.data().size() * sizeof(float)));
  if (!f) throw TensorError("save_checkpoint: write failed for " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorError("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw TensorError("load_checkpoint: " + path + " is not a checkpoint");
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 8);
  std::string mj(len, '\0');
  f.read(mj.data(), static_cast<std::streamsize>(len));
  if (!f) throw TensorError("load_checkpoint: truncated manifest in " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mj);
  } catch (const std::exception& e) {
    throw TensorError("load_checkpoint: bad manifest in " + path + ": " + e.what());
  }

  CheckpointData out;
  out.config = manifest.value("config", nlohmann::json::object());
  for (auto& t : manifest.at("tensors")) {
    std::string name = t.at("name");
    Shape shape = t.at("shape").get<Shape>();
    std::vector<float> vals(shape_numel(shape));
    f.read(reinterpret_cast<char*>(vals.data()),
           static_cast<std::streamsize>(vals.size() * sizeof(float)));
    if (!f)
      throw TensorError("load_checkpoint: truncated payload at tensor '" + name + "' in " + path);
    out.tensors.emplace_back(name, Tensor::from_data(shape, std::move(vals)));
  }
  return out;
}

// Strict application: every destination tensor must be present with a matching
// shape and vice versa.
inline void apply_checkpoint_state(const CheckpointData& ck, NamedParams<float>& dst) {
  std::map<std::string, const Tensor*> by_name;
  for (auto& [name, t] : ck.tensors) by_name[name] = &t;
  for (auto& [name, p] : dst) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw TensorError("checkpoint: missing tensor '" + name + "'");
    if (it->second->shape() != p.shape())
      throw TensorError("checkpoint: tensor '" + name + "' shape " +
                        shape_str(it->second->shape()) + " != model shape " +
                        shape_str(p.shape()));
    p.mutable_data() = it->second->data();
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw TensorError("checkpoint: unexpected tensor '" + by_name.begin()->first + "'");
}

// Partial application for warm starts (e.g. a pretrained encoder): every file
// tensor must land somewhere, but the destination may have extra parameters.
inline int apply_checkpoint_subset(const CheckpointData& ck, NamedParams<float>& dst) {
  std::map<std::string, Tensor*> by_name;
  for (auto& [name, p] : dst) by_name[name] = &p;
  int applied = 0;
  for (auto& [name, t] : ck.tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw TensorError("checkpoint: tensor '" + name + "' has no destination");
    if (it->second->shape() != t.shape())
      throw TensorError("checkpoint: tensor '" + name + "' shape " + shape_str(t.shape()) +
                        " != model shape " + shape_str(it->second->shape()));
    it->second->mutable_data() = t.data();
    ++applied;
  }
  return applied;
}

inline void save_model_checkpoint(const std::string& path, PolicyModel<float>& model,
                                  const nlohmann::json& extra = {}) {
  nlohmann::json snap = extra;
  snap["kind"] = "policy";
  snap["variant"] = variant_name(model.config().variant);
  auto state = model.state();
  save_checkpoint(path, state, snap);
}

inline void load_model_checkpoint(const std::string& path, PolicyModel<float>& model) {
  CheckpointData ck = load_checkpoint(path);
  std::string want = variant_name(model.config().variant);
  std::string have = ck.config.value("variant", "?");
  if (have != want)
    throw TensorError("checkpoint " + path + " holds variant '" + have +
                      "' but the model is '" + want + "'");
  auto state = model.state();
  apply_checkpoint_state(ck, state);
}

// ---------------------------------------------------------------------------
// Demonstration datasets on disk: one directory per episode with lossless
// per-step images, a proprio/action table, and the scene record.

inline nlohmann::json scene_to_json(const sim::SceneConfig& sc) {
  return {{"background_id", sc.background_id}, {"object_shape", sc.object_shape},
          {"object_color", sc.object_color},   {"object_size", sc.object_size},
          {"camera_dx", sc.camera_dx},         {"camera_dy", sc.camera_dy},
          {"camera_warp", sc.camera_warp}};
}

inline sim::SceneConfig scene_from_json(const nlohmann::json& j) {
  sim::SceneConfig sc;
  sc.background_id = j.at("background_id");
  sc.object_shape = j.at("object_shape");
  sc.object_color = j.at("object_color");
  sc.object_size = j.at("object_size");
  sc.camera_dx = j.at("camera_dx");
  sc.camera_dy = j.at("camera_dy");
  sc.camera_warp = j.at("camera_warp");
  return sc;
}

inline std::string episode_dir_name(int i) {
  std::ostringstream ss;
  ss << "ep" << std::setw(4) << std::setfill('0') << i;
  return ss.str();
}

inline void save_dataset(const std::string& dir, const std::vector<sim::Episode>& episodes,
                         const nlohmann::json& meta) {
  fs::create_directories(dir);
  nlohmann::json manifest = meta;
  manifest["episodes"] = episodes.size();
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << "\n";
  for (size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    fs::path epd = fs::path(dir) / episode_dir_name(static_cast<int>(e));
    fs::create_directories(epd);
    nlohmann::json scene = scene_to_json(ep.scene);
    scene["object_start"] = {ep.object_start.x, ep.object_start.y};
    scene["steps"] = ep.steps.size();
    std::ofstream(epd / "scene.json") << scene.dump(2) << "\n";

    std::ofstream csv(epd / "steps.csv");
    csv << "step,grip_x,grip_y,aperture,act_x,act_y,act_g\n" << std::setprecision(17);
    for (size_t s = 0; s < ep.steps.size(); ++s) {
      const auto& st = ep.steps[s];
      csv << s << "," << st.proprio[0] << "," << st.proprio[1] << "," << st.proprio[2] << ","
          << st.action[0] << "," << st.action[1] << "," << st.action[2] << "\n";
      std::ostringstream fn;
      fn << std::setw(4) << std::setfill('0') << s;
      save_ppm((epd / ("f" + fn.str() + ".ppm")).string(), st.fixed_cam);
      save_ppm((epd / ("h" + fn.str() + ".ppm")).string(), st.hand_cam);
    }
  }
}

inline std::vector<sim::Episode> load_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw TensorError("load_dataset: missing manifest in " + dir);
  nlohmann::json manifest;
  mf >> manifest;
  int n = manifest.at("episodes");

  std::vector<sim::Episode> out;
  out.reserve(n);
  for (int e = 0; e < n; ++e) {
    fs::path epd = fs::path(dir) / episode_dir_name(e);
    std::ifstream sf(epd / "scene.json");
    if (!sf) throw TensorError("load_dataset: missing scene.json for episode " +
                               std::to_string(e));
    nlohmann::json scene;
    sf >> scene;
    sim::Episode ep;
    ep.scene = scene_from_json(scene);
    ep.object_start = {scene.at("object_start")[0], scene.at("object_start")[1]};
    int steps = scene.at("steps");

    std::ifstream csv(epd / "steps.csv");
    if (!csv) throw TensorError("load_dataset: missing steps.csv for episode " +
                                std::to_string(e));
    std::string line;
    std::getline(csv, line);  // header
    for (int s = 0; s < steps; ++s) {
      if (!std::getline(csv, line))
        throw TensorError("load_dataset: episode " + std::to_string(e) +
                          " truncated at step " + std::to_string(s));
      sim::DemoStep st;
      std::stringstream ls(line);
      std::string cell;
      double vals[7];
      for (int c = 0; c < 7; ++c) {
        if (!std::getline(ls, cell, ','))
          throw TensorError("load_dataset: episode " + std::to_string(e) + " bad row at step " +
                            std::to_string(s));
        vals[c] = std::stod(cell);
      }
      for (int c = 0; c < 3; ++c) st.proprio[c] = vals[1 + c];
      for (int c = 0; c < 3; ++c) st.action[c] = vals[4 + c];
      std::ostringstream fn;
      fn << std::setw(4) << std::setfill('0') << s;
      st.fixed_cam = load_ppm((epd / ("f" + fn.str() + ".ppm")).string());
      st.hand_cam = load_ppm((epd / ("h" + fn.str() + ".ppm")).string());
      ep.steps.push_back(std::move(st));
    }
    out.push_back(std::move(ep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics: JSON lines. Wall-clock fields carry a wall_ prefix so reproducible
// quantities can be compared across runs by stripping them.

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : f_(path) {
    if (!f_) throw TensorError("metrics: cannot open " + path);
  }
  void write(const nlohmann::json& rec) {
    f_ << rec.dump() << "\n";
    f_.flush();
  }

 private:
  std::ofstream f_;
};

inline std::vector<nlohmann::json> load_metrics(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw TensorError("metrics: cannot open " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

inline nlohmann::json strip_wall_keys(nlohmann::json rec) {
  for (auto it = rec.begin(); it != rec.end();) {
    if (it.key().rfind("wall_", 0) == 0)
      it = rec.erase(it);
    else
      ++it;
  }
  return rec;
}

inline bool metrics_equal_modulo_wall(const std::string& a, const std::string& b) {
  auto ra = load_metrics(a), rb = load_metrics(b);
  if (ra.size() != rb.size()) return false;
  for (size_t i = 0; i < ra.size(); ++i)
    if (strip_wall_keys(ra[i]) != strip_wall_keys(rb[i])) return false;
  return true;
}

}  // namespace cdp
