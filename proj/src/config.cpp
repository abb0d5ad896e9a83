#include "sicp/config.hpp"

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "sicp/error.hpp"
#include "sicp/hash.hpp"

namespace sicp::config {

using nlohmann::json;

namespace {

std::string dtype_name(comms::DType d) { return d == comms::DType::F32 ? "f32" : "f64"; }

comms::DType parse_dtype(const std::string& s) {
  if (s == "f32") return comms::DType::F32;
  if (s == "f64") return comms::DType::F64;
  throw Error(ErrorKind::Config, "unknown dtype '" + s + "' (f32|f64)");
}

json pose_json(const geom::Pose2D& p) { return json::array({p.x, p.y, p.yaw}); }

// Reads the keys of one object, remembering which ones were consumed so the
// leftovers can be reported.
class Block {
 public:
  Block(const json& j, std::string path, std::vector<std::string>& unknown)
      : j_(j), path_(std::move(path)), unknown_(unknown) {
    if (!j_.is_object()) throw Error(ErrorKind::Config, where() + " must be an object");
  }
  ~Block() {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) unknown_.push_back(path_.empty() ? k : path_ + "." + k);
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Config, where(key) + ": " + e.what());
    }
  }
  void pose(const char* key, geom::Pose2D& out) {
    std::vector<double> v;
    get(key, v);
    if (!j_.contains(key)) return;
    if (v.size() != 3) throw Error(ErrorKind::Config, where(key) + " must be [x, y, yaw]");
    out = geom::Pose2D(v[0], v[1], v[2]);
  }
  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  Block child(const char* key) { return Block(j_.at(key), where(key), unknown_); }

 private:
  std::string where(const char* key = nullptr) const {
    std::string p = path_;
    if (key) p = p.empty() ? key : p + "." + key;
    return p.empty() ? "config" : p;
  }

  const json& j_;
  std::string path_;
  std::vector<std::string>& unknown_;
  std::set<std::string> seen_;
};

json to_json_obj(const ExperimentConfig& c) {
  json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  const auto& g = c.model.grid;
  j["grid"] = {{"rows", g.rows}, {"cols", g.cols}, {"resolution", g.resolution}, {"origin", pose_json(g.origin)}};
  const auto& s = c.scene;
  j["scene"] = {{"min_objects", s.min_objects},
                {"max_objects", s.max_objects},
                {"width_min", s.width_min},
                {"width_max", s.width_max},
                {"length_min", s.length_min},
                {"length_max", s.length_max},
                {"half_x", s.half_x},
                {"half_y", s.half_y},
                {"yaw_jitter", s.yaw_jitter},
                {"min_gap", s.min_gap},
                {"sender_min_distance", s.sender_min_distance},
                {"sender_max_distance", s.sender_max_distance},
                {"vehicle_clearance", s.vehicle_clearance},
                {"min_hidden", s.min_hidden},
                {"max_attempts", s.max_attempts}};
  j["sample"] = {{"n_rays", c.sample.n_rays}, {"max_range", c.sample.max_range}, {"min_points", c.sample.min_points}};
  const auto& m = c.model;
  j["model"] = {
      {"extractor",
       {{"in_channels", m.extractor.in_channels},
        {"widths", m.extractor.widths},
        {"downsample", m.extractor.downsample},
        {"stride_block", m.extractor.stride_block},
        {"kernel", m.extractor.kernel}}},
      {"dpnet",
       {{"reduction", std::string(dpnet::to_string(m.dpnet.reduction))},
        {"layers", m.dpnet.layers},
        {"kernel", m.dpnet.kernel},
        {"complementary", m.dpnet.complementary},
        {"fusion", std::string(dpnet::to_string(m.dpnet.fusion))}}},
      {"head", {{"kernel", m.head_kernel}}},
      {"anchor", {{"width", m.anchor.width}, {"length", m.anchor.length}}}};
  const auto& t = c.train;
  j["train"] = {{"scenes", t.scenes},
                {"epochs", t.epochs},
                {"learning_rate", t.learning_rate},
                {"lambda", t.lambda},
                {"loss", {{"alpha", t.loss.alpha}, {"gamma", t.loss.gamma}, {"reg_weight", t.loss.reg_weight}}}};
  j["eval"] = {{"scenes", c.eval.scenes},
               {"min_hidden", c.eval.min_hidden},
               {"score_threshold", c.eval.inference.score_threshold},
               {"nms_iou", c.eval.inference.nms_iou}};
  const auto& cm = c.comms;
  j["comms"] = {{"drop_prob", cm.channel.drop_prob},
                {"base_latency_ms", cm.channel.base_latency_ms},
                {"jitter_ms", cm.channel.jitter_ms},
                {"deadline_ms", cm.deadline.budget_ms},
                {"comm_range_m", cm.comm_range_m},
                {"frame_interval_ms", cm.frame_interval_ms},
                {"dtype", dtype_name(cm.dtype)}};
  j["ablation"] = {{"train_scenes", c.ablation.train_scenes},
                   {"test_scenes", c.ablation.test_scenes},
                   {"epochs", c.ablation.epochs}};
  return j;
}

void apply(const json& j, ExperimentConfig& c, std::vector<std::string>& unknown) {
  Block root(j, "", unknown);
  root.get("preset", c.preset);
  root.get("seed", c.seed);
  if (root.has("grid")) {
    Block b = root.child("grid");
    b.get("rows", c.model.grid.rows);
    b.get("cols", c.model.grid.cols);
    b.get("resolution", c.model.grid.resolution);
    b.pose("origin", c.model.grid.origin);
  }
  if (root.has("scene")) {
    Block b = root.child("scene");
    auto& s = c.scene;
    b.get("min_objects", s.min_objects);
    b.get("max_objects", s.max_objects);
    b.get("width_min", s.width_min);
    b.get("width_max", s.width_max);
    b.get("length_min", s.length_min);
    b.get("length_max", s.length_max);
    b.get("half_x", s.half_x);
    b.get("half_y", s.half_y);
    b.get("yaw_jitter", s.yaw_jitter);
    b.get("min_gap", s.min_gap);
    b.get("sender_min_distance", s.sender_min_distance);
    b.get("sender_max_distance", s.sender_max_distance);
    b.get("vehicle_clearance", s.vehicle_clearance);
    b.get("min_hidden", s.min_hidden);
    b.get("max_attempts", s.max_attempts);
  }
  if (root.has("sample")) {
    Block b = root.child("sample");
    b.get("n_rays", c.sample.n_rays);
    b.get("max_range", c.sample.max_range);
    b.get("min_points", c.sample.min_points);
  }
  if (root.has("model")) {
    Block m = root.child("model");
    if (m.has("extractor")) {
      Block b = m.child("extractor");
      b.get("in_channels", c.model.extractor.in_channels);
      b.get("widths", c.model.extractor.widths);
      b.get("downsample", c.model.extractor.downsample);
      b.get("stride_block", c.model.extractor.stride_block);
      b.get("kernel", c.model.extractor.kernel);
    }
    if (m.has("dpnet")) {
      Block b = m.child("dpnet");
      std::string reduction(dpnet::to_string(c.model.dpnet.reduction));
      std::string fusion(dpnet::to_string(c.model.dpnet.fusion));
      b.get("reduction", reduction);
      b.get("layers", c.model.dpnet.layers);
      b.get("kernel", c.model.dpnet.kernel);
      b.get("complementary", c.model.dpnet.complementary);
      b.get("fusion", fusion);
      c.model.dpnet.reduction = dpnet::parse_reduction(reduction);
      c.model.dpnet.fusion = dpnet::parse_fusion(fusion);
    }
    if (m.has("head")) m.child("head").get("kernel", c.model.head_kernel);
    if (m.has("anchor")) {
      Block b = m.child("anchor");
      b.get("width", c.model.anchor.width);
      b.get("length", c.model.anchor.length);
    }
  }
  if (root.has("train")) {
    Block b = root.child("train");
    b.get("scenes", c.train.scenes);
    b.get("epochs", c.train.epochs);
    b.get("learning_rate", c.train.learning_rate);
    b.get("lambda", c.train.lambda);
    if (b.has("loss")) {
      Block l = b.child("loss");
      l.get("alpha", c.train.loss.alpha);
      l.get("gamma", c.train.loss.gamma);
      l.get("reg_weight", c.train.loss.reg_weight);
    }
  }
  if (root.has("eval")) {
    Block b = root.child("eval");
    b.get("scenes", c.eval.scenes);
    b.get("min_hidden", c.eval.min_hidden);
    b.get("score_threshold", c.eval.inference.score_threshold);
    b.get("nms_iou", c.eval.inference.nms_iou);
  }
  if (root.has("comms")) {
    Block b = root.child("comms");
    std::string dtype = dtype_name(c.comms.dtype);
    b.get("drop_prob", c.comms.channel.drop_prob);
    b.get("base_latency_ms", c.comms.channel.base_latency_ms);
    b.get("jitter_ms", c.comms.channel.jitter_ms);
    b.get("deadline_ms", c.comms.deadline.budget_ms);
    b.get("comm_range_m", c.comms.comm_range_m);
    b.get("frame_interval_ms", c.comms.frame_interval_ms);
    b.get("dtype", dtype);
    c.comms.dtype = parse_dtype(dtype);
  }
  if (root.has("ablation")) {
    Block b = root.child("ablation");
    b.get("train_scenes", c.ablation.train_scenes);
    b.get("test_scenes", c.ablation.test_scenes);
    b.get("epochs", c.ablation.epochs);
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (scene.min_objects > scene.max_objects) {
    throw Error(ErrorKind::Config, "scene object count range is empty");
  }
  if (sample.n_rays == 0) throw Error(ErrorKind::Config, "sample.n_rays must be positive");
  if (!(train.lambda >= 0.0 && train.lambda <= 1.0)) throw Error(ErrorKind::Config, "train.lambda must lie in [0,1]");
  if (!(train.learning_rate > 0.0)) throw Error(ErrorKind::Config, "train.learning_rate must be positive");
  if (!(comms.deadline.budget_ms > 0.0)) throw Error(ErrorKind::Config, "comms.deadline_ms must be positive");
  if (!(comms.channel.drop_prob >= 0.0 && comms.channel.drop_prob <= 1.0)) {
    throw Error(ErrorKind::Config, "comms.drop_prob must lie in [0,1]");
  }
  if (!(comms.comm_range_m > 0.0)) throw Error(ErrorKind::Config, "comms.comm_range_m must be positive");
  if (!(eval.inference.score_threshold >= 0.0 && eval.inference.score_threshold <= 1.0)) {
    throw Error(ErrorKind::Config, "eval.score_threshold must lie in [0,1]");
  }
}

std::string ExperimentConfig::to_json() const { return to_json_obj(*this).dump(2); }

std::uint64_t ExperimentConfig::hash() const { return fnv1a64(to_json_obj(*this).dump()); }

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  if (name == "desk") {
    c.model.dpnet.channels = c.model.extractor.out_channels();
    return c;
  }
  if (name == "paper-scale") {
    c.preset = name;
    c.model.grid = geom::GridSpec{704, 200, 0.4, {}};
    c.model.extractor.widths = {64, 128, 128, 256};
    c.model.extractor.downsample = 2;
    c.model.dpnet.channels = 256;
    c.scene.min_objects = 20;
    c.scene.max_objects = 40;
    c.scene.half_x = 140.0;
    c.scene.half_y = 40.0;
    c.scene.sender_max_distance = 70.0;
    c.sample.n_rays = 1440;
    c.scene.n_rays = 1440;
    return c;
  }
  throw Error(ErrorKind::Config, "unknown preset '" + name + "' (desk|paper-scale)");
}

ExperimentConfig from_json(const std::string& text, const ExperimentConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = base;
  if (j.is_object() && j.contains("preset") && j["preset"].is_string() && j["preset"].get<std::string>() != base.preset) {
    c = preset(j["preset"].get<std::string>());
  }
  std::vector<std::string> unknown;
  apply(j, c, unknown);
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw Error(ErrorKind::Config, msg);
  }
  c.model.dpnet.channels = c.model.extractor.out_channels();
  c.scene.n_rays = c.sample.n_rays;
  c.scene.max_range = c.sample.max_range;
  c.validate();
  return c;
}

ExperimentConfig load(const std::filesystem::path& path, const std::string& fallback_preset) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Config, "cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  return from_json(text, preset(fallback_preset));
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(master) ^ stream) ^ index);
}

}  // namespace sicp::config
