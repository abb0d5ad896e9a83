#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sicp/config.hpp"
#include "sicp/gradcheck.hpp"
#include "sicp/metrics.hpp"
#include "sicp/pipeline.hpp"

namespace sicp::experiment {

enum class Mode { Train, Eval, Ablate, Gradcheck, Simulate };

Mode parse_mode(const std::string& s);
std::string_view to_string(Mode m);

/// Seed streams handed to config::derive_seed.
enum Stream : std::uint64_t {
  kTrainScenes = 1,
  kTestScenes = 2,
  kAblationTestScenes = 3,
  kModelInit = 4,
  kShuffle = 5,
  kChannel = 6,
};

struct Dataset {
  std::vector<sim::SyntheticScene> scenes;
  std::vector<pipeline::TrainingSample> samples;
  /// Candidate seeds that hit the rejection budget and were passed over.
  std::size_t skipped = 0;

  std::vector<std::uint64_t> seeds() const;
};

/// `count` scenes drawn from seeds derive_seed(cfg.seed, stream, 0, 1, ...).
Dataset build_dataset(const config::ExperimentConfig& cfg, const sim::SceneConfig& scene_cfg, Stream stream,
                      std::size_t count);
Dataset training_set(const config::ExperimentConfig& cfg, std::size_t count);
/// Held-out split where every scene hides at least cfg.eval.min_hidden objects from the ego.
Dataset occlusion_test_set(const config::ExperimentConfig& cfg, std::size_t count, Stream stream = kTestScenes);

struct TrainedModel {
  pipeline::Model model;
  pipeline::Adam adam;
  std::vector<pipeline::EpochRecord> history;
};

/// Fresh model from cfg.model, trained with cfg.train (lambda included).
TrainedModel train_model(const config::ExperimentConfig& cfg, const Dataset& data, std::size_t epochs,
                         const std::function<void(const pipeline::EpochRecord&)>& on_epoch = {});

struct EvalSuite {
  std::vector<metrics::EvalResult> results;
  const metrics::EvalResult& get(const std::string& mode) const;
};

struct EvalOptions {
  bool individual = true;
  bool cooperative = true;
  bool late_fusion = true;
  bool maxout = true;
  /// Separately trained maxout model; otherwise the main model runs with its
  /// fusion switched to maxout.
  pipeline::Model* maxout_model = nullptr;
};

/// Per scene: the sender's features travel encode -> lossy channel -> FCFS
/// selection -> decode before fusion; late fusion merges the two vehicles'
/// individual detections.
EvalSuite evaluate_model(const config::ExperimentConfig& cfg, pipeline::Model& model, const Dataset& test,
                         const EvalOptions& opts = {});

struct GradcheckEntry {
  std::string name;
  double tolerance = 0.0;
  ad::GradcheckReport report;

  /// Error under tolerance, with at most 1% of entries excluded as kinks.
  bool passed() const { return report.max_rel_error < tolerance && report.nonsmooth * 100 <= report.entries; }
};

/// Every differentiable op, the warp, DP-Net, both losses, and the whole
/// extractor -> DP-Net -> head -> loss graph on a 1x8x8 raster.
std::vector<GradcheckEntry> gradcheck_suite(std::uint64_t seed);

struct AblationCell {
  std::string sweep;
  std::string value;
  config::ExperimentConfig config;
  metrics::EvalResult result;
};

/// The four DP-Net sweeps: complementary weights {on, off}, reduction
/// {conv1x1, mean, max}, weight-net layers {1, 2, 3}, kernel {1, 3, 5}.
std::vector<std::pair<std::string, std::vector<std::string>>> ablation_axes();
config::ExperimentConfig ablation_cell_config(const config::ExperimentConfig& base, const std::string& sweep,
                                              const std::string& value);

/// Runs every cell on cfg.ablation budgets. Cells sharing a config hash are
/// trained once. `only` restricts to one sweep.
std::vector<AblationCell> run_ablation(const config::ExperimentConfig& cfg, const std::string& only = {},
                                       const std::function<void(const AblationCell&)>& on_cell = {});

struct RunOptions {
  std::filesystem::path out_dir = "sicp_out";
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> maxout_checkpoint;
  std::string sweep;
  std::function<void(const std::string&)> log;
};

/// Writes records.jsonl, summary.txt and config.json under opts.out_dir
/// (plus model.ckpt for train). Returns the produced EvalResults.
std::vector<metrics::EvalResult> run_experiment(const config::ExperimentConfig& cfg, Mode mode,
                                                const RunOptions& opts);

}  // namespace sicp::experiment
