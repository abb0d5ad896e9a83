#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "sicp/comms.hpp"
#include "sicp/pipeline.hpp"
#include "sicp/scene.hpp"

namespace sicp::config {

struct TrainSetup {
  std::size_t scenes = 400;
  std::size_t epochs = 8;
  double learning_rate = 1e-3;
  double lambda = 0.5;
  pipeline::LossConfig loss{};
};

struct EvalSetup {
  std::size_t scenes = 100;
  /// Held-out scenes must hide at least this many objects from the ego that the sender sees.
  std::size_t min_hidden = 2;
  pipeline::InferenceConfig inference{};
};

struct CommsSetup {
  comms::ChannelModel channel{};
  comms::Deadline deadline{};
  double comm_range_m = 70.0;
  double frame_interval_ms = 100.0;
  comms::DType dtype = comms::DType::F64;
};

struct AblationSetup {
  std::size_t train_scenes = 100;
  std::size_t test_scenes = 50;
  std::size_t epochs = 6;
};

struct ExperimentConfig {
  std::string preset = "desk";
  std::uint64_t seed = 7;
  sim::SceneConfig scene{};
  pipeline::SampleOptions sample{};
  pipeline::ModelConfig model{};
  TrainSetup train{};
  EvalSetup eval{};
  CommsSetup comms{};
  AblationSetup ablation{};

  void validate() const;
  std::string to_json() const;
  /// FNV-1a of the canonical JSON form.
  std::uint64_t hash() const;
};

/// "desk" or "paper-scale"; anything else is a Config error.
ExperimentConfig preset(const std::string& name);

/// Overlays a JSON document onto `base`. Unknown keys raise a Config error that
/// lists every offending path.
ExperimentConfig from_json(const std::string& text, const ExperimentConfig& base);
/// Reads the file; a top-level "preset" key selects the base, else `fallback_preset`.
ExperimentConfig load(const std::filesystem::path& path, const std::string& fallback_preset = "desk");

/// SplitMix64 mix of (master, stream, index); independent seeds per purpose.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index);

}  // namespace sicp::config
