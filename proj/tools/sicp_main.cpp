#include <CLI11.hpp>
#include <iostream>

#include "sicp/config.hpp"
#include "sicp/error.hpp"
#include "sicp/experiment.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kNumericalFailure = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sicp: cooperative BEV perception with complementary feature fusion"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string preset_name = "desk";
  std::optional<std::uint64_t> seed;
  std::string out_dir = "sicp_out";
  std::string checkpoint_path;
  std::string maxout_checkpoint_path;
  std::string sweep;
  bool quiet = false;

  app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--preset", preset_name, "Base preset")->check(CLI::IsMember({"desk", "paper-scale"}));
  app.add_option("--seed", seed, "Master seed (overrides the config)");
  app.add_option("--out", out_dir, "Output directory");
  app.add_flag("--quiet", quiet, "No progress output");

  std::vector<CLI::App*> subs;
  for (const char* name : {"simulate", "train", "eval", "ablate", "gradcheck"}) {
    subs.push_back(app.add_subcommand(name));
  }
  subs[0]->description("Generate held-out scenes and channel delivery traces");
  subs[1]->description("Joint individual + cooperative training; writes a checkpoint");
  subs[2]->description("AP for individual, cooperative, late-fusion and maxout-fusion rows");
  subs[3]->description("DP-Net ablation sweeps");
  subs[4]->description("Gradient checks for every differentiable module");
  subs[1]->add_option("--checkpoint", checkpoint_path, "Checkpoint output path (default <out>/model.ckpt)");
  subs[2]->add_option("--checkpoint", checkpoint_path, "Checkpoint to evaluate (default <out>/model.ckpt)");
  subs[2]->add_option("--maxout-checkpoint", maxout_checkpoint_path, "Separately trained maxout-fusion model");
  subs[3]->add_option("--sweep", sweep, "Run one sweep only")
      ->check(CLI::IsMember({"complementary", "reduction", "layers", "kernel"}));

  CLI11_PARSE(app, argc, argv);

  try {
    sicp::config::ExperimentConfig cfg =
        config_path.empty() ? sicp::config::preset(preset_name) : sicp::config::load(config_path, preset_name);
    if (seed) cfg.seed = *seed;
    cfg.validate();

    const auto mode = sicp::experiment::parse_mode(app.get_subcommands().front()->get_name());
    sicp::experiment::RunOptions opts;
    opts.out_dir = out_dir;
    if (!checkpoint_path.empty()) opts.checkpoint = checkpoint_path;
    if (!maxout_checkpoint_path.empty()) opts.maxout_checkpoint = maxout_checkpoint_path;
    opts.sweep = sweep;
    if (!quiet) opts.log = [](const std::string& s) { std::cerr << s << "\n"; };

    const auto results = sicp::experiment::run_experiment(cfg, mode, opts);
    for (const auto& r : results) {
      std::cout << r.mode << " AP@0.5 " << r.ap_50 << " AP@0.7 " << r.ap_70 << " hash " << std::hex << r.hash()
                << std::dec << "\n";
    }
    return 0;
  } catch (const sicp::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.kind() == sicp::ErrorKind::Config) return kConfigError;
    if (e.kind() == sicp::ErrorKind::NumericalFailure) return kNumericalFailure;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
