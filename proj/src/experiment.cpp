#include "sicp/experiment.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <random>
#include <sstream>

#include "sicp/checkpoint.hpp"
#include "sicp/error.hpp"
#include "sicp/gradcheck.hpp"

namespace sicp::experiment {

using nlohmann::json;

namespace {

std::uint64_t to_us(double ms) { return static_cast<std::uint64_t>(std::llround(ms * 1000.0)); }

ad::Tensor uniform(const ad::Shape& shape, std::mt19937_64& rng, double lo, double hi, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = u(rng);
  return ad::Tensor::from(shape, std::move(v), grad);
}

// Values in +-[lo, hi], kept away from a kink at zero.
ad::Tensor away_from_zero(const ad::Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return ad::Tensor::from(shape, std::move(v), true);
}

ad::Tensor probe(const ad::Tensor& y, const ad::Tensor& w) { return ad::sum(ad::mul(y, w)); }

std::vector<std::uint8_t> random_mask(std::size_t n, std::mt19937_64& rng, double p) {
  std::bernoulli_distribution b(p);
  std::vector<std::uint8_t> m(n);
  for (auto& x : m) x = b(rng);
  m[0] = 1;
  m[n - 1] = 1;
  return m;
}

ad::ConvParams random_conv(std::size_t out, std::size_t in, std::size_t k, std::size_t stride, std::mt19937_64& rng) {
  ad::ConvParams p;
  p.weight = uniform({out, in, k, k}, rng, -0.5, 0.5);
  p.bias = uniform({out}, rng, -0.2, 0.2);
  p.stride = stride;
  return p;
}

void write_summary(const std::filesystem::path& path, const std::string& title,
                   const std::vector<std::pair<std::string, metrics::EvalResult>>& rows) {
  std::ofstream os(path);
  os << title << "\n";
  os << std::left << std::setw(28) << "row" << std::right << std::setw(10) << "AP@0.5" << std::setw(10) << "AP@0.7"
     << "  config_hash       result_hash\n";
  for (const auto& [name, r] : rows) {
    os << std::left << std::setw(28) << name << std::right << std::fixed << std::setprecision(4) << std::setw(10)
       << r.ap_50 << std::setw(10) << r.ap_70 << "  " << std::hex << std::setw(16) << std::setfill('0')
       << r.config_hash << "  " << std::setw(16) << r.hash() << std::dec << std::setfill(' ') << "\n";
  }
}

json eval_record(const metrics::EvalResult& r, std::uint64_t seed) {
  return {{"type", "eval"},
          {"mode", r.mode},
          {"config_hash", r.config_hash},
          {"seed", seed},
          {"result_hash", r.hash()},
          {"result", json::parse(r.to_json())}};
}

}  // namespace

Mode parse_mode(const std::string& s) {
  if (s == "train") return Mode::Train;
  if (s == "eval") return Mode::Eval;
  if (s == "ablate") return Mode::Ablate;
  if (s == "gradcheck") return Mode::Gradcheck;
  if (s == "simulate") return Mode::Simulate;
  throw Error(ErrorKind::Config, "unknown mode '" + s + "'");
}

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::Train: return "train";
    case Mode::Eval: return "eval";
    case Mode::Ablate: return "ablate";
    case Mode::Gradcheck: return "gradcheck";
    case Mode::Simulate: return "simulate";
  }
  return "?";
}

std::vector<std::uint64_t> Dataset::seeds() const {
  std::vector<std::uint64_t> out;
  for (const auto& s : scenes) out.push_back(s.seed);
  return out;
}

Dataset build_dataset(const config::ExperimentConfig& cfg, const sim::SceneConfig& scene_cfg, Stream stream,
                      std::size_t count) {
  const pipeline::AnchorGrid anchors = pipeline::make_anchors(cfg.model.feature_grid(), cfg.model.anchor);
  Dataset d;
  const std::size_t budget = 10 * count + 100;
  for (std::uint64_t k = 0; d.scenes.size() < count; ++k) {
    if (k >= budget) {
      throw Error(ErrorKind::RejectionBudget, "only " + std::to_string(d.scenes.size()) + " of " +
                                                  std::to_string(count) + " scenes could be generated");
    }
    const std::uint64_t seed = config::derive_seed(cfg.seed, stream, k);
    try {
      sim::SyntheticScene scene = sim::generate_scene(scene_cfg, cfg.model.grid, seed);
      d.samples.push_back(pipeline::make_sample(scene, cfg.model, anchors, cfg.sample));
      d.scenes.push_back(std::move(scene));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::RejectionBudget) throw;
      ++d.skipped;
    }
  }
  return d;
}

Dataset training_set(const config::ExperimentConfig& cfg, std::size_t count) {
  return build_dataset(cfg, cfg.scene, kTrainScenes, count);
}

Dataset occlusion_test_set(const config::ExperimentConfig& cfg, std::size_t count, Stream stream) {
  sim::SceneConfig sc = cfg.scene;
  sc.min_hidden = std::max(sc.min_hidden, cfg.eval.min_hidden);
  return build_dataset(cfg, sc, stream, count);
}

TrainedModel train_model(const config::ExperimentConfig& cfg, const Dataset& data, std::size_t epochs,
                         const std::function<void(const pipeline::EpochRecord&)>& on_epoch) {
  TrainedModel t{pipeline::Model::init(cfg.model, config::derive_seed(cfg.seed, kModelInit, 0)),
                 pipeline::Adam(cfg.train.learning_rate),
                 {}};
  pipeline::TrainConfig tc;
  tc.epochs = epochs;
  tc.learning_rate = cfg.train.learning_rate;
  tc.lambda = cfg.train.lambda;
  tc.shuffle_seed = config::derive_seed(cfg.seed, kShuffle, 0);
  tc.loss = cfg.train.loss;
  t.history = pipeline::train_joint(t.model, t.adam, data.samples, tc, on_epoch);
  return t;
}

const metrics::EvalResult& EvalSuite::get(const std::string& mode) const {
  for (const auto& r : results) {
    if (r.mode == mode) return r;
  }
  throw Error(ErrorKind::Config, "no eval result for mode '" + mode + "'");
}

EvalSuite evaluate_model(const config::ExperimentConfig& cfg, pipeline::Model& model, const Dataset& test,
                         const EvalOptions& opts) {
  model.set_training(false);
  if (opts.maxout_model) opts.maxout_model->set_training(false);
  const auto& inf = cfg.eval.inference;
  comms::ChannelModel cm = cfg.comms.channel;
  cm.seed = config::derive_seed(cfg.seed, kChannel, 0);
  comms::LossyChannel channel(cm);
  comms::LossyChannel maxout_channel(cm);

  metrics::SceneBoxes gts, ind, coop, late, maxout;
  for (std::size_t k = 0; k < test.samples.size(); ++k) {
    const pipeline::TrainingSample& s = test.samples[k];
    const std::uint64_t t = k * to_us(cfg.comms.frame_interval_ms);
    const std::uint64_t cutoff = t + to_us(cfg.comms.deadline.budget_ms);
    gts.push_back(s.ground_truth);

    auto transmit = [&](pipeline::Model& m, comms::LossyChannel& ch) {
      const geom::BEVFeatureMap f = m.extract(s.sender_raster.detach(), s.sender_pose, 1);
      ch.send(comms::encode_message(f, 1, t, cfg.comms.dtype), 1, t);
      return comms::select_partner_fcfs(ch.step(cutoff), cfg.comms.deadline, t, s.ego_pose, cfg.comms.comm_range_m);
    };

    const auto ego_only = pipeline::infer(model, s.ego_raster, s.ego_pose, std::nullopt, inf);
    const auto partner = transmit(model, channel);
    if (opts.individual) ind.push_back(ego_only);
    if (opts.cooperative) coop.push_back(pipeline::infer(model, s.ego_raster, s.ego_pose, partner, inf));
    if (opts.late_fusion) {
      if (partner) {
        const auto sender_only = pipeline::infer(model, s.sender_raster, s.sender_pose, std::nullopt, inf);
        late.push_back(metrics::late_fusion_baseline(ego_only, sender_only, s.ego_pose.inverse().compose(s.sender_pose),
                                                     inf.nms_iou));
      } else {
        late.push_back(ego_only);
      }
    }
    if (opts.maxout) {
      if (opts.maxout_model) {
        const auto p = transmit(*opts.maxout_model, maxout_channel);
        maxout.push_back(pipeline::infer(*opts.maxout_model, s.ego_raster, s.ego_pose, p, inf));
      } else {
        const dpnet::FusionKind saved = model.dpnet.config.fusion;
        model.dpnet.config.fusion = dpnet::FusionKind::Maxout;
        maxout.push_back(pipeline::infer(model, s.ego_raster, s.ego_pose, partner, inf));
        model.dpnet.config.fusion = saved;
      }
    }
  }

  EvalSuite suite;
  const auto seeds = test.seeds();
  const std::uint64_t h = cfg.hash();
  if (opts.individual) suite.results.push_back(metrics::evaluate("individual", ind, gts, seeds, h));
  if (opts.cooperative) suite.results.push_back(metrics::evaluate("cooperative", coop, gts, seeds, h));
  if (opts.late_fusion) suite.results.push_back(metrics::evaluate("late_fusion", late, gts, seeds, h));
  if (opts.maxout) suite.results.push_back(metrics::evaluate("maxout_fusion", maxout, gts, seeds, h));
  return suite;
}

std::vector<GradcheckEntry> gradcheck_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradcheckEntry> out;
  auto run = [&](const std::string& name, double tol, const std::function<ad::Tensor()>& f,
                 std::vector<ad::Tensor> params, double h = 1e-5) {
    out.push_back({name, tol, ad::gradcheck(f, params, h)});
  };
  constexpr double kOp = 1e-4;

  for (std::size_t stride : {1, 2}) {
    for (std::size_t k : {1, 3}) {
      const ad::Tensor x = uniform({2, 6, 5}, rng, -1, 1);
      const ad::ConvParams p = random_conv(3, 2, k, stride, rng);
      const ad::Tensor w = uniform({3, ad::conv_out_size(6, stride), ad::conv_out_size(5, stride)}, rng, -1, 1, false);
      run("conv2d k" + std::to_string(k) + " s" + std::to_string(stride), kOp,
          [=] { return probe(ad::conv2d(x, p), w); }, {x, p.weight, p.bias});
    }
  }
  {
    const ad::Tensor x = uniform({3, 4, 4}, rng, -1, 2);
    ad::BatchNormParams bn = ad::BatchNormParams::identity(3);
    bn.gamma = uniform({3}, rng, 0.5, 1.5);
    bn.beta = uniform({3}, rng, -0.5, 0.5);
    const ad::Tensor w = uniform({3, 4, 4}, rng, -1, 1, false);
    run("batchnorm2d train", kOp, [x, bn, w]() mutable { return probe(ad::batchnorm2d(x, bn), w); },
        {x, bn.gamma, bn.beta});
    bn.training = false;
    bn.running_mean = {0.1, -0.2, 0.3};
    bn.running_var = {0.5, 1.5, 2.0};
    run("batchnorm2d eval", kOp, [x, bn, w]() mutable { return probe(ad::batchnorm2d(x, bn), w); },
        {x, bn.gamma, bn.beta});
  }
  {
    const ad::Tensor x = away_from_zero({2, 4, 3}, rng, 0.05, 1.0);
    const ad::Tensor w = uniform({2, 4, 3}, rng, -1, 1, false);
    run("relu", kOp, [=] { return probe(ad::relu(x), w); }, {x});
    run("sigmoid", kOp, [=] { return probe(ad::sigmoid(x), w); }, {x});
    run("affine", kOp, [=] { return probe(ad::affine(x, -1.7, 0.3), w); }, {x});
  }
  {
    const ad::Tensor a = uniform({2, 3, 3}, rng, -1, 1);
    const ad::Tensor b = uniform({1, 3, 3}, rng, -1, 1);
    const ad::Tensor w2 = uniform({3, 3, 3}, rng, -1, 1, false);
    const ad::Tensor w = uniform({2, 3, 3}, rng, -1, 1, false);
    run("concat_channels", kOp, [=] { return probe(ad::concat_channels(a, b), w2); }, {a, b});
    run("add broadcast", kOp, [=] { return probe(ad::add(a, b), w); }, {a, b});
    run("mul broadcast", kOp, [=] { return probe(ad::mul(b, a), w); }, {a, b});
    const ad::Tensor gap = away_from_zero({2, 3, 3}, rng, 0.05, 0.5);
    const ad::Tensor c = ad::add(a.detach(), gap.detach()).detach();
    ad::Tensor cc = c.clone_leaf(true);
    run("maximum", kOp, [=] { return probe(ad::maximum(a, cc), w); }, {a, cc});
    run("channel_mean", kOp, [=] { return probe(ad::channel_mean(a), b.detach()); }, {a});
  }
  {
    // Distinct channel levels per cell so the max is never tied.
    std::vector<double> v(3 * 4 * 4);
    std::uniform_real_distribution<double> jitter(-0.02, 0.02);
    for (std::size_t cell = 0; cell < 16; ++cell) {
      std::vector<double> levels{0.0, 0.3, 0.6};
      std::shuffle(levels.begin(), levels.end(), rng);
      for (std::size_t ch = 0; ch < 3; ++ch) v[ch * 16 + cell] = levels[ch] + jitter(rng);
    }
    const ad::Tensor x = ad::Tensor::from({3, 4, 4}, std::move(v), true);
    const ad::Tensor w = uniform({1, 4, 4}, rng, -1, 1, false);
    run("channel_max", kOp, [=] { return probe(ad::channel_max(x), w); }, {x});
  }
  {
    const ad::Tensor a = uniform({2, 4, 4}, rng, -1, 1);
    const ad::Tensor b = uniform({2, 4, 4}, rng, -1, 1);
    const ad::Tensor w = uniform({2, 4, 4}, rng, -1, 1, false);
    const auto mask = random_mask(16, rng, 0.5);
    run("where", kOp, [=] { return probe(ad::where(mask, a, b), w); }, {a, b});
    const ad::Tensor m = uniform({1, 5, 5}, rng, -2, 2);
    const auto mmask = random_mask(25, rng, 0.7);
    const ad::Tensor wm = uniform({1, 5, 5}, rng, -1, 1, false);
    run("masked_minmax_normalize", kOp, [=] { return probe(ad::masked_minmax_normalize(m, mmask), wm); }, {m});
  }
  {
    const ad::Tensor src = uniform({2, 7, 6}, rng, -1, 1);
    geom::Affine2D A;
    const double th = std::uniform_real_distribution<double>(-0.6, 0.6)(rng);
    A.m = {std::cos(th), -std::sin(th), 0.7, std::sin(th), std::cos(th), -0.4};
    const ad::Tensor w = uniform({2, 7, 6}, rng, -1, 1, false);
    run("warp_tensor", kOp, [=] { return probe(geom::warp_tensor(src, A, 7, 6), w); }, {src});
  }
  for (dpnet::Reduction red : {dpnet::Reduction::Conv1x1, dpnet::Reduction::Mean, dpnet::Reduction::Max}) {
    dpnet::DPNetConfig dc;
    dc.channels = 3;
    dc.reduction = red;
    auto p = std::make_shared<dpnet::DPNetParams>(dpnet::DPNetParams::init(dc, rng));
    geom::GridSpec g{6, 6, 1.0, {}};
    geom::BEVFeatureMap ego{uniform({3, 6, 6}, rng, -1, 1), {}, g, 0};
    geom::BEVFeatureMap snd{uniform({3, 6, 6}, rng, -1, 1), {}, g, 1};
    geom::OverlapMask ov{6, 6, random_mask(36, rng, 0.7)};
    const ad::Tensor w = uniform({3, 6, 6}, rng, -1, 1, false);
    std::vector<ad::Tensor> params{ego.data, snd.data};
    for (const auto& t : p->named_parameters()) params.push_back(t.tensor);
    run("dpnet " + std::string(dpnet::to_string(red)), kOp,
        [=] { return probe(dpnet::forward_dual(ego, dpnet::ReceivedFeatures{snd, ov}, *p), w); }, params);
  }

  // Heads and losses on a 4x4 feature grid with one object.
  pipeline::ModelConfig tiny;
  tiny.grid = geom::GridSpec{8, 8, 1.0, {}};
  tiny.extractor.in_channels = 1;
  tiny.extractor.widths = {4, 4};
  tiny.extractor.downsample = 2;
  tiny.extractor.stride_block = 1;
  tiny.dpnet.channels = 4;
  const pipeline::AnchorGrid anchors = pipeline::make_anchors(tiny.feature_grid(), tiny.anchor);
  std::uniform_real_distribution<double> pos(-1.5, 1.5);
  const DetectionBox object{pos(rng), pos(rng), 1.9, 4.4, std::uniform_real_distribution<double>(-0.3, 0.3)(rng), 1.0};
  const pipeline::Targets targets = pipeline::assign_targets(anchors, {object});
  {
    const ad::Tensor cls = uniform({2, 4, 4}, rng, -3, 1);
    const ad::Tensor reg = uniform({10, 4, 4}, rng, -0.5, 0.5);
    run("focal_loss", kOp, [=] { return pipeline::focal_loss(cls, targets); }, {cls});
    run("regression_loss", kOp, [=] { return pipeline::regression_loss(reg, targets); }, {reg});
  }
  {
    auto model = std::make_shared<pipeline::Model>(pipeline::Model::init(tiny, rng()));
    model->set_training(true);
    pipeline::TrainingSample s;
    s.ego_raster = uniform({1, 8, 8}, rng, 0, 1, false);
    s.sender_raster = uniform({1, 8, 8}, rng, 0, 1, false);
    s.sender_pose = geom::Pose2D(pos(rng) + 2.0, pos(rng), std::uniform_real_distribution<double>(-0.4, 0.4)(rng));
    s.ground_truth = {object};
    s.targets = targets;
    std::vector<ad::Tensor> params;
    for (const auto& t : model->named_parameters()) params.push_back(t.tensor);
    // Hundreds of ReLUs feed every entry; a small step keeps kinks out of [x-h, x+h].
    run("end-to-end", 1e-3, [=] { return pipeline::joint_loss(*model, s, 0.5).total; }, params, 1e-6);
  }
  return out;
}

std::vector<std::pair<std::string, std::vector<std::string>>> ablation_axes() {
  return {{"complementary", {"on", "off"}},
          {"reduction", {"conv1x1", "mean", "max"}},
          {"layers", {"1", "2", "3"}},
          {"kernel", {"1", "3", "5"}}};
}

config::ExperimentConfig ablation_cell_config(const config::ExperimentConfig& base, const std::string& sweep,
                                              const std::string& value) {
  config::ExperimentConfig c = base;
  auto& d = c.model.dpnet;
  if (sweep == "complementary") {
    if (value != "on" && value != "off") throw Error(ErrorKind::Config, "complementary takes on|off");
    d.complementary = value == "on";
  } else if (sweep == "reduction") {
    d.reduction = dpnet::parse_reduction(value);
  } else if (sweep == "layers") {
    d.layers = std::stoul(value);
  } else if (sweep == "kernel") {
    d.kernel = std::stoul(value);
  } else {
    throw Error(ErrorKind::Config, "unknown ablation sweep '" + sweep + "'");
  }
  c.validate();
  return c;
}

std::vector<AblationCell> run_ablation(const config::ExperimentConfig& cfg, const std::string& only,
                                       const std::function<void(const AblationCell&)>& on_cell) {
  const auto axes = ablation_axes();
  if (!only.empty() && std::none_of(axes.begin(), axes.end(), [&](const auto& a) { return a.first == only; })) {
    throw Error(ErrorKind::Config, "unknown ablation sweep '" + only + "'");
  }
  const Dataset train = training_set(cfg, cfg.ablation.train_scenes);
  const Dataset test = occlusion_test_set(cfg, cfg.ablation.test_scenes, kAblationTestScenes);
  EvalOptions eo;
  eo.individual = eo.late_fusion = eo.maxout = false;

  std::map<std::uint64_t, metrics::EvalResult> done;
  std::vector<AblationCell> cells;
  for (const auto& [sweep, values] : axes) {
    if (!only.empty() && sweep != only) continue;
    for (const auto& value : values) {
      AblationCell cell{sweep, value, ablation_cell_config(cfg, sweep, value), {}};
      const std::uint64_t h = cell.config.hash();
      auto it = done.find(h);
      if (it == done.end()) {
        TrainedModel t = train_model(cell.config, train, cfg.ablation.epochs);
        it = done.emplace(h, evaluate_model(cell.config, t.model, test, eo).get("cooperative")).first;
      }
      cell.result = it->second;
      if (on_cell) on_cell(cell);
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

std::vector<metrics::EvalResult> run_experiment(const config::ExperimentConfig& cfg, Mode mode,
                                                const RunOptions& opts) {
  cfg.validate();
  std::filesystem::create_directories(opts.out_dir);
  {
    std::ofstream os(opts.out_dir / "config.json");
    os << cfg.to_json() << "\n";
  }
  std::ofstream records(opts.out_dir / "records.jsonl", std::ios::app);
  if (!records) throw Error(ErrorKind::Io, "cannot write " + (opts.out_dir / "records.jsonl").string());
  const std::uint64_t chash = cfg.hash();
  auto emit = [&](json j) {
    j["config_hash"] = j.value("config_hash", chash);
    j["seed"] = cfg.seed;
    records << j.dump() << "\n";
    records.flush();
  };
  auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  emit({{"type", "run"}, {"mode", std::string(to_string(mode))}, {"preset", cfg.preset}});

  std::vector<metrics::EvalResult> results;
  switch (mode) {
    case Mode::Train: {
      const Dataset data = training_set(cfg, cfg.train.scenes);
      log("training on " + std::to_string(data.samples.size()) + " scenes");
      TrainedModel t = train_model(cfg, data, cfg.train.epochs, [&](const pipeline::EpochRecord& e) {
        emit({{"type", "epoch"},
              {"epoch", e.epoch},
              {"steps", e.steps},
              {"loss", e.mean_total},
              {"loss_individual", e.mean_individual},
              {"loss_cooperative", e.mean_cooperative}});
        log("epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.mean_total));
      });
      const auto path = opts.checkpoint.value_or(opts.out_dir / "model.ckpt");
      checkpoint::save(path, t.model, &t.adam, chash, cfg.seed);
      emit({{"type", "checkpoint"}, {"path", path.string()}});
      std::ofstream os(opts.out_dir / "summary.txt");
      os << "train " << cfg.preset << " seed " << cfg.seed << " scenes " << data.samples.size() << "\n";
      for (const auto& e : t.history) os << "epoch " << e.epoch << " loss " << e.mean_total << "\n";
      break;
    }
    case Mode::Eval: {
      const auto path = opts.checkpoint.value_or(opts.out_dir / "model.ckpt");
      pipeline::Model model = pipeline::Model::init(cfg.model, config::derive_seed(cfg.seed, kModelInit, 0));
      checkpoint::load(path, model, nullptr);
      std::optional<pipeline::Model> maxout_model;
      EvalOptions eo;
      if (opts.maxout_checkpoint) {
        pipeline::ModelConfig mc = cfg.model;
        mc.dpnet.fusion = dpnet::FusionKind::Maxout;
        maxout_model = pipeline::Model::init(mc, 0);
        checkpoint::load(*opts.maxout_checkpoint, *maxout_model, nullptr);
        eo.maxout_model = &*maxout_model;
      }
      const Dataset test = occlusion_test_set(cfg, cfg.eval.scenes);
      log("evaluating on " + std::to_string(test.samples.size()) + " held-out scenes");
      EvalSuite suite = evaluate_model(cfg, model, test, eo);
      std::vector<std::pair<std::string, metrics::EvalResult>> rows;
      for (const auto& r : suite.results) {
        emit(eval_record(r, cfg.seed));
        rows.emplace_back(r.mode, r);
      }
      write_summary(opts.out_dir / "summary.txt", "eval " + cfg.preset + " seed " + std::to_string(cfg.seed), rows);
      results = suite.results;
      break;
    }
    case Mode::Ablate: {
      std::vector<std::pair<std::string, metrics::EvalResult>> rows;
      run_ablation(cfg, opts.sweep, [&](const AblationCell& c) {
        json j = eval_record(c.result, cfg.seed);
        j["type"] = "ablation";
        j["sweep"] = c.sweep;
        j["value"] = c.value;
        emit(j);
        rows.emplace_back(c.sweep + "=" + c.value, c.result);
        results.push_back(c.result);
        log(c.sweep + "=" + c.value + " AP@0.5 " + std::to_string(c.result.ap_50));
      });
      write_summary(opts.out_dir / "summary.txt", "ablate " + cfg.preset + " seed " + std::to_string(cfg.seed), rows);
      break;
    }
    case Mode::Gradcheck: {
      const auto entries = gradcheck_suite(cfg.seed);
      std::ofstream os(opts.out_dir / "summary.txt");
      std::string failed;
      for (const auto& e : entries) {
        emit({{"type", "gradcheck"},
              {"name", e.name},
              {"max_rel_error", e.report.max_rel_error},
              {"entries", e.report.entries},
              {"nonsmooth", e.report.nonsmooth},
              {"tolerance", e.tolerance},
              {"passed", e.passed()}});
        os << std::left << std::setw(28) << e.name << std::scientific << std::setprecision(3)
           << e.report.max_rel_error << "  skipped " << e.report.nonsmooth << "/" << e.report.entries
           << (e.passed() ? "  ok" : "  FAIL") << "\n";
        if (!e.passed()) failed += " " + e.name;
      }
      if (!failed.empty()) throw Error(ErrorKind::NumericalFailure, "gradcheck failed for" + failed);
      break;
    }
    case Mode::Simulate: {
      const Dataset test = occlusion_test_set(cfg, cfg.eval.scenes);
      std::ofstream scenes(opts.out_dir / "scenes.txt");
      comms::ChannelModel cm = cfg.comms.channel;
      cm.seed = config::derive_seed(cfg.seed, kChannel, 0);
      comms::LossyChannel channel(cm);
      for (std::size_t k = 0; k < test.samples.size(); ++k) {
        const auto& s = test.samples[k];
        sim::write_scene(scenes, test.scenes[k]);
        const std::uint64_t t = k * to_us(cfg.comms.frame_interval_ms);
        const geom::BEVFeatureMap raster{s.sender_raster, s.sender_pose, cfg.model.grid, 1};
        channel.send(comms::encode_message(raster, 1, t, cfg.comms.dtype), 1, t);
        const auto partner = comms::select_partner_fcfs(channel.step(t + to_us(cfg.comms.deadline.budget_ms)),
                                                        cfg.comms.deadline, t, s.ego_pose, cfg.comms.comm_range_m);
        emit({{"type", "scene"},
              {"scene_seed", s.seed},
              {"objects", test.scenes[k].objects.size()},
              {"ground_truth", s.ground_truth.size()},
              {"partner", partner.has_value()}});
      }
      for (const auto& r : channel.trace()) {
        emit({{"type", "delivery"},
              {"seq", r.seq},
              {"sender_id", r.sender_id},
              {"send_time_us", r.send_time_us},
              {"arrival_us", r.arrival_us},
              {"dropped", r.dropped},
              {"delivered", r.delivered}});
      }
      std::ofstream os(opts.out_dir / "summary.txt");
      os << "simulate " << test.samples.size() << " scenes, " << test.skipped << " seeds skipped\n";
      break;
    }
  }
  return results;
}

}  // namespace sicp::experiment
