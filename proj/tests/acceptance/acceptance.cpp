// Acceptance runner: one PASS/FAIL line per criterion.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sicp/boxes.hpp"
#include "sicp/checkpoint.hpp"
#include "sicp/comms.hpp"
#include "sicp/config.hpp"
#include "sicp/dpnet.hpp"
#include "sicp/error.hpp"
#include "sicp/experiment.hpp"
#include "sicp/geometry.hpp"
#include "sicp/metrics.hpp"

using namespace sicp;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                         bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = u(rng);
  return ad::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

template <class F>
std::optional<ErrorKind> error_kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

Outcome criterion_1() {
  Outcome o;
  const auto t0 = Clock::now();
  const config::ExperimentConfig big = config::preset("paper-scale");
  const dpnet::DPNetConfig& d = big.model.dpnet;
  std::mt19937_64 rng(1);
  const dpnet::DPNetParams p = dpnet::DPNetParams::init(d, rng);
  const std::size_t n = p.parameter_count();
  const double dt = seconds_since(t0);
  o.note("C=" + std::to_string(d.channels) + " params=" + std::to_string(n) + " closed_form=" +
         std::to_string(dpnet::parameter_count(d)));
  o.require(d.channels == 256, "channel width is 256");
  o.require(n == dpnet::parameter_count(d), "instantiated count equals closed form");
  o.require(n >= 125000 && n <= 140000, "count within [125000, 140000]");
  o.require(dt < 1.0, "runtime < 1 s (" + fmt(dt) + " s)");
  return o;
}

Outcome criterion_2() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst_op = 0.0, worst_e2e = 0.0;
  std::size_t entries = 0, checked = 0, skipped = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (const auto& e : experiment::gradcheck_suite(seed)) {
      ++entries;
      checked += e.report.entries;
      skipped += e.report.nonsmooth;
      if (e.name == "end-to-end") worst_e2e = std::max(worst_e2e, e.report.max_rel_error);
      else worst_op = std::max(worst_op, e.report.max_rel_error);
      o.require(e.tolerance <= (e.name == "end-to-end" ? 1e-3 : 1e-4), e.name + " tolerance is the required bound");
      if (!e.passed()) o.require(false, e.name + " seed " + std::to_string(seed) + " rel " + fmt(e.report.max_rel_error));
    }
  }
  const double dt = seconds_since(t0);
  o.note(std::to_string(checked) + " gradient entries, " + std::to_string(skipped) + " on kinks");
  o.require(skipped * 100 <= checked, "at most 1% of entries excluded as kinks");
  o.note(std::to_string(entries) + " checks, worst op " + fmt(worst_op, 3) + ", worst end-to-end " + fmt(worst_e2e, 3));
  o.require(worst_op < 1e-4, "op rel error < 1e-4");
  o.require(worst_e2e < 1e-3, "end-to-end rel error < 1e-3");
  o.require(dt < 120.0, "runtime < 2 min (" + fmt(dt) + " s)");
  return o;
}

Outcome criterion_3() {
  Outcome o;
  const auto t0 = Clock::now();
  std::size_t overlap_cells = 0, off_cells = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    auto pick = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const std::size_t C = pick(1, 6), H = pick(4, 12), W = pick(4, 12);
    dpnet::DPNetConfig cfg;
    cfg.channels = C;
    cfg.reduction = static_cast<dpnet::Reduction>(pick(0, 2));
    cfg.layers = pick(1, 3);
    cfg.kernel = std::array<std::size_t, 3>{1, 3, 5}[pick(0, 2)];
    cfg.complementary = pick(0, 1) == 1;
    cfg.fusion = pick(0, 3) == 0 ? dpnet::FusionKind::Maxout : dpnet::FusionKind::Complementary;
    dpnet::DPNetParams p = dpnet::DPNetParams::init(cfg, rng);
    // A generic projection, not just the identity start.
    for (double& w : p.fuse.weight.mutable_data()) w = std::uniform_real_distribution<double>(-1, 1)(rng);
    p.set_training(pick(0, 1) == 1);

    const geom::GridSpec g{H, W, 1.0, {}};
    std::uniform_real_distribution<double> off(-0.6, 0.6);
    const geom::BEVFeatureMap ego{random_tensor({C, H, W}, rng), geom::Pose2D(), g, 0};
    const geom::BEVFeatureMap sender{random_tensor({C, H, W}, rng),
                                     geom::Pose2D(off(rng) * H, off(rng) * W, off(rng) * 2.0), g, 1};
    const geom::WarpResult w = geom::warp_feature_map(sender, geom::Pose2D(), g);
    const std::string tag = " (seed " + std::to_string(seed) + ")";

    const ad::Tensor individual = dpnet::forward_dual(ego, std::nullopt, p);
    o.require(bit_equal(individual.data(), ego.data.data()), "individual bypass bit-identical" + tag);

    const ad::Tensor fused = dpnet::forward_dual(ego, dpnet::ReceivedFeatures{w.map, w.overlap}, p);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < H * W; ++k) {
        if (w.overlap.valid[k]) continue;
        const std::size_t idx = c * H * W + k;
        if (std::memcmp(&fused.data()[idx], &individual.data()[idx], sizeof(double)) != 0) {
          o.require(false, "off-overlap output equals individual mode" + tag);
        }
      }

    const ad::Tensor none =
        dpnet::forward_dual(ego, dpnet::ReceivedFeatures{w.map, geom::OverlapMask::all(H, W, false)}, p);
    o.require(bit_equal(none.data(), ego.data.data()), "empty overlap equals individual mode" + tag);

    if (cfg.fusion == dpnet::FusionKind::Complementary) {
      const dpnet::WeightMap m = dpnet::compute_weight_map(dpnet::reduce_to_single_channel(ego, w.map, p), w.overlap, p);
      const geom::BEVFeatureMap ones_e{ad::Tensor::full({C, H, W}, 1.0), ego.pose, g, 0};
      const geom::BEVFeatureMap ones_s{ad::Tensor::full({C, H, W}, 1.0), ego.pose, g, 1};
      const dpnet::Blend b = dpnet::complementary_blend(ones_e, ones_s, m, true);
      for (std::size_t k = 0; k < H * W; ++k) {
        const double mk = m.normalized.data()[k];
        if (!w.overlap.valid[k]) {
          ++off_cells;
          o.require(mk == 0.0, "M exactly 0 off overlap" + tag);
          continue;
        }
        ++overlap_cells;
        o.require(mk >= 0.0 && mk <= 1.0, "M within [0,1]" + tag);
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t idx = c * H * W + k;
          o.require(b.ego_part.data()[idx] + b.sender_part.data()[idx] == 1.0, "weights sum to one" + tag);
        }
      }
      const dpnet::ReceivedFeatures full{w.map, geom::OverlapMask::all(H, W, true)};
      const ad::Tensor via_dual = dpnet::forward_dual(ego, full, p);
      const dpnet::WeightMap mf = dpnet::compute_weight_map(dpnet::reduce_to_single_channel(ego, w.map, p), full.overlap, p);
      const ad::Tensor direct = dpnet::fuse_complementary(ego, w.map, mf, p);
      o.require(bit_equal(via_dual.data(), direct.data()), "full overlap equals fuse_complementary" + tag);
    }
  }
  const double dt = seconds_since(t0);
  o.note("50 random configs, " + std::to_string(overlap_cells) + " overlap / " + std::to_string(off_cells) +
         " off-overlap cells checked");
  o.require(overlap_cells > 0 && off_cells > 0, "both cell kinds exercised");
  o.require(dt < 60.0, "runtime < 1 min (" + fmt(dt) + " s)");
  return o;
}

Outcome criterion_4() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::size_t C = 4, H = 8, W = 8;
  const double g = 1.0;
  const geom::GridSpec grid{H, W, 1.0, {}};
  std::vector<double> step(C * H * W, 0.0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = W / 2; j < W; ++j) step[i * W + j] = g;  // channel 0 only
  const geom::BEVFeatureMap ego{ad::Tensor::full({C, H, W}, g + 1.0), geom::Pose2D(), grid, 0};
  const geom::OverlapMask all = geom::OverlapMask::all(H, W, true);

  // Maxout: the smaller sender map receives no gradient anywhere.
  ad::Tensor snd_max = ad::Tensor::from({C, H, W}, step, true);
  ad::sum(dpnet::fuse_maxout(ego, geom::BEVFeatureMap{snd_max, geom::Pose2D(), grid, 1}, all)).backward();
  std::size_t nonzero = 0;
  if (snd_max.has_grad())
    for (double v : snd_max.grad()) nonzero += v != 0.0;
  o.require(nonzero == 0, "maxout sensitivity is exactly zero at every cell (" + std::to_string(nonzero) + " nonzero)");

  // Complementary blend: sensitivity (1 - m) per cell.
  dpnet::DPNetConfig cfg;
  cfg.channels = C;
  std::mt19937_64 rng(4);
  dpnet::DPNetParams p = dpnet::DPNetParams::init(cfg, rng);
  const geom::BEVFeatureMap snd_plain{ad::Tensor::from({C, H, W}, step), geom::Pose2D(), grid, 1};
  const dpnet::WeightMap m = dpnet::compute_weight_map(dpnet::reduce_to_single_channel(ego, snd_plain, p), all, p);
  ad::Tensor snd = ad::Tensor::from({C, H, W}, step, true);
  const dpnet::Blend b =
      dpnet::complementary_blend(ego, geom::BEVFeatureMap{snd, geom::Pose2D(), grid, 1}, m, true);
  ad::sum(ad::add(b.ego_part, b.sender_part)).backward();
  std::size_t below_one = 0, positive = 0;
  double worst = 0.0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < H * W; ++k) {
      const double mk = m.normalized.data()[k];
      const double gk = snd.grad()[c * H * W + k];
      worst = std::max(worst, std::abs(gk - (1.0 - mk)));
      if (mk < 1.0) {
        ++below_one;
        positive += gk > 0.0;
      }
    }
  o.note("complementary: " + std::to_string(positive) + "/" + std::to_string(below_one) +
         " entries with m<1 have positive sensitivity; max |grad-(1-m)| " + fmt(worst, 3));
  o.require(below_one > 0, "step edge yields cells with m < 1");
  o.require(positive == below_one, "sensitivity > 0 wherever m < 1");
  o.require(worst < 1e-12, "sensitivity equals 1 - m");
  const double dt = seconds_since(t0);
  o.require(dt < 10.0, "runtime < 10 s (" + fmt(dt) + " s)");
  return o;
}

// Reference bilinear sampler: weighted sum over every source cell.
std::optional<double> bilinear_oracle(const ad::Tensor& t, std::size_t c, double si, double sj) {
  const double H = static_cast<double>(t.dim(1)), W = static_cast<double>(t.dim(2));
  if (si < -1e-9 || sj < -1e-9 || si > H - 1 + 1e-9 || sj > W - 1 + 1e-9) return std::nullopt;
  si = std::clamp(si, 0.0, H - 1);
  sj = std::clamp(sj, 0.0, W - 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < t.dim(1); ++i)
    for (std::size_t j = 0; j < t.dim(2); ++j) {
      const double wi = std::max(0.0, 1.0 - std::abs(si - static_cast<double>(i)));
      const double wj = std::max(0.0, 1.0 - std::abs(sj - static_cast<double>(j)));
      acc += wi * wj * t.at(c, i, j);
    }
  return acc;
}

Outcome criterion_5() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);

  double worst = 0.0;
  std::size_t mask_mismatch = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t H = 6 + rng() % 8, W = 6 + rng() % 8;
    const ad::Tensor x = random_tensor({2, H, W}, rng);
    const double th = u(rng) * std::numbers::pi;
    geom::Affine2D A;
    A.m = {std::cos(th), -std::sin(th), u(rng) * H, std::sin(th), std::cos(th), u(rng) * W};
    geom::OverlapMask m;
    const ad::Tensor y = geom::warp_tensor(x, A, H, W, &m);
    const geom::Affine2D inv = A.inverse();
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const geom::Point2 s = inv.apply({static_cast<double>(i), static_cast<double>(j)});
          const auto ref = bilinear_oracle(x, c, s.x, s.y);
          mask_mismatch += static_cast<bool>(m.valid[i * W + j]) != ref.has_value();
          worst = std::max(worst, std::abs(y.at(c, i, j) - ref.value_or(0.0)));
        }
  }
  o.note("bilinear oracle max error " + fmt(worst, 3) + ", mask mismatches " + std::to_string(mask_mismatch));
  o.require(worst < 1e-6, "warp matches the bilinear oracle to 1e-6");
  o.require(mask_mismatch == 0, "overlap mask matches oracle coverage");

  // Identity.
  const geom::GridSpec g{10, 10, 0.5, {}};
  const ad::Tensor x = random_tensor({3, 10, 10}, rng);
  const geom::Affine2D I = geom::relative_transform(geom::Pose2D(1, 2, 0.3), g, geom::Pose2D(1, 2, 0.3), g);
  geom::OverlapMask mi;
  const ad::Tensor yi = geom::warp_tensor(x, I, 10, 10, &mi);
  double id_err = 0.0;
  for (std::size_t k = 0; k < x.numel(); ++k) id_err = std::max(id_err, std::abs(yi.data()[k] - x.data()[k]));
  o.require(id_err < 1e-9 && mi.count() == 100, "equal poses warp as the identity with a full mask");

  // One-cell translation along the column axis: displacement of one resolution along y.
  const geom::Affine2D T = geom::relative_transform(geom::Pose2D(0, 0.5, 0), g, geom::Pose2D(), g);
  geom::OverlapMask mt;
  const ad::Tensor yt = geom::warp_tensor(x, T, 10, 10, &mt);
  bool shift_ok = true;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 10; ++i) {
      shift_ok = shift_ok && yt.at(c, i, 0) == 0.0 && !mt.valid[i * 10];
      for (std::size_t j = 1; j < 10; ++j) {
        shift_ok = shift_ok && std::abs(yt.at(c, i, j) - x.at(c, i, j - 1)) < 1e-9 && mt.valid[i * 10 + j];
      }
    }
  o.require(shift_ok, "one-cell translation shifts columns and masks the vacated one");

  // Quarter turn: rotation block is a 90 degree rotation and the warp permutes cells.
  const geom::GridSpec sq{9, 9, 1.0, {}};
  const geom::Affine2D R = geom::relative_transform(geom::Pose2D(0, 0, std::numbers::pi / 2), sq, geom::Pose2D(), sq);
  const bool block = std::abs(R.m[0]) < 1e-12 && std::abs(R.m[4]) < 1e-12 && std::abs(std::abs(R.m[1]) - 1) < 1e-12 &&
                     std::abs(R.m[1] + R.m[3]) < 1e-12 && std::abs(std::abs(R.det()) - 1.0) < 1e-12;
  o.require(block, "quarter turn gives a 90 degree rotation block with |det| = 1");
  const ad::Tensor xs = random_tensor({1, 9, 9}, rng);
  geom::OverlapMask mr;
  const ad::Tensor yr = geom::warp_tensor(xs, R, 9, 9, &mr);
  const geom::Affine2D Rinv = R.inverse();
  double rot_err = 0.0;
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) {
      const geom::Point2 s = Rinv.apply({static_cast<double>(i), static_cast<double>(j)});
      const auto si = static_cast<std::size_t>(std::lround(s.x)), sj = static_cast<std::size_t>(std::lround(s.y));
      rot_err = std::max(rot_err, std::abs(yr.at(0, i, j) - xs.at(0, si, sj)));
    }
  o.require(rot_err < 1e-9 && mr.count() == 81, "quarter turn permutes cells exactly");

  // Round trip on a smooth unit-range map.
  const std::size_t N = 40;
  std::vector<double> v(N * N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) v[i * N + j] = 0.5 + 0.5 * std::sin(0.3 * i) * std::cos(0.25 * j);
  const ad::Tensor smooth = ad::Tensor::from({1, N, N}, v);
  double rt = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    // Rotation about the map center plus a small shift keeps the interior covered.
    const double th = u(rng) * 0.6, ct = std::cos(th), st = std::sin(th), mid = (N - 1) / 2.0;
    geom::Affine2D A;
    A.m = {ct, -st, mid - ct * mid + st * mid + 2 * u(rng), st, ct, mid - st * mid - ct * mid + 2 * u(rng)};
    const ad::Tensor back = geom::warp_tensor(geom::warp_tensor(smooth, A, N, N), A.inverse(), N, N);
    for (std::size_t i = 12; i < 28; ++i)
      for (std::size_t j = 12; j < 28; ++j) rt = std::max(rt, std::abs(back.at(0, i, j) - smooth.at(0, i, j)));
  }
  o.note("round-trip interior error " + fmt(rt, 3));
  o.require(rt < 0.1, "warp then inverse warp keeps the interior within 0.1");
  const double dt = seconds_since(t0);
  o.require(dt < 60.0, "runtime < 1 min (" + fmt(dt) + " s)");
  return o;
}

bool inside_box(const DetectionBox& b, double px, double py) {
  const double dx = px - b.x, dy = py - b.y;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  return std::abs(c * dx + s * dy) <= b.l / 2 && std::abs(-s * dx + c * dy) <= b.w / 2;
}

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational(std::int64_t n = 0, std::int64_t d = 1) : num(n), den(d) { reduce(); }
  void reduce() {
    const std::int64_t g = std::gcd(num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }
  friend Rational operator+(Rational a, Rational b) { return {a.num * b.den + b.num * a.den, a.den * b.den}; }
  friend Rational operator-(Rational a, Rational b) { return {a.num * b.den - b.num * a.den, a.den * b.den}; }
  friend Rational operator*(Rational a, Rational b) { return {a.num * b.num, a.den * b.den}; }
  friend bool operator<(Rational a, Rational b) { return a.num * b.den < b.num * a.den; }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

// Exhaustive enumeration: for every score cut-off, rematch the kept prefix from
// scratch, record exact precision/recall, then integrate the right-envelope.
Rational enumerated_ap(const metrics::SceneBoxes& preds, const metrics::SceneBoxes& gts, double thresh) {
  std::vector<std::pair<std::size_t, std::size_t>> ranked;
  for (std::size_t s = 0; s < preds.size(); ++s)
    for (std::size_t k = 0; k < preds[s].size(); ++k) ranked.emplace_back(s, k);
  std::stable_sort(ranked.begin(), ranked.end(), [&](auto a, auto b) {
    return preds[a.first][a.second].score > preds[b.first][b.second].score;
  });
  std::int64_t total = 0;
  for (const auto& g : gts) total += static_cast<std::int64_t>(g.size());
  std::vector<Rational> prec, rec;
  for (std::size_t cut = 1; cut <= ranked.size(); ++cut) {
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t s = 0; s < gts.size(); ++s) used[s].assign(gts[s].size(), false);
    std::int64_t tp = 0;
    for (std::size_t r = 0; r < cut; ++r) {
      const auto [s, k] = ranked[r];
      std::optional<std::size_t> arg;
      double best = 0.0;
      for (std::size_t g = 0; g < gts[s].size(); ++g) {
        if (used[s][g]) continue;
        const double iou = rotated_iou(preds[s][k], gts[s][g]);
        if (iou >= thresh && (!arg || iou > best)) {
          best = iou;
          arg = g;
        }
      }
      if (arg) {
        used[s][*arg] = true;
        ++tp;
      }
    }
    prec.emplace_back(tp, static_cast<std::int64_t>(cut));
    rec.emplace_back(tp, total);
  }
  Rational ap, prev;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    Rational env;
    for (std::size_t m = k; m < prec.size(); ++m)
      if (env < prec[m]) env = prec[m];
    ap = ap + (rec[k] - prev) * env;
    prev = rec[k];
  }
  return ap;
}

Outcome criterion_6() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> pos(-1.5, 1.5), size(0.5, 4.0), ang(-std::numbers::pi, std::numbers::pi),
      unit(0, 1);
  double worst_mc = 0.0;
  for (int pair = 0; pair < 100; ++pair) {
    const DetectionBox a{pos(rng), pos(rng), size(rng), size(rng), ang(rng), 1};
    const DetectionBox b{pos(rng), pos(rng), size(rng), size(rng), ang(rng), 1};
    const double iou = rotated_iou(a, b);
    const double lo = -5.0, span = 10.0;
    std::size_t both = 0, any = 0;
    for (int s = 0; s < 1000000; ++s) {
      const double x = lo + span * unit(rng), y = lo + span * unit(rng);
      const bool ia = inside_box(a, x, y), ib = inside_box(b, x, y);
      both += ia && ib;
      any += ia || ib;
    }
    worst_mc = std::max(worst_mc, std::abs(iou - static_cast<double>(both) / static_cast<double>(any)));
  }
  o.note("IoU vs Monte Carlo max diff " + fmt(worst_mc, 3));
  o.require(worst_mc < 0.01, "rotated IoU within 0.01 of Monte Carlo on 100 pairs");

  double worst_ap = 0.0;
  std::size_t order_violations = 0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t scenes = 1 + rng() % 3;
    metrics::SceneBoxes gts(scenes), preds(scenes);
    std::size_t n_pred = 1 + rng() % 10;
    std::uniform_real_distribution<double> p(-6, 6), jit(-1.5, 1.5), yaw(-0.5, 0.5);
    for (std::size_t s = 0; s < scenes; ++s) {
      const std::size_t ng = (s == 0 ? 1 : 0) + rng() % 4;
      for (std::size_t g = 0; g < ng; ++g) gts[s].push_back({p(rng) * 3, p(rng) * 3, 2, 4.5, yaw(rng), 1});
    }
    for (std::size_t k = 0; k < n_pred; ++k) {
      const std::size_t s = rng() % scenes;
      DetectionBox b{p(rng) * 3, p(rng) * 3, 2, 4.5, yaw(rng), unit(rng)};
      if (!gts[s].empty() && unit(rng) < 0.7) {
        const auto& g = gts[s][rng() % gts[s].size()];
        b.x = g.x + jit(rng);
        b.y = g.y + jit(rng);
        b.yaw = g.yaw + yaw(rng);
      }
      preds[s].push_back(b);
    }
    for (double t : {0.5, 0.7}) {
      const double ap = metrics::average_precision(preds, gts, t).ap;
      worst_ap = std::max(worst_ap, std::abs(ap - enumerated_ap(preds, gts, t).value()));
      auto shuffled = preds;
      for (auto& s : shuffled) std::shuffle(s.begin(), s.end(), rng);
      order_violations += metrics::average_precision(shuffled, gts, t).ap != ap;
    }
  }
  o.note("AP vs exhaustive enumeration max diff " + fmt(worst_ap, 3));
  o.require(worst_ap == 0.0, "AP equals the enumeration oracle exactly on 100 cases");
  o.require(order_violations == 0, "AP invariant to prediction order");

  const metrics::SceneBoxes gts{{{0, 0, 2, 4.5, 0, 1}, {20, 0, 2, 4.5, 0, 1}}};
  const metrics::SceneBoxes preds{{{0, 0, 2, 4.5, 0, 0.9}, {40, 0, 2, 4.5, 0, 0.8}, {20, 0, 2, 4.5, 0, 0.7}}};
  const metrics::APResult worked = metrics::average_precision(preds, gts, 0.5);
  o.note("worked example AP " + fmt(worked.ap, 17));
  o.require(worked.ap == 5.0 / 6.0, "worked example reproduces 5/6");
  o.require(worked.curve.size() == 3 && worked.curve[0] == metrics::PRPoint{1.0, 0.5} &&
                worked.curve[1] == metrics::PRPoint{0.5, 0.5} && worked.curve[2].recall == 1.0 &&
                worked.curve[2].precision == 2.0 / 3.0,
            "worked example PR points");
  const double dt = seconds_since(t0);
  o.require(dt < 120.0, "runtime < 2 min (" + fmt(dt) + " s)");
  return o;
}

Outcome criterion_7() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  const geom::GridSpec g{16, 12, 2.0, {}};
  bool roundtrip = true;
  for (int k = 0; k < 20; ++k) {
    const geom::BEVFeatureMap f{random_tensor({1 + rng() % 8, 16, 12}, rng, -1e3, 1e3),
                                geom::Pose2D(10.0 * k, -3.0, 0.1 * k), g, 3};
    const auto bytes = comms::encode_message(f, 3, 1000 * static_cast<std::uint64_t>(k));
    const auto back = comms::to_feature_map(comms::decode_message(bytes));
    roundtrip = roundtrip && bit_equal(back.data.data(), f.data.data()) && back.data.shape() == f.data.shape() &&
                back.pose == f.pose && back.grid == f.grid && comms::encode_message(back, 3, 1000 * k) == bytes;
  }
  o.require(roundtrip, "f64 encode/decode round trip is bit-exact");

  const geom::BEVFeatureMap f{random_tensor({4, 16, 12}, rng), geom::Pose2D(5, 5, 0.2), g, 1};
  const auto good = comms::encode_message(f, 1, 0);
  auto magic = good;
  magic[1] ^= 0xff;
  auto flipped = good;
  flipped[comms::kHeaderBytes + 17] ^= 0x01;
  auto padded = good;
  padded.insert(padded.end() - 4, 8, 0);
  const auto k_magic = error_kind_of([&] { comms::decode_message(magic); });
  const auto k_short = error_kind_of([&] { comms::decode_message(std::span(good).first(good.size() - 100)); });
  const auto k_header = error_kind_of([&] { comms::decode_message(std::span(good).first(10)); });
  const auto k_flip = error_kind_of([&] { comms::decode_message(flipped); });
  const auto k_pad = error_kind_of([&] { comms::decode_message(padded); });
  o.require(k_magic == ErrorKind::MalformedMessage, "bad magic -> MalformedMessage");
  o.require(k_short == ErrorKind::Truncated && k_header == ErrorKind::Truncated, "truncation -> Truncated");
  o.require(k_flip == ErrorKind::CorruptPayload, "payload bit flip -> CorruptPayload");
  o.require(k_pad == ErrorKind::MalformedMessage, "trailing bytes -> MalformedMessage");

  // One broadcast, two receivers at different poses.
  comms::LoopbackTransport to_a, to_b;
  to_a.write_frame(good);
  to_b.write_frame(good);
  const auto ra = to_a.read_frame(), rb = to_b.read_frame();
  o.require(ra && rb && *ra == *rb && *ra == good, "receivers get byte-identical messages");
  if (ra && rb) {
    const auto wa = geom::warp_feature_map(comms::to_feature_map(comms::decode_message(*ra)), geom::Pose2D(), g);
    const auto wb = geom::warp_feature_map(comms::to_feature_map(comms::decode_message(*rb)), geom::Pose2D(8, -4, 0.5), g);
    o.require(wa.overlap.count() != wb.overlap.count() || !bit_equal(wa.map.data.data(), wb.map.data.data()),
              "each receiver warps locally into its own frame");
  }

  for (double drop : {0.1, 0.3, 0.5}) {
    comms::LossyChannel ch({drop, 5.0, 10.0, 2024});
    const std::size_t n = 10000;
    for (std::size_t k = 0; k < n; ++k) ch.send({1, 2, 3}, static_cast<std::uint32_t>(k % 4), k * 100);
    const double frac = static_cast<double>(ch.step(std::uint64_t{1} << 40).size()) / static_cast<double>(n);
    o.note("drop " + fmt(drop) + " delivered " + fmt(frac));
    o.require(std::abs(frac - (1.0 - drop)) <= 0.02, "delivered fraction within 2% at drop " + fmt(drop));
  }
  const double dt = seconds_since(t0);
  o.require(dt < 30.0, "runtime < 30 s (" + fmt(dt) + " s)");
  return o;
}

void write_results(const fs::path& path, const std::vector<metrics::EvalResult>& results) {
  std::ofstream os(path, std::ios::app);
  for (const auto& r : results) os << r.to_json() << "\n";
}

std::string ap_line(const metrics::EvalResult& r) {
  return r.mode + " AP@0.5 " + fmt(r.ap_50) + " AP@0.7 " + fmt(r.ap_70);
}

Outcome criterion_8(const fs::path& out, bool verbose) {
  Outcome o;
  const config::ExperimentConfig cfg = config::preset("desk");
  config::ExperimentConfig solo = cfg;
  solo.train.lambda = 1.0;
  config::ExperimentConfig maxout = cfg;
  maxout.model.dpnet.fusion = dpnet::FusionKind::Maxout;

  const experiment::Dataset train = experiment::training_set(cfg, cfg.train.scenes);
  const experiment::Dataset test = experiment::occlusion_test_set(cfg, cfg.eval.scenes);
  auto log = [&](const std::string& tag) {
    return [&, tag](const pipeline::EpochRecord& r) {
      if (verbose) std::cerr << "  [" << tag << "] epoch " << r.epoch << " loss " << r.mean_total << "\n";
    };
  };

  auto t0 = Clock::now();
  experiment::TrainedModel joint = experiment::train_model(cfg, train, cfg.train.epochs, log("joint"));
  const double joint_s = seconds_since(t0);
  experiment::TrainedModel base = experiment::train_model(solo, train, solo.train.epochs, log("individual-only"));
  experiment::TrainedModel mx = experiment::train_model(maxout, train, maxout.train.epochs, log("maxout"));

  experiment::EvalOptions eo;
  eo.maxout_model = &mx.model;
  const experiment::EvalSuite suite = experiment::evaluate_model(cfg, joint.model, test, eo);
  experiment::EvalOptions only_ind;
  only_ind.cooperative = only_ind.late_fusion = only_ind.maxout = false;
  const experiment::EvalSuite base_suite = experiment::evaluate_model(solo, base.model, test, only_ind);
  write_results(out / "e2e_results.jsonl", suite.results);
  write_results(out / "e2e_results.jsonl", base_suite.results);

  const double ind = suite.get("individual").ap_50, coop = suite.get("cooperative").ap_50;
  const double late = suite.get("late_fusion").ap_50, mxo = suite.get("maxout_fusion").ap_50;
  const double solo_ind = base_suite.get("individual").ap_50;
  for (const auto& r : suite.results) o.note(ap_line(r));
  o.note("individual-only baseline AP@0.5 " + fmt(solo_ind));
  o.note(std::to_string(train.samples.size()) + " training scenes, " + std::to_string(test.samples.size()) +
         " test scenes, joint training " + fmt(joint_s) + " s");
  o.require(train.samples.size() == 400 && test.samples.size() == 100, "400 training / 100 test scenes");
  o.require(coop - ind >= 0.05, "(a) cooperative exceeds individual by >= 5 points (" + fmt(100 * (coop - ind)) + ")");
  o.require(coop >= mxo, "(b) complementary >= maxout");
  o.require(std::abs(ind - solo_ind) <= 0.03,
            "(c) joint individual within 3 points of individual-only (" + fmt(100 * (ind - solo_ind)) + ")");
  o.require(coop >= late - 0.02, "(d) cooperative >= late fusion - 2 points (" + fmt(100 * (coop - late)) + ")");
  o.require(joint_s < 15 * 60, "joint training < 15 min");
  return o;
}

Outcome criterion_9(const fs::path& out, bool verbose) {
  Outcome o;
  const auto t0 = Clock::now();
  const config::ExperimentConfig cfg = config::preset("desk");
  std::vector<experiment::AblationCell> cells = experiment::run_ablation(cfg, {}, [&](const experiment::AblationCell& c) {
    if (verbose) std::cerr << "  [ablate] " << c.sweep << "=" << c.value << " AP@0.5 " << c.result.ap_50 << "\n";
  });
  const double dt = seconds_since(t0);
  std::vector<metrics::EvalResult> rows;
  std::map<std::string, std::set<std::string>> seen;
  for (const auto& c : cells) {
    seen[c.sweep].insert(c.value);
    rows.push_back(c.result);
    const bool complete = c.result.config_hash == c.config.hash() && c.result.config_hash != 0 &&
                          c.result.seeds.size() == cfg.ablation.test_scenes &&
                          c.result.scenes_50.size() == cfg.ablation.test_scenes &&
                          c.result.scenes_70.size() == cfg.ablation.test_scenes && !c.result.mode.empty();
    o.require(complete, "complete EvalResult for " + c.sweep + "=" + c.value);
    o.note(c.sweep + "=" + c.value + " AP@0.5 " + fmt(c.result.ap_50) + " AP@0.7 " + fmt(c.result.ap_70) +
           " config " + std::to_string(c.result.config_hash));
  }
  write_results(out / "ablation_results.jsonl", rows);
  const std::map<std::string, std::size_t> expected{{"complementary", 2}, {"reduction", 3}, {"layers", 3}, {"kernel", 3}};
  for (const auto& [sweep, n] : expected) {
    o.require(seen[sweep].size() == n, sweep + " has " + std::to_string(n) + " cells");
  }
  o.require(cells.size() == 11, "11 result rows");
  o.require(cfg.ablation.train_scenes == 100, "ablation budget is 100 training scenes");
  o.require(dt < 45 * 60, "runtime < 45 min (" + fmt(dt) + " s)");
  return o;
}

Outcome criterion_10(const fs::path& out) {
  Outcome o;
  config::ExperimentConfig cfg = config::preset("desk");
  cfg.train.scenes = 24;
  cfg.train.epochs = 2;
  cfg.eval.scenes = 12;
  cfg.comms.channel.drop_prob = 0.3;
  cfg.comms.channel.jitter_ms = 40.0;
  auto run = [&](const std::string& name) {
    experiment::RunOptions ro;
    ro.out_dir = out / name;
    fs::remove_all(ro.out_dir);
    experiment::run_experiment(cfg, experiment::Mode::Train, ro);
    const auto results = experiment::run_experiment(cfg, experiment::Mode::Eval, ro);
    std::ifstream is(ro.out_dir / "model.ckpt", std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::vector<std::uint64_t> hashes;
    for (const auto& r : results) hashes.push_back(r.hash());
    return std::make_pair(bytes, hashes);
  };
  const auto a = run("determinism_a");
  const auto b = run("determinism_b");
  o.note("checkpoint " + std::to_string(a.first.size()) + " bytes, " + std::to_string(a.second.size()) + " eval hashes");
  o.require(!a.first.empty() && a.first == b.first, "bit-identical checkpoints");
  o.require(a.second.size() == 4 && a.second == b.second, "identical EvalResult hashes");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sicp acceptance criteria"};
  std::string only;
  std::string out_dir = "acceptance_out";
  bool verbose = false;
  app.add_option("--criteria", only, "comma-separated subset, e.g. 1,2,3 (default: all)");
  app.add_option("--out", out_dir, "directory for result records");
  app.add_flag("-v,--verbose", verbose, "print training progress to stderr");
  CLI11_PARSE(app, argc, argv);

  std::set<int> wanted;
  if (only.empty()) {
    for (int k = 1; k <= 10; ++k) wanted.insert(k);
  } else {
    std::stringstream ss(only);
    std::string item;
    while (std::getline(ss, item, ',')) wanted.insert(std::stoi(item));
  }
  const fs::path out(out_dir);
  fs::create_directories(out);

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> table{
      {1, {"DP-Net parameter count", criterion_1}},
      {2, {"gradient suite", criterion_2}},
      {3, {"fusion invariants", criterion_3}},
      {4, {"gradient preservation", criterion_4}},
      {5, {"geometry oracles", criterion_5}},
      {6, {"metric oracles", criterion_6}},
      {7, {"wire format", criterion_7}},
      {8, {"desk-scale end-to-end", [&] { return criterion_8(out, verbose); }}},
      {9, {"ablation harness", [&] { return criterion_9(out, verbose); }}},
      {10, {"determinism", [&] { return criterion_10(out); }}},
  };

  bool all = true;
  for (int k : wanted) {
    const auto it = table.find(k);
    if (it == table.end()) {
      std::cerr << "unknown criterion " << k << "\n";
      return 2;
    }
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    all = all && o.pass;
    std::cout << "criterion " << k << " " << (o.pass ? "PASS" : "FAIL") << " " << it->second.first << " ["
              << fmt(seconds_since(t0)) << " s]\n";
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  }
  return all ? 0 : 1;
}
