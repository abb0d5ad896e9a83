#include "sicp/metrics.hpp"

#include <algorithm>
#include <json.hpp>
#include <numeric>

#include "sicp/error.hpp"
#include "sicp/hash.hpp"

namespace sicp::metrics {

namespace {

struct Ranked {
  double score;
  std::size_t scene;
  std::size_t index;
};

nlohmann::json curve_json(const std::vector<PRPoint>& c) {
  auto out = nlohmann::json::array();
  for (const auto& p : c) out.push_back({p.precision, p.recall});
  return out;
}

nlohmann::json counts_json(const std::vector<SceneCounts>& s) {
  auto out = nlohmann::json::array();
  for (const auto& c : s) out.push_back({{"seed", c.seed}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}});
  return out;
}

}  // namespace

APResult average_precision(const SceneBoxes& preds, const SceneBoxes& gts, double iou_thresh,
                           const std::vector<std::uint64_t>& scene_seeds) {
  if (preds.size() != gts.size()) {
    throw Error(ErrorKind::ShapeMismatch, std::to_string(preds.size()) + " prediction scenes vs " +
                                              std::to_string(gts.size()) + " ground-truth scenes");
  }
  if (!scene_seeds.empty() && scene_seeds.size() != gts.size()) {
    throw Error(ErrorKind::ShapeMismatch, std::to_string(scene_seeds.size()) + " seeds for " +
                                              std::to_string(gts.size()) + " scenes");
  }
  std::size_t total_gt = 0;
  for (const auto& g : gts) total_gt += g.size();
  if (total_gt == 0) throw Error(ErrorKind::UndefinedRecall, "no ground-truth boxes in the evaluation set");

  std::vector<Ranked> order;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (std::size_t k = 0; k < preds[s].size(); ++k) order.push_back({preds[s][k].score, s, k});
  }
  std::stable_sort(order.begin(), order.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  APResult r;
  r.scenes.resize(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s) r.scenes[s].seed = s < scene_seeds.size() ? scene_seeds[s] : s;
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s) used[s].assign(gts[s].size(), false);

  std::size_t tp = 0, fp = 0;
  std::vector<std::size_t> tp_at;
  tp_at.reserve(order.size());
  for (const Ranked& p : order) {
    const DetectionBox& box = preds[p.scene][p.index];
    double best = -1.0;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < gts[p.scene].size(); ++k) {
      if (used[p.scene][k]) continue;
      const double iou = rotated_iou(box, gts[p.scene][k]);
      if (iou >= iou_thresh && iou > best) {
        best = iou;
        best_k = k;
      }
    }
    if (best >= 0.0) {
      used[p.scene][best_k] = true;
      ++tp;
      ++r.scenes[p.scene].tp;
    } else {
      ++fp;
      ++r.scenes[p.scene].fp;
    }
    tp_at.push_back(tp);
    r.curve.push_back({static_cast<double>(tp) / static_cast<double>(tp + fp),
                       static_cast<double>(tp) / static_cast<double>(total_gt)});
  }
  for (std::size_t s = 0; s < gts.size(); ++s) r.scenes[s].fn = gts[s].size() - r.scenes[s].tp;

  // All-point interpolation: precision envelope from the right, summed over
  // recall steps. Recall only moves on a true positive, so each step is
  // 1/total_gt; the envelope is kept as an exact tp/n ratio and the sum runs in
  // extended precision so exact answers like 5/6 round correctly.
  std::size_t env_tp = 0, env_n = 1;
  std::vector<std::pair<std::size_t, std::size_t>> env(tp_at.size());
  for (std::size_t k = tp_at.size(); k-- > 0;) {
    const std::size_t n = k + 1;
    if (tp_at[k] * env_n > env_tp * n) {
      env_tp = tp_at[k];
      env_n = n;
    }
    env[k] = {env_tp, env_n};
  }
  long double sum = 0.0L;
  for (std::size_t k = 0; k < tp_at.size(); ++k) {
    const std::size_t step = tp_at[k] - (k ? tp_at[k - 1] : 0);
    if (step) sum += static_cast<long double>(env[k].first) / static_cast<long double>(env[k].second);
  }
  r.ap = static_cast<double>(sum / static_cast<long double>(total_gt));
  return r;
}

std::vector<DetectionBox> late_fusion_baseline(const std::vector<DetectionBox>& ego_preds,
                                               const std::vector<DetectionBox>& sender_preds,
                                               const geom::Pose2D& sender_to_ego, double nms_iou) {
  std::vector<DetectionBox> all = ego_preds;
  for (const auto& b : sender_preds) all.push_back(b.transformed(sender_to_ego));
  return apply_nms(all, nms_iou);
}

std::uint64_t EvalResult::hash() const { return fnv1a64(to_json()); }

std::string EvalResult::to_json() const {
  nlohmann::json j;
  j["mode"] = mode;
  j["ap_50"] = ap_50;
  j["ap_70"] = ap_70;
  j["pr_50"] = curve_json(pr_50);
  j["pr_70"] = curve_json(pr_70);
  j["scenes_50"] = counts_json(scenes_50);
  j["scenes_70"] = counts_json(scenes_70);
  j["config_hash"] = config_hash;
  j["seeds"] = seeds;
  return j.dump();
}

EvalResult evaluate(const std::string& mode, const SceneBoxes& preds, const SceneBoxes& gts,
                    const std::vector<std::uint64_t>& seeds, std::uint64_t config_hash) {
  EvalResult e;
  e.mode = mode;
  APResult a50 = average_precision(preds, gts, 0.5, seeds);
  APResult a70 = average_precision(preds, gts, 0.7, seeds);
  e.ap_50 = a50.ap;
  e.ap_70 = a70.ap;
  e.pr_50 = std::move(a50.curve);
  e.pr_70 = std::move(a70.curve);
  e.scenes_50 = std::move(a50.scenes);
  e.scenes_70 = std::move(a70.scenes);
  e.config_hash = config_hash;
  e.seeds = seeds;
  return e;
}

}  // namespace sicp::metrics
