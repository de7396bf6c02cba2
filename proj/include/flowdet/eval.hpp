#pragma once

#include <chrono>
#include <map>

#include "flowdet/boxes.hpp"

namespace flowdet {

// Evaluation-side records: detections carry a confidence score, ground truth
// carries category and area.
struct EvalDetection {
  int64_t image_id = 0;
  int category = 0;
  double score = 0.0;
  BoxXYWH box;
};

struct EvalGroundTruth {
  int64_t image_id = 0;
  int category = 0;
  BoxXYWH box;
  double area = 0.0;  // box area unless the source provides one
};

struct PrCurve {
  int category = 0;
  std::vector<double> precision;  // 101-point interpolated precision at IoU 0.5
};

struct ApReport {
  double ap = 0.0;    // mean over IoU 0.50:0.05:0.95
  double ap50 = 0.0;  // IoU 0.50
  double ap_s = 0.0;  // objects with area < 32^2
  double ap_m = 0.0;  // 32^2 <= area <= 96^2, kept for strata completeness
  double ap_l = 0.0;  // area > 96^2
  std::vector<double> ap_per_threshold;  // 10 values, thresholds ascending
  std::vector<PrCurve> pr_curves;
};

namespace detail {

constexpr double kSmallAreaMax = 32.0 * 32.0;
constexpr double kLargeAreaMin = 96.0 * 96.0;

struct RankedDet {
  double score;
  int64_t image_id;
  BoxXYXY box;
  size_t order;  // insertion order, stable tie-break
};

// Score-descending greedy matching of one category at one IoU threshold,
// producing the 101-point interpolated precision curve and its AP.
// Each ground-truth box is matched at most once; a detection takes the
// highest-IoU unmatched ground truth at or above the threshold.
inline std::pair<double, std::vector<double>> category_ap(
    std::vector<RankedDet> dets, const std::map<int64_t, std::vector<BoxXYXY>>& gts_by_image,
    int64_t total_gt, double iou_thr) {
  std::vector<double> curve(101, 0.0);
  if (total_gt == 0) return {0.0, curve};
  std::stable_sort(dets.begin(), dets.end(), [](const RankedDet& a, const RankedDet& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.order < b.order;
  });
  std::map<int64_t, std::vector<bool>> used;
  for (const auto& [img, boxes] : gts_by_image) used[img].assign(boxes.size(), false);
  std::vector<double> recall, precision;
  int64_t tp = 0, fp = 0;
  for (const auto& det : dets) {
    auto it = gts_by_image.find(det.image_id);
    int best = -1;
    double best_iou = 0.0;
    if (it != gts_by_image.end()) {
      const auto& boxes = it->second;
      const auto& flags = used[det.image_id];
      for (size_t g = 0; g < boxes.size(); ++g) {
        if (flags[g]) continue;
        const double v = iou(det.box, boxes[g]);
        if (v < iou_thr) continue;
        if (best < 0 || v > best_iou) {  // ties keep the first ground truth
          best_iou = v;
          best = int(g);
        }
      }
    }
    if (best >= 0) {
      used[det.image_id][size_t(best)] = true;
      tp++;
    } else {
      fp++;
    }
    recall.push_back(double(tp) / double(total_gt));
    precision.push_back(double(tp) / double(tp + fp));
  }
  // right-to-left precision envelope, then sample the 101 recall grid
  for (int64_t i = int64_t(precision.size()) - 2; i >= 0; --i)
    precision[size_t(i)] = std::max(precision[size_t(i)], precision[size_t(i + 1)]);
  double ap = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = double(r) / 100.0;
    double p = 0.0;
    for (size_t i = 0; i < recall.size(); ++i) {
      if (recall[i] >= level) {
        p = precision[i];
        break;
      }
    }
    curve[size_t(r)] = p;
    ap += p;
  }
  return {ap / 101.0, curve};
}

}  // namespace detail

// COCO-convention evaluation: greedy score-descending matching per category
// and IoU threshold, 101-point interpolated precision, means taken over
// categories that have ground truth. Size strata filter both the ground
// truth and the detections by area.
inline ApReport ap_evaluate(const std::vector<EvalDetection>& dets,
                            const std::vector<EvalGroundTruth>& gts,
                            const std::vector<int>& categories) {
  for (const auto& d : dets) {
    if (std::find(categories.begin(), categories.end(), d.category) == categories.end())
      throw ValueError("ap_evaluate: unknown category id " + std::to_string(d.category));
  }
  for (const auto& g : gts) {
    if (std::find(categories.begin(), categories.end(), g.category) == categories.end())
      throw ValueError("ap_evaluate: unknown category id " + std::to_string(g.category));
  }
  std::vector<double> thresholds;
  for (int i = 0; i < 10; ++i) thresholds.push_back(0.5 + 0.05 * i);

  enum class Stratum { all, small, medium, large };
  auto in_stratum = [](double area, Stratum s) {
    switch (s) {
      case Stratum::all: return true;
      case Stratum::small: return area < detail::kSmallAreaMax;
      case Stratum::medium:
        return area >= detail::kSmallAreaMax && area <= detail::kLargeAreaMin;
      case Stratum::large: return area > detail::kLargeAreaMin;
    }
    return false;
  };

  ApReport report;
  auto stratum_ap = [&](Stratum s, double thr, bool collect_curves) {
    double acc = 0.0;
    int64_t cats_with_gt = 0;
    for (int cat : categories) {
      std::map<int64_t, std::vector<BoxXYXY>> gt_by_image;
      int64_t total_gt = 0;
      for (const auto& g : gts) {
        if (g.category != cat || !in_stratum(g.area, s)) continue;
        gt_by_image[g.image_id].push_back(g.box.to_xyxy());
        total_gt++;
      }
      if (total_gt == 0) continue;
      cats_with_gt++;
      std::vector<detail::RankedDet> cat_dets;
      for (size_t i = 0; i < dets.size(); ++i) {
        const auto& d = dets[i];
        if (d.category != cat || !in_stratum(d.box.area(), s)) continue;
        cat_dets.push_back({d.score, d.image_id, d.box.to_xyxy(), i});
      }
      auto [ap, curve] = detail::category_ap(std::move(cat_dets), gt_by_image, total_gt, thr);
      acc += ap;
      if (collect_curves) report.pr_curves.push_back({cat, std::move(curve)});
    }
    return cats_with_gt ? acc / double(cats_with_gt) : 0.0;
  };

  double mean_all = 0.0;
  for (double thr : thresholds) {
    const double ap_t = stratum_ap(Stratum::all, thr, thr == 0.5);
    report.ap_per_threshold.push_back(ap_t);
    mean_all += ap_t;
  }
  report.ap = mean_all / double(thresholds.size());
  report.ap50 = report.ap_per_threshold[0];
  double mean_s = 0, mean_m = 0, mean_l = 0;
  for (double thr : thresholds) {
    mean_s += stratum_ap(Stratum::small, thr, false);
    mean_m += stratum_ap(Stratum::medium, thr, false);
    mean_l += stratum_ap(Stratum::large, thr, false);
  }
  report.ap_s = mean_s / double(thresholds.size());
  report.ap_m = mean_m / double(thresholds.size());
  report.ap_l = mean_l / double(thresholds.size());
  return report;
}

// ---------------------------------------------------------------------------
// latency bench
// ---------------------------------------------------------------------------

struct LatencyReport {
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double fps = 0.0;  // 1000 / mean_ms
  int64_t iters = 0;
};

// Wall-clock statistics of repeated single calls; warmup iterations are
// excluded from the measurement.
template <typename Fn>
inline LatencyReport latency_bench(Fn&& fn, int64_t iters, int64_t warmup = 10) {
  if (warmup < 10) warmup = 10;
  if (iters < 1) throw ValueError("latency_bench: iters must be >= 1");
  for (int64_t i = 0; i < warmup; ++i) fn();
  std::vector<double> ms(static_cast<size_t>(iters));
  for (int64_t i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ms[size_t(i)] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  LatencyReport rep;
  rep.iters = iters;
  for (double v : ms) rep.mean_ms += v;
  rep.mean_ms /= double(iters);
  std::sort(ms.begin(), ms.end());
  rep.p50_ms = ms[size_t((iters - 1) / 2)];
  rep.p95_ms = ms[size_t(std::min<int64_t>(iters - 1, (iters * 95) / 100))];
  rep.fps = 1000.0 / rep.mean_ms;
  return rep;
}

}  // namespace flowdet
