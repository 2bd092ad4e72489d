#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cfl/geometry.hpp"
#include "cfl/label_space.hpp"

namespace cfl {

struct GroundTruth {
  int class_id = 0;
  BoundingBox box;
  // whether the hidden object is OOD; only used by the pseudo-label diagnostics
  bool ood = false;
};

/// Detections and ground truth of one image.
struct ImageEval {
  std::vector<Detection> detections;
  std::vector<GroundTruth> ground_truth;
};

struct ClassCounts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

struct ApResult {
  std::optional<double> ap;  // empty when the class has neither GT nor detections
  ClassCounts counts;
};

/// All-point interpolated AP of one class over a set of images. Detections are
/// visited by descending score; each takes the unmatched same-class GT of
/// highest IoU when that IoU reaches `iou_thresh`.
inline ApResult average_precision(const std::vector<ImageEval>& images, int class_id, double iou_thresh = 0.5) {
  struct Ranked {
    double score;
    std::size_t image;
    std::size_t index;
  };
  std::vector<Ranked> ranked;
  std::size_t num_gt = 0;
  std::vector<std::vector<char>> used(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    used[i].assign(im.ground_truth.size(), 0);
    for (const auto& g : im.ground_truth)
      if (g.class_id == class_id) ++num_gt;
    for (std::size_t j = 0; j < im.detections.size(); ++j)
      if (im.detections[j].class_id == class_id) ranked.push_back({im.detections[j].score, i, j});
  }
  ApResult res;
  if (num_gt == 0 && ranked.empty()) return res;
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<char> is_tp(ranked.size(), 0);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const auto& im = images[ranked[r].image];
    const auto& det = im.detections[ranked[r].index];
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < im.ground_truth.size(); ++g) {
      if (im.ground_truth[g].class_id != class_id || used[ranked[r].image][g]) continue;
      const double v = iou(det.box, im.ground_truth[g].box);
      if (v > best) {
        best = v;
        arg = g;
      }
    }
    if (best >= iou_thresh) {
      used[ranked[r].image][arg] = 1;
      is_tp[r] = 1;
    }
  }
  for (char t : is_tp) (t ? res.counts.tp : res.counts.fp)++;
  res.counts.fn = static_cast<int>(num_gt) - res.counts.tp;
  if (num_gt == 0) {
    res.ap = 0.0;
    return res;
  }

  std::vector<double> precision(ranked.size());
  std::vector<double> recall(ranked.size());
  int tp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    tp += is_tp[r];
    precision[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
    recall[r] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  // precision envelope, then area under the step function
  for (std::size_t r = ranked.size(); r-- > 1;) precision[r - 1] = std::max(precision[r - 1], precision[r]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    ap += (recall[r] - prev_recall) * precision[r];
    prev_recall = recall[r];
  }
  res.ap = ap;
  return res;
}

/// Single-image convenience overload.
inline std::optional<double> average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                               int class_id, double iou_thresh = 0.5) {
  return average_precision(std::vector<ImageEval>{{dets, gts}}, class_id, iou_thresh).ap;
}

struct EvalResult {
  std::map<int, std::optional<double>> per_class_ap;  // internal label -> AP
  std::map<int, ClassCounts> counts;
  double map_k = 0.0;
  double ap_u = 0.0;
};

/// Per-class AP for every ID class and the merged unknown class; mAP_k is the
/// mean over ID classes with a defined AP. Undefined AP_u is reported as 0.
inline EvalResult evaluate(const std::vector<ImageEval>& images, const LabelSpace& space, double iou_thresh = 0.5) {
  if (images.empty()) throw std::invalid_argument("evaluate: empty test set");
  EvalResult out;
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c <= space.unknown_id(); ++c) {
    const ApResult r = average_precision(images, c, iou_thresh);
    out.per_class_ap[c] = r.ap;
    out.counts[c] = r.counts;
    if (space.is_id(c) && r.ap) {
      sum += *r.ap;
      ++defined;
    }
  }
  out.map_k = defined > 0 ? sum / defined : 0.0;
  out.ap_u = out.per_class_ap[space.unknown_id()].value_or(0.0);
  return out;
}

struct PseudoLabelQuality {
  double precision = 1.0;
  double recall = 0.0;
  double ood_contamination = 0.0;
  int num_id_pseudo = 0;
  int num_contaminated = 0;
};

/// Quality of ID-class pseudo-labels against hidden annotations (GroundTruth
/// entries of OOD objects carry ood=true and the unknown label). Precision and
/// recall count same-class matches at IoU >= 0.5; contamination is the share of
/// ID pseudo-boxes whose best-overlapping hidden object is OOD. With no ID
/// pseudo-boxes precision is reported as 1.
inline PseudoLabelQuality pseudo_label_quality(const std::vector<ImageEval>& images, const LabelSpace& space) {
  PseudoLabelQuality q;
  int tp = 0;
  int num_gt = 0;
  for (const auto& im : images) {
    std::vector<char> used(im.ground_truth.size(), 0);
    for (const auto& g : im.ground_truth)
      if (!g.ood && space.is_id(g.class_id)) ++num_gt;
    std::vector<Detection> dets;
    for (const auto& d : im.detections)
      if (space.is_id(d.class_id)) dets.push_back(d);
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    for (const auto& d : dets) {
      ++q.num_id_pseudo;
      double best_any = 0.0;
      bool best_is_ood = false;
      double best_same = -1.0;
      std::size_t arg = 0;
      for (std::size_t g = 0; g < im.ground_truth.size(); ++g) {
        const auto& gt = im.ground_truth[g];
        const double v = iou(d.box, gt.box);
        if (v > best_any) {
          best_any = v;
          best_is_ood = gt.ood;
        }
        if (!gt.ood && gt.class_id == d.class_id && !used[g] && v > best_same) {
          best_same = v;
          arg = g;
        }
      }
      if (best_any > 0.0 && best_is_ood) ++q.num_contaminated;
      if (best_same >= 0.5) {
        used[arg] = 1;
        ++tp;
      }
    }
  }
  q.precision = q.num_id_pseudo > 0 ? static_cast<double>(tp) / q.num_id_pseudo : 1.0;
  q.recall = num_gt > 0 ? static_cast<double>(tp) / num_gt : 0.0;
  q.ood_contamination = q.num_id_pseudo > 0 ? static_cast<double>(q.num_contaminated) / q.num_id_pseudo : 0.0;
  return q;
}

}  // namespace cfl
