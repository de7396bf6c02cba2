#pragma once

#include "flowdet/detector.hpp"
#include "flowdet/hungarian.hpp"

namespace flowdet {

struct TargetBox {
  int class_id = 0;
  BoxCXCYWH box;  // normalized
};

using GroundTruth = std::vector<TargetBox>;

struct LossBreakdown {
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double total = 0.0;
};

// Differentiable pairwise GIoU of aligned box rows (both [M,4] cx,cy,w,h).
// Built from primitive min/max/relu ops so gradients come for free.
template <typename T>
inline Tensor<T> giou_pairwise(const Tensor<T>& pred, const Tensor<T>& tgt) {
  auto corners = [](const Tensor<T>& b) {
    auto parts = split(b, 1, 4);  // cx, cy, w, h as [M,1]
    Tensor<T> hw = scale(parts[2], 0.5);
    Tensor<T> hh = scale(parts[3], 0.5);
    return std::array<Tensor<T>, 4>{sub(parts[0], hw), sub(parts[1], hh), add(parts[0], hw),
                                    add(parts[1], hh)};
  };
  auto [ax1, ay1, ax2, ay2] = corners(pred);
  auto [bx1, by1, bx2, by2] = corners(tgt);
  Tensor<T> iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)));
  Tensor<T> ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)));
  Tensor<T> inter = mul(iw, ih);
  Tensor<T> area_a = mul(sub(ax2, ax1), sub(ay2, ay1));
  Tensor<T> area_b = mul(sub(bx2, bx1), sub(by2, by1));
  Tensor<T> uni = sub(add(area_a, area_b), inter);
  Tensor<T> ew = sub(maximum(ax2, bx2), minimum(ax1, bx1));
  Tensor<T> eh = sub(maximum(ay2, by2), minimum(ay1, by1));
  Tensor<T> enc = mul(ew, eh);
  return sub(div(inter, uni), div(sub(enc, uni), enc));
}

template <typename T>
struct SetLossResult {
  Tensor<T> total;  // scalar graph node
  LossBreakdown values;
  std::vector<MatchResult> matches;  // one per image
};

// Matching cost between every query and target of one image:
//   lambda_cls * (-p_q(class_t)) + lambda_l1 * |b_q - b_t|_1
//   + lambda_giou * (1 - GIoU(b_q, b_t))
template <typename T>
inline std::vector<std::vector<double>> matching_cost(const BatchOutput<T>& out, int64_t image,
                                                      const GroundTruth& targets,
                                                      const ModelConfig& cfg) {
  const int64_t q = out.logits.dim(1), nc = out.logits.dim(2);
  std::vector<std::vector<double>> cost(static_cast<size_t>(q), std::vector<double>(targets.size(), 0.0));
  for (int64_t j = 0; j < q; ++j) {
    std::vector<double> probs(static_cast<size_t>(nc));
    double mx = -1e300;
    for (int64_t c = 0; c < nc; ++c)
      mx = std::max(mx, double(out.logits[(image * q + j) * nc + c]));
    double z = 0;
    for (int64_t c = 0; c < nc; ++c) {
      probs[size_t(c)] = std::exp(double(out.logits[(image * q + j) * nc + c]) - mx);
      z += probs[size_t(c)];
    }
    for (auto& p : probs) p /= z;
    BoxCXCYWH pb = {double(out.boxes[(image * q + j) * 4 + 0]),
                    double(out.boxes[(image * q + j) * 4 + 1]),
                    double(out.boxes[(image * q + j) * 4 + 2]),
                    double(out.boxes[(image * q + j) * 4 + 3])};
    for (size_t t = 0; t < targets.size(); ++t) {
      const auto& tb = targets[t];
      const double l1 = std::fabs(pb.cx - tb.box.cx) + std::fabs(pb.cy - tb.box.cy) +
                        std::fabs(pb.w - tb.box.w) + std::fabs(pb.h - tb.box.h);
      const double g = giou(pb.to_xyxy(), tb.box.to_xyxy());
      cost[size_t(j)][t] = cfg.lambda_cls * (-probs[size_t(tb.class_id)]) + cfg.lambda_l1 * l1 +
                           cfg.lambda_giou * (1.0 - g);
    }
  }
  return cost;
}

// DETR-style set loss. Matched queries are supervised toward their target's
// class and box; unmatched queries toward the no-object class with a reduced
// weight. Box terms are normalized by the number of matched targets in the
// batch. Matching is treated as a constant of the step: pass `fixed_matches`
// to evaluate the loss under a known assignment (the gradient checker relies
// on this to stay differentiable).
template <typename T>
inline SetLossResult<T> set_loss(const BatchOutput<T>& out,
                                 const std::vector<GroundTruth>& targets, const ModelConfig& cfg,
                                 const std::vector<MatchResult>* fixed_matches = nullptr) {
  const int64_t n = out.logits.dim(0), q = out.logits.dim(1), nc = out.logits.dim(2);
  if (int64_t(targets.size()) != n)
    throw ShapeError("set_loss: need one target list per image");
  SetLossResult<T> result;
  for (int64_t i = 0; i < n; ++i) {
    if (fixed_matches) {
      result.matches.push_back((*fixed_matches)[size_t(i)]);
    } else if (targets[size_t(i)].empty()) {
      result.matches.push_back({});
    } else {
      result.matches.push_back(hungarian_match(matching_cost(out, i, targets[size_t(i)], cfg)));
    }
  }

  // classification over all queries
  std::vector<int> cls_targets(size_t(n * q), int(nc - 1));  // no-object class
  std::vector<double> cls_weights(size_t(n * q), cfg.no_object_weight);
  std::vector<int64_t> matched_rows;
  std::vector<T> matched_tgt;
  for (int64_t i = 0; i < n; ++i) {
    for (auto [qi, ti] : result.matches[size_t(i)].pairs) {
      const auto& tb = targets[size_t(i)][size_t(ti)];
      cls_targets[size_t(i * q + qi)] = tb.class_id;
      cls_weights[size_t(i * q + qi)] = 1.0;
      matched_rows.push_back(i * q + qi);
      matched_tgt.push_back(T(tb.box.cx));
      matched_tgt.push_back(T(tb.box.cy));
      matched_tgt.push_back(T(tb.box.w));
      matched_tgt.push_back(T(tb.box.h));
    }
  }
  Tensor<T> logits_flat = out.logits.reshape({n * q, nc});
  Tensor<T> cls = cross_entropy_rows(logits_flat, cls_targets, cls_weights);

  const int64_t m = int64_t(matched_rows.size());
  Tensor<T> l1_term, giou_term;
  if (m > 0) {
    Tensor<T> boxes_flat = out.boxes.reshape({n * q, 4});
    Tensor<T> pred = select_rows(boxes_flat, matched_rows);
    Tensor<T> tgt = Tensor<T>::from(std::move(matched_tgt), {m, 4});
    l1_term = scale(sum(abs(sub(pred, tgt))), 1.0 / double(m));
    giou_term = scale(sum(sub(Tensor<T>::ones({m, 1}), giou_pairwise(pred, tgt))), 1.0 / double(m));
  } else {
    l1_term = Tensor<T>::scalar(T(0));
    giou_term = Tensor<T>::scalar(T(0));
  }

  result.total = add(add(scale(cls, cfg.lambda_cls), scale(l1_term, cfg.lambda_l1)),
                     scale(giou_term, cfg.lambda_giou));
  result.values.cls = double(cls.item());
  result.values.l1 = double(l1_term.item());
  result.values.giou = double(giou_term.item());
  result.values.total = double(result.total.item());
  return result;
}

}  // namespace flowdet
