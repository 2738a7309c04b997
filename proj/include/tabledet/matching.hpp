#pragma once

#include <vector>

#include "tabledet/model.hpp"

namespace tabledet {

struct CostWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double eos = 0.5;  // no-object class down-weight in the CE loss
};

// One-to-one (query, ground-truth) pairs; unmatched queries are no-object.
struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (query index, gt index)
  double total_cost = 0;
};

struct LossReport {
  double total = 0;
  double supervised = 0;
  double unsupervised = 0;
  double cls = 0;
  double reg = 0;
  double alpha = 0;
};

// Minimum-cost assignment of ground truths to queries; cost per pair is
// -cls*p(class) + l1*||box - gt||_1 + giou*(1 - giou). Computed on values
// only (no gradient through the assignment).
Assignment hungarian_match(const std::vector<Detection>& preds,
                           const std::vector<BoxCxCyWh>& gts, const CostWeights& w);

// Exhaustive-permutation minimum total cost; oracle for small instances.
double brute_force_match_cost(const std::vector<Detection>& preds,
                              const std::vector<BoxCxCyWh>& gts, const CostWeights& w);

// Differentiable set loss for one decoder layer's outputs.
// class_logits: [N x (C+1)], boxes: [N x 4]. L_reg is averaged per GT.
struct SetLoss {
  Tensor cls;
  Tensor reg;
};
SetLoss set_loss(const Tensor& class_logits, const Tensor& boxes,
                 const std::vector<BoxCxCyWh>& gts, const Assignment& assign,
                 const CostWeights& w);

// Detached detections from one layer's outputs, for matching.
std::vector<Detection> layer_detections(const LayerOutput& layer, int n_classes);

// Per-image loss summed over decoder layers (auxiliary supervision), with
// matching recomputed per layer on detached predictions.
Tensor image_loss(const ForwardResult& fwd, const std::vector<BoxCxCyWh>& gts,
                  const CostWeights& w, int n_classes);

// Mean of image_loss over a labeled batch; contract error when empty.
Tensor supervised_loss(const std::vector<ForwardResult>& fwds,
                       const std::vector<std::vector<BoxCxCyWh>>& gts, const CostWeights& w,
                       int n_classes);

// Same shape with pseudo boxes as targets; empty pseudo sets contribute the
// no-object-only classification term.
Tensor unsupervised_loss(const std::vector<ForwardResult>& fwds,
                         const std::vector<std::vector<BoxCxCyWh>>& pseudo,
                         const CostWeights& w, int n_classes);

LossReport total_loss(double l_s, double l_u, double alpha);

}  // namespace tabledet
