#pragma once

#include <string>
#include <vector>

#include "tabledet/geometry.hpp"
#include "tabledet/synthdata.hpp"

namespace tabledet {

struct PrfEntry {
  double iou_thr = 0;
  double precision = 0, recall = 0, f1 = 0;
  double score_cut = 0.5;
};

struct MetricsReport {
  double map = 0;   // mean AP over IoU 0.50:0.95:0.05
  double ap50 = 0;
  double ap75 = 0;
  double ar = 0;    // average recall over the same IoU range, <=100 detections
  std::vector<PrfEntry> prf;  // at IoU 0.8 and 0.9

  std::string to_json() const;
  std::string to_text() const;
  static MetricsReport from_json(const std::string& text);
};

struct ScoredBox {
  BoxCxCyWh box;
  double score = 0;
};

// Greedy matching: predictions in score order claim the highest-IoU
// unclaimed GT with IoU >= thr; IoU ties go to the lowest GT index.
// Returns one TP(true)/FP(false) flag per prediction, score-sorted order.
std::vector<bool> match_detections(std::vector<ScoredBox> preds,
                                   const std::vector<BoxCxCyWh>& gts, double iou_thr);

// COCO 101-point interpolated AP from score-ordered TP/FP flags.
double average_precision(const std::vector<bool>& flags, int n_gt);

// Per-image prediction/GT lists keyed by image id.
struct EvalInstance {
  std::vector<std::vector<ScoredBox>> preds;
  std::vector<std::vector<BoxCxCyWh>> gts;
};

MetricsReport evaluate(const EvalInstance& inst, double score_cut = 0.5,
                       int max_dets = 100);

// Independent brute-force evaluator for cross-checking `evaluate`.
MetricsReport evaluate_reference(const EvalInstance& inst, double score_cut = 0.5,
                                 int max_dets = 100);

// File-level entry points over the annotation JSON schema.
MetricsReport coco_report(const std::string& pred_file, const std::string& gt_file);
PrfEntry prf_at_iou(const std::string& pred_file, const std::string& gt_file, double thr,
                    double score_cut = 0.5);

EvalInstance load_instance(const AnnotationFile& preds, const AnnotationFile& gts);

}  // namespace tabledet
