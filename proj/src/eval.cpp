#include "tabledet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"

namespace tabledet {

namespace {

const double kIouThresholds[] = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};

double harmonic_f1(double p, double r) { return (p + r) > 0 ? 2 * p * r / (p + r) : 0.0; }

}  // namespace

std::vector<bool> match_detections(std::vector<ScoredBox> preds,
                                   const std::vector<BoxCxCyWh>& gts, double iou_thr) {
  if (iou_thr <= 0 || iou_thr > 1) throw ContractError("match_detections: bad IoU threshold");
  std::stable_sort(preds.begin(), preds.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  std::vector<bool> claimed(gts.size(), false);
  std::vector<bool> flags(preds.size(), false);
  for (size_t i = 0; i < preds.size(); ++i) {
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      const double v = iou(preds[i].box, gts[g]);
      if (v >= iou_thr && v > best_iou) {  // ties keep the lowest GT index
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      claimed[static_cast<size_t>(best)] = true;
      flags[i] = true;
    }
  }
  return flags;
}

double average_precision(const std::vector<bool>& flags, int n_gt) {
  if (n_gt < 0) throw ContractError("average_precision: negative GT count");
  if (n_gt == 0) return 0.0;
  const size_t n = flags.size();
  std::vector<double> prec(n), rec(n);
  int tp = 0;
  for (size_t i = 0; i < n; ++i) {
    if (flags[i]) ++tp;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp) / n_gt;
  }
  // Monotone non-increasing from the right.
  for (size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double acc = 0;
  size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double target = r / 100.0;
    while (j < n && rec[j] < target) ++j;
    acc += j < n ? prec[j] : 0.0;
  }
  return acc / 101.0;
}

namespace {

struct PooledFlag {
  double score;
  bool tp;
};

// Score-ordered pooled flags across images at one IoU threshold, with a
// per-image cap on detections.
std::vector<PooledFlag> pooled_flags(const EvalInstance& inst, double thr, int max_dets,
                                     int* matched_out = nullptr) {
  std::vector<PooledFlag> pool;
  int matched = 0;
  for (size_t im = 0; im < inst.preds.size(); ++im) {
    std::vector<ScoredBox> preds = inst.preds[im];
    std::stable_sort(preds.begin(), preds.end(),
                     [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
    if (static_cast<int>(preds.size()) > max_dets) preds.resize(static_cast<size_t>(max_dets));
    std::vector<bool> flags = match_detections(preds, inst.gts[im], thr);
    for (size_t i = 0; i < preds.size(); ++i) {
      pool.push_back({preds[i].score, flags[i]});
      if (flags[i]) ++matched;
    }
  }
  std::stable_sort(pool.begin(), pool.end(),
                   [](const PooledFlag& a, const PooledFlag& b) { return a.score > b.score; });
  if (matched_out) *matched_out = matched;
  return pool;
}

}  // namespace

MetricsReport evaluate(const EvalInstance& inst, double score_cut, int max_dets) {
  MetricsReport rep;
  int total_gt = 0;
  for (const auto& g : inst.gts) total_gt += static_cast<int>(g.size());
  double ap_sum = 0, ar_sum = 0;
  for (double thr : kIouThresholds) {
    int matched = 0;
    std::vector<PooledFlag> pool = pooled_flags(inst, thr, max_dets, &matched);
    std::vector<bool> flags;
    flags.reserve(pool.size());
    for (const auto& p : pool) flags.push_back(p.tp);
    const double ap = average_precision(flags, total_gt);
    ap_sum += ap;
    ar_sum += total_gt > 0 ? static_cast<double>(matched) / total_gt : 0.0;
    if (thr == 0.50) rep.ap50 = ap;
    if (thr == 0.75) rep.ap75 = ap;
  }
  rep.map = ap_sum / 10.0;
  rep.ar = ar_sum / 10.0;
  for (double thr : {0.8, 0.9}) {
    int tp = 0, fp = 0, fn = 0;
    for (size_t im = 0; im < inst.preds.size(); ++im) {
      std::vector<ScoredBox> preds;
      for (const auto& p : inst.preds[im])
        if (p.score >= score_cut) preds.push_back(p);
      std::vector<bool> flags = match_detections(preds, inst.gts[im], thr);
      for (bool f : flags) f ? ++tp : ++fp;
      int img_tp = 0;
      for (bool f : flags) img_tp += f ? 1 : 0;
      fn += static_cast<int>(inst.gts[im].size()) - img_tp;
    }
    PrfEntry e;
    e.iou_thr = thr;
    e.score_cut = score_cut;
    e.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    e.recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    e.f1 = harmonic_f1(e.precision, e.recall);
    rep.prf.push_back(e);
  }
  return rep;
}

MetricsReport evaluate_reference(const EvalInstance& inst, double score_cut, int max_dets) {
  // Independently written brute-force path: naive per-prediction GT scan,
  // direct max-precision lookup per recall sample.
  MetricsReport rep;
  int total_gt = 0;
  for (const auto& g : inst.gts) total_gt += static_cast<int>(g.size());
  double ap_sum = 0, ar_sum = 0;
  for (double thr : kIouThresholds) {
    std::vector<std::pair<double, bool>> pool;
    int matched_total = 0;
    for (size_t im = 0; im < inst.preds.size(); ++im) {
      std::vector<ScoredBox> preds = inst.preds[im];
      std::stable_sort(preds.begin(), preds.end(),
                       [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
      if (static_cast<int>(preds.size()) > max_dets) preds.resize(static_cast<size_t>(max_dets));
      std::vector<bool> taken(inst.gts[im].size(), false);
      for (const auto& p : preds) {
        int pick = -1;
        double best = thr - 1e-15;
        for (size_t g = 0; g < inst.gts[im].size(); ++g) {
          if (taken[g]) continue;
          const double v = iou(p.box, inst.gts[im][g]);
          if (v >= thr && v > best) {
            best = v;
            pick = static_cast<int>(g);
          }
        }
        if (pick >= 0) {
          taken[static_cast<size_t>(pick)] = true;
          pool.emplace_back(p.score, true);
          ++matched_total;
        } else {
          pool.emplace_back(p.score, false);
        }
      }
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    double ap = 0;
    if (total_gt > 0) {
      std::vector<double> precs, recs;
      int tp = 0;
      for (size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].second) ++tp;
        precs.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        recs.push_back(static_cast<double>(tp) / total_gt);
      }
      double acc = 0;
      for (int r = 0; r <= 100; ++r) {
        const double target = r / 100.0;
        double best = 0;
        for (size_t i = 0; i < precs.size(); ++i)
          if (recs[i] >= target) best = std::max(best, precs[i]);
        acc += best;
      }
      ap = acc / 101.0;
    }
    ap_sum += ap;
    ar_sum += total_gt > 0 ? static_cast<double>(matched_total) / total_gt : 0.0;
    if (thr == 0.50) rep.ap50 = ap;
    if (thr == 0.75) rep.ap75 = ap;
  }
  rep.map = ap_sum / 10.0;
  rep.ar = ar_sum / 10.0;
  for (double thr : {0.8, 0.9}) {
    int tp = 0, fp = 0, total = 0;
    for (size_t im = 0; im < inst.preds.size(); ++im) {
      std::vector<ScoredBox> preds;
      for (const auto& p : inst.preds[im])
        if (p.score >= score_cut) preds.push_back(p);
      std::vector<bool> flags = match_detections(preds, inst.gts[im], thr);
      for (bool f : flags) f ? ++tp : ++fp;
      total += static_cast<int>(inst.gts[im].size());
    }
    PrfEntry e;
    e.iou_thr = thr;
    e.score_cut = score_cut;
    e.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    e.recall = total > 0 ? static_cast<double>(tp) / total : 0.0;
    e.f1 = harmonic_f1(e.precision, e.recall);
    rep.prf.push_back(e);
  }
  return rep;
}

EvalInstance load_instance(const AnnotationFile& preds, const AnnotationFile& gts) {
  std::map<int, size_t> id_to_idx;
  EvalInstance inst;
  inst.preds.resize(gts.images.size());
  inst.gts.resize(gts.images.size());
  for (size_t i = 0; i < gts.images.size(); ++i) id_to_idx[gts.images[i].id] = i;
  for (const auto& a : gts.annotations) {
    auto it = id_to_idx.find(a.image_id);
    if (it == id_to_idx.end()) throw ParseError("ground truth references unknown image id");
    inst.gts[it->second].push_back(a.box);
  }
  for (const auto& a : preds.annotations) {
    auto it = id_to_idx.find(a.image_id);
    if (it == id_to_idx.end())
      throw ParseError("prediction references unknown image id " + std::to_string(a.image_id));
    inst.preds[it->second].push_back({a.box, a.score >= 0 ? a.score : 1.0});
  }
  return inst;
}

MetricsReport coco_report(const std::string& pred_file, const std::string& gt_file) {
  AnnotationFile preds = read_annotations(pred_file);
  AnnotationFile gts = read_annotations(gt_file);
  return evaluate(load_instance(preds, gts));
}

PrfEntry prf_at_iou(const std::string& pred_file, const std::string& gt_file, double thr,
                    double score_cut) {
  if (thr <= 0 || thr > 1) throw ContractError("prf_at_iou: bad threshold");
  AnnotationFile preds = read_annotations(pred_file);
  AnnotationFile gts = read_annotations(gt_file);
  EvalInstance inst = load_instance(preds, gts);
  int tp = 0, fp = 0, total = 0;
  for (size_t im = 0; im < inst.preds.size(); ++im) {
    std::vector<ScoredBox> kept;
    for (const auto& p : inst.preds[im])
      if (p.score >= score_cut) kept.push_back(p);
    std::vector<bool> flags = match_detections(kept, inst.gts[im], thr);
    for (bool f : flags) f ? ++tp : ++fp;
    total += static_cast<int>(inst.gts[im].size());
  }
  PrfEntry e;
  e.iou_thr = thr;
  e.score_cut = score_cut;
  e.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  e.recall = total > 0 ? static_cast<double>(tp) / total : 0.0;
  e.f1 = harmonic_f1(e.precision, e.recall);
  return e;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j = {{"mAP", map}, {"AP50", ap50}, {"AP75", ap75}, {"AR", ar}};
  j["prf"] = nlohmann::json::array();
  for (const auto& e : prf)
    j["prf"].push_back({{"iou_thr", e.iou_thr},
                        {"precision", e.precision},
                        {"recall", e.recall},
                        {"f1", e.f1},
                        {"score_cut", e.score_cut}});
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  MetricsReport r;
  r.map = j.at("mAP").get<double>();
  r.ap50 = j.at("AP50").get<double>();
  r.ap75 = j.at("AP75").get<double>();
  r.ar = j.at("AR").get<double>();
  for (const auto& e : j.value("prf", nlohmann::json::array())) {
    PrfEntry p;
    p.iou_thr = e.at("iou_thr").get<double>();
    p.precision = e.at("precision").get<double>();
    p.recall = e.at("recall").get<double>();
    p.f1 = e.at("f1").get<double>();
    p.score_cut = e.at("score_cut").get<double>();
    r.prf.push_back(p);
  }
  return r;
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "metric     value\n";
  os << "mAP        " << map << "\n";
  os << "AP50       " << ap50 << "\n";
  os << "AP75       " << ap75 << "\n";
  os << "AR         " << ar << "\n";
  for (const auto& e : prf)
    os << "P/R/F1@" << e.iou_thr << "  " << e.precision << " " << e.recall << " " << e.f1
       << " (score>=" << e.score_cut << ")\n";
  return os.str();
}

}  // namespace tabledet
