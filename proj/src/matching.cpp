#include "tabledet/matching.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace tabledet {

namespace {

double pair_cost(const Detection& p, const BoxCxCyWh& g, const CostWeights& w) {
  const double l1 = std::abs(p.box.cx - g.cx) + std::abs(p.box.cy - g.cy) +
                    std::abs(p.box.w - g.w) + std::abs(p.box.h - g.h);
  return -w.cls * p.score + w.l1 * l1 + w.giou * (1.0 - giou(p.box, g));
}

// Potentials-based O(n^2 m) assignment for n rows <= m columns.
// Returns col index per row.
std::vector<int> solve_rect(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const int m = n ? static_cast<int>(cost[0].size()) : 0;
  std::vector<double> u(static_cast<size_t>(n) + 1), v(static_cast<size_t>(m) + 1);
  std::vector<int> p(static_cast<size_t>(m) + 1), way(static_cast<size_t>(m) + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      double delta = std::numeric_limits<double>::infinity();
      int j1 = 0;
      for (int j = 1; j <= m; ++j)
        if (!used[static_cast<size_t>(j)]) {
          const double cur = cost[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                             u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
          if (cur < minv[static_cast<size_t>(j)]) {
            minv[static_cast<size_t>(j)] = cur;
            way[static_cast<size_t>(j)] = j0;
          }
          if (minv[static_cast<size_t>(j)] < delta) {
            delta = minv[static_cast<size_t>(j)];
            j1 = j;
          }
        }
      for (int j = 0; j <= m; ++j)
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<size_t>(j)] > 0) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

}  // namespace

Assignment hungarian_match(const std::vector<Detection>& preds,
                           const std::vector<BoxCxCyWh>& gts, const CostWeights& w) {
  Assignment a;
  if (gts.empty() || preds.empty()) return a;
  const int N = static_cast<int>(preds.size());
  const int G = std::min(static_cast<int>(gts.size()), N);
  std::vector<std::vector<double>> cost(static_cast<size_t>(G),
                                        std::vector<double>(static_cast<size_t>(N)));
  for (int g = 0; g < G; ++g)
    for (int q = 0; q < N; ++q)
      cost[static_cast<size_t>(g)][static_cast<size_t>(q)] =
          pair_cost(preds[static_cast<size_t>(q)], gts[static_cast<size_t>(g)], w);
  std::vector<int> gt_to_q = solve_rect(cost);
  for (int g = 0; g < G; ++g) {
    a.pairs.emplace_back(gt_to_q[static_cast<size_t>(g)], g);
    a.total_cost += cost[static_cast<size_t>(g)][static_cast<size_t>(gt_to_q[static_cast<size_t>(g)])];
  }
  // Deterministic report order: lowest (gt, query) first.
  std::sort(a.pairs.begin(), a.pairs.end(),
            [](const auto& x, const auto& y) { return x.second < y.second; });
  return a;
}

double brute_force_match_cost(const std::vector<Detection>& preds,
                              const std::vector<BoxCxCyWh>& gts, const CostWeights& w) {
  if (gts.empty() || preds.empty()) return 0;
  const int N = static_cast<int>(preds.size());
  const int G = std::min(static_cast<int>(gts.size()), N);
  std::vector<std::vector<double>> cost(static_cast<size_t>(G),
                                        std::vector<double>(static_cast<size_t>(N)));
  for (int g = 0; g < G; ++g)
    for (int q = 0; q < N; ++q)
      cost[static_cast<size_t>(g)][static_cast<size_t>(q)] =
          pair_cost(preds[static_cast<size_t>(q)], gts[static_cast<size_t>(g)], w);
  double best = std::numeric_limits<double>::infinity();
  std::vector<char> used(static_cast<size_t>(N), 0);
  std::function<void(int, double)> rec = [&](int g, double acc) {
    if (acc >= best) return;
    if (g == G) {
      best = acc;
      return;
    }
    for (int q = 0; q < N; ++q)
      if (!used[static_cast<size_t>(q)]) {
        used[static_cast<size_t>(q)] = 1;
        rec(g + 1, acc + cost[static_cast<size_t>(g)][static_cast<size_t>(q)]);
        used[static_cast<size_t>(q)] = 0;
      }
  };
  rec(0, 0);
  return best;
}

std::vector<Detection> layer_detections(const LayerOutput& layer, int n_classes) {
  const int N = layer.class_logits.shape[0];
  const int C = n_classes + 1;
  std::vector<Detection> dets(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    double mx = -1e300;
    for (int c = 0; c < C; ++c) mx = std::max(mx, layer.class_logits.v[static_cast<long>(i) * C + c]);
    double z = 0;
    for (int c = 0; c < C; ++c) z += std::exp(layer.class_logits.v[static_cast<long>(i) * C + c] - mx);
    auto& d = dets[static_cast<size_t>(i)];
    d.score = std::exp(layer.class_logits.v[static_cast<long>(i) * C] - mx) / z;
    d.label = 0;
    d.box = {layer.boxes.v[i * 4 + 0], layer.boxes.v[i * 4 + 1], layer.boxes.v[i * 4 + 2],
             layer.boxes.v[i * 4 + 3]};
  }
  return dets;
}

SetLoss set_loss(const Tensor& class_logits, const Tensor& boxes,
                 const std::vector<BoxCxCyWh>& gts, const Assignment& assign,
                 const CostWeights& w) {
  const int N = class_logits.shape[0];
  const int C = class_logits.shape[1];
  std::vector<int> targets(static_cast<size_t>(N), C - 1);  // no-object
  std::vector<double> weights(static_cast<size_t>(N), w.eos);
  for (const auto& [q, g] : assign.pairs) {
    if (q < 0 || q >= N || g < 0 || g >= static_cast<int>(gts.size()))
      throw ContractError("set_loss: invalid assignment");
    targets[static_cast<size_t>(q)] = 0;  // table
    weights[static_cast<size_t>(q)] = 1.0;
  }
  double wsum = 0;
  for (double x : weights) wsum += x;
  SetLoss out;
  out.cls = scale(cross_entropy_rows(class_logits, targets, weights), 1.0 / wsum);
  if (assign.pairs.empty()) {
    out.reg = Tensor::scalar(0.0);
    return out;
  }
  std::vector<Tensor> terms;
  for (const auto& [q, g] : assign.pairs) {
    Tensor pb = reshape(select_rows(boxes, {q}), {4});
    Tensor gb = gts[static_cast<size_t>(g)].tensor();
    Tensor l1 = sum(abs_t(sub(pb, gb)));
    Tensor gi = giou_t(pb, gb);
    terms.push_back(add(scale(l1, w.l1), scale(sub(Tensor::scalar(1.0), gi), w.giou)));
  }
  Tensor total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.reg = scale(total, 1.0 / static_cast<double>(assign.pairs.size()));
  return out;
}

Tensor image_loss(const ForwardResult& fwd, const std::vector<BoxCxCyWh>& gts,
                  const CostWeights& w, int n_classes) {
  Tensor total = Tensor::scalar(0.0);
  bool first = true;
  for (const auto& layer : fwd.layers) {
    Assignment a = hungarian_match(layer_detections(layer, n_classes), gts, w);
    SetLoss sl = set_loss(layer.class_logits, layer.boxes, gts, a, w);
    Tensor term = add(sl.cls, sl.reg);
    total = first ? term : add(total, term);
    first = false;
  }
  return total;
}

Tensor supervised_loss(const std::vector<ForwardResult>& fwds,
                       const std::vector<std::vector<BoxCxCyWh>>& gts, const CostWeights& w,
                       int n_classes) {
  if (fwds.empty()) throw ContractError("supervised_loss: empty labeled batch");
  if (fwds.size() != gts.size()) throw ContractError("supervised_loss: batch size mismatch");
  Tensor total = image_loss(fwds[0], gts[0], w, n_classes);
  for (size_t i = 1; i < fwds.size(); ++i) total = add(total, image_loss(fwds[i], gts[i], w, n_classes));
  return scale(total, 1.0 / static_cast<double>(fwds.size()));
}

Tensor unsupervised_loss(const std::vector<ForwardResult>& fwds,
                         const std::vector<std::vector<BoxCxCyWh>>& pseudo,
                         const CostWeights& w, int n_classes) {
  if (fwds.empty()) throw ContractError("unsupervised_loss: empty unlabeled batch");
  return supervised_loss(fwds, pseudo, w, n_classes);
}

LossReport total_loss(double l_s, double l_u, double alpha) {
  if (alpha < 0) throw ContractError("total_loss: alpha must be nonnegative");
  LossReport r;
  r.supervised = l_s;
  r.unsupervised = l_u;
  r.alpha = alpha;
  r.total = l_s + alpha * l_u;
  return r;
}

}  // namespace tabledet
