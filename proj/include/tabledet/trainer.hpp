#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tabledet/eval.hpp"
#include "tabledet/matching.hpp"
#include "tabledet/model.hpp"
#include "tabledet/rng.hpp"
#include "tabledet/synthdata.hpp"

namespace tabledet {

// Invertible geometric view: horizontal flip, then a crop window resampled
// to the full resolution. Photometric ops never enter the transform.
struct ViewTransform {
  bool hflip = false;
  double x0 = 0, y0 = 0, w = 1, h = 1;  // crop window, normalized

  BoxCxCyWh box_to_view(const BoxCxCyWh& b) const;
  BoxCxCyWh box_to_original(const BoxCxCyWh& b) const;
};

// Map boxes into a view, dropping those whose center leaves the window and
// clipping the rest to the view bounds.
std::vector<BoxCxCyWh> map_boxes_to_view(const ViewTransform& vt,
                                         const std::vector<BoxCxCyWh>& boxes);

struct AugmentedView {
  AnnotatedImage image;
  std::vector<BoxCxCyWh> boxes;
  ViewTransform vt;
};

AugmentedView weak_augment(const AnnotatedImage& img, const std::vector<BoxCxCyWh>& boxes,
                           Rng& rng);
AugmentedView strong_augment(const AnnotatedImage& img, const std::vector<BoxCxCyWh>& boxes,
                             Rng& rng);

struct TrainerConfig {
  double alpha = 0.25;
  double score_threshold = 0.7;
  int top_k = 3;
  double ema_momentum = 0.996;
  int burn_in_steps = 500;
  int epochs = 60;
  int lr_drop_epoch = -1;  // default: 11/12 of epochs
  int batch_size = 8;
  double label_fraction = 0.1;
  uint64_t seed = 0;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int eval_interval = 5;  // epochs between validation evaluations
  bool supervised_only = false;

  int drop_epoch() const { return lr_drop_epoch >= 0 ? lr_drop_epoch : (epochs * 11) / 12; }
  void validate() const;

  std::string to_json() const;
  static TrainerConfig from_json(const std::string& text);
};

struct PseudoLabelSet {
  std::vector<BoxCxCyWh> boxes;  // original-image coordinates
  std::vector<double> scores;
  ViewTransform source_vt;
};

// Teacher inference on a weak view; threshold first, then top-k among the
// survivors; boxes mapped back to original coordinates.
PseudoLabelSet generate_pseudo_labels(const Model& teacher, const AnnotatedImage& img,
                                      const TrainerConfig& cfg, Rng& rng);

// theta_t <- m * theta_t + (1 - m) * theta_s
void ema_update(ParamStore& teacher, const ParamStore& student, double m);

double lr_schedule(int epoch, const TrainerConfig& cfg);

struct InMemoryDataset {
  std::vector<AnnotatedImage> images;  // indexed by id
  DatasetSplit split;
};

InMemoryDataset load_dataset(const std::string& root);

struct EpochMetrics {
  int epoch = 0;
  double loss = 0, loss_s = 0, loss_u = 0;
  double ap50 = 0, map = 0, ap75 = 0, ar = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::vector<LossReport> step_losses;
};

class Trainer {
 public:
  Trainer(const InMemoryDataset& data, const TrainerConfig& cfg, ModelConfig mcfg);

  LossReport train_step(const std::vector<int>& labeled_ids,
                        const std::vector<int>& unlabeled_ids);

  // Full schedule; writes per-epoch JSONL metrics + final checkpoint when
  // out_dir is nonempty.
  TrainResult run(const std::string& out_dir = "");

  Model& student() { return student_; }
  Model& teacher();
  const Model& eval_model() const;  // teacher when present, else student

  MetricsReport evaluate_on(const std::vector<int>& ids) const;
  int global_step() const { return step_; }

 private:
  const InMemoryDataset& data_;
  TrainerConfig cfg_;
  Model student_;
  std::optional<Model> teacher_;
  OptimState opt_;
  int step_ = 0;
  int current_epoch_ = 0;
  bool teacher_initialized_ = false;

  bool use_unsup() const;
};

void save_model_checkpoint(const std::string& path, const Model& student,
                           const Model* teacher);

}  // namespace tabledet
