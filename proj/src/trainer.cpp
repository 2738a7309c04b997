#include <cstdlib>
#include "tabledet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "tabledet/eval.hpp"

namespace fs = std::filesystem;

namespace tabledet {

BoxCxCyWh ViewTransform::box_to_view(const BoxCxCyWh& b) const {
  BoxCxCyWh r = b;
  if (hflip) r.cx = 1.0 - r.cx;
  r.cx = (r.cx - x0) / w;
  r.cy = (r.cy - y0) / h;
  r.w = b.w / w;
  r.h = b.h / h;
  return r;
}

BoxCxCyWh ViewTransform::box_to_original(const BoxCxCyWh& b) const {
  BoxCxCyWh r;
  r.cx = b.cx * w + x0;
  r.cy = b.cy * h + y0;
  r.w = b.w * w;
  r.h = b.h * h;
  if (hflip) r.cx = 1.0 - r.cx;
  return r;
}

std::vector<BoxCxCyWh> map_boxes_to_view(const ViewTransform& vt,
                                         const std::vector<BoxCxCyWh>& boxes) {
  std::vector<BoxCxCyWh> out;
  for (const auto& b : boxes) {
    BoxCxCyWh v = vt.box_to_view(b);
    if (v.cx < 0 || v.cx > 1 || v.cy < 0 || v.cy > 1) continue;
    // Clip corners to the view, keep boxes that retain some extent.
    const double x1 = std::clamp(v.x1(), 0.0, 1.0), x2 = std::clamp(v.x2(), 0.0, 1.0);
    const double y1 = std::clamp(v.y1(), 0.0, 1.0), y2 = std::clamp(v.y2(), 0.0, 1.0);
    BoxCxCyWh c{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
    if (c.w < 1e-3 || c.h < 1e-3) continue;
    out.push_back(c);
  }
  return out;
}

namespace {

AnnotatedImage flip_image(const AnnotatedImage& img) {
  AnnotatedImage out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.pixels[static_cast<size_t>(y) * img.width + x] = img.at(y, img.width - 1 - x);
  return out;
}

double sample_bilinear(const AnnotatedImage& img, double px, double py) {
  const double fx = px * img.width - 0.5, fy = py * img.height - 0.5;
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0, ay = fy - y0;
  double acc = 0;
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) {
      const int x = std::clamp(x0 + i, 0, img.width - 1);
      const int y = std::clamp(y0 + j, 0, img.height - 1);
      acc += (i ? ax : 1 - ax) * (j ? ay : 1 - ay) * img.at(y, x);
    }
  return acc;
}

AnnotatedImage crop_resize(const AnnotatedImage& img, const ViewTransform& vt) {
  AnnotatedImage out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double px = vt.x0 + (x + 0.5) / img.width * vt.w;
      const double py = vt.y0 + (y + 0.5) / img.height * vt.h;
      out.pixels[static_cast<size_t>(y) * img.width + x] = sample_bilinear(img, px, py);
    }
  return out;
}

void gaussian_blur3(AnnotatedImage& img) {
  const double k[3] = {0.25, 0.5, 0.25};
  AnnotatedImage tmp = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0;
      for (int i = -1; i <= 1; ++i)
        acc += k[i + 1] * img.at(y, std::clamp(x + i, 0, img.width - 1));
      tmp.pixels[static_cast<size_t>(y) * img.width + x] = acc;
    }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0;
      for (int i = -1; i <= 1; ++i)
        acc += k[i + 1] * tmp.at(std::clamp(y + i, 0, img.height - 1), x);
      img.pixels[static_cast<size_t>(y) * img.width + x] = acc;
    }
}

}  // namespace

AugmentedView weak_augment(const AnnotatedImage& img, const std::vector<BoxCxCyWh>& boxes,
                           Rng& rng) {
  AugmentedView v;
  v.vt.hflip = rng.bernoulli(0.5);
  v.image = v.vt.hflip ? flip_image(img) : img;
  v.boxes = map_boxes_to_view(v.vt, boxes);
  return v;
}

AugmentedView strong_augment(const AnnotatedImage& img, const std::vector<BoxCxCyWh>& boxes,
                             Rng& rng) {
  AugmentedView v;
  v.vt.hflip = rng.bernoulli(0.5);
  // Scale jitter via a crop window resampled to full resolution; retain at
  // least one table center when boxes are given.
  for (int attempt = 0; attempt < 10; ++attempt) {
    ViewTransform vt = v.vt;
    vt.w = rng.uniform(0.7, 1.0);
    vt.h = rng.uniform(0.7, 1.0);
    vt.x0 = rng.uniform(0.0, 1.0 - vt.w);
    vt.y0 = rng.uniform(0.0, 1.0 - vt.h);
    bool keeps = boxes.empty();
    for (const auto& b : boxes) {
      const double cx = vt.hflip ? 1.0 - b.cx : b.cx;
      if (cx >= vt.x0 && cx <= vt.x0 + vt.w && b.cy >= vt.y0 && b.cy <= vt.y0 + vt.h) keeps = true;
    }
    if (keeps) {
      v.vt = vt;
      break;
    }
    if (attempt == 9) v.vt = ViewTransform{v.vt.hflip, 0, 0, 1, 1};
  }
  AnnotatedImage flipped = v.vt.hflip ? flip_image(img) : img;
  v.image = crop_resize(flipped, v.vt);
  v.boxes = map_boxes_to_view(v.vt, boxes);
  // Photometric ops; the grayscale conversion is a no-op on these pages.
  if (rng.bernoulli(0.3)) gaussian_blur3(v.image);
  if (rng.bernoulli(0.3)) {
    const int pw = 4 + static_cast<int>(rng.uniform_int(12));
    const int ph = 4 + static_cast<int>(rng.uniform_int(12));
    const int px = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(v.image.width - pw)));
    const int py = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(v.image.height - ph)));
    const double shade = rng.uniform();
    for (int y = py; y < py + ph; ++y)
      for (int x = px; x < px + pw; ++x)
        v.image.pixels[static_cast<size_t>(y) * v.image.width + x] = shade;
  }
  return v;
}

void TrainerConfig::validate() const {
  if (score_threshold < 0 || score_threshold > 1) throw ConfigError("score_threshold in [0,1]");
  if (top_k < 1) throw ConfigError("top_k >= 1");
  if (ema_momentum < 0 || ema_momentum > 1) throw ConfigError("ema_momentum in [0,1]");
  if (alpha < 0) throw ConfigError("alpha >= 0");
  if (batch_size < 2) throw ConfigError("batch_size >= 2");
  if (epochs < 1) throw ConfigError("epochs >= 1");
}

std::string TrainerConfig::to_json() const {
  nlohmann::json j = {{"alpha", alpha},
                      {"score_threshold", score_threshold},
                      {"top_k", top_k},
                      {"ema_momentum", ema_momentum},
                      {"burn_in_steps", burn_in_steps},
                      {"epochs", epochs},
                      {"lr_drop_epoch", lr_drop_epoch},
                      {"batch_size", batch_size},
                      {"label_fraction", label_fraction},
                      {"seed", seed},
                      {"lr", lr},
                      {"weight_decay", weight_decay},
                      {"eval_interval", eval_interval},
                      {"supervised_only", supervised_only}};
  return j.dump(2);
}

TrainerConfig TrainerConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainerConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.score_threshold = j.value("score_threshold", c.score_threshold);
  c.top_k = j.value("top_k", c.top_k);
  c.ema_momentum = j.value("ema_momentum", c.ema_momentum);
  c.burn_in_steps = j.value("burn_in_steps", c.burn_in_steps);
  c.epochs = j.value("epochs", c.epochs);
  c.lr_drop_epoch = j.value("lr_drop_epoch", c.lr_drop_epoch);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.label_fraction = j.value("label_fraction", c.label_fraction);
  c.seed = j.value("seed", c.seed);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.supervised_only = j.value("supervised_only", c.supervised_only);
  c.validate();
  return c;
}

PseudoLabelSet generate_pseudo_labels(const Model& teacher, const AnnotatedImage& img,
                                      const TrainerConfig& cfg, Rng& rng) {
  AugmentedView view = weak_augment(img, {}, rng);
  std::vector<Detection> dets = teacher.predict(view.image.image_tensor());
  std::vector<Detection> kept;
  for (const auto& d : dets)
    if (d.score >= cfg.score_threshold) kept.push_back(d);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(kept.size()) > cfg.top_k) kept.resize(static_cast<size_t>(cfg.top_k));
  PseudoLabelSet out;
  out.source_vt = view.vt;
  for (const auto& d : kept) {
    BoxCxCyWh orig = view.vt.box_to_original(d.box);
    const double x1 = std::clamp(orig.x1(), 0.0, 1.0), x2 = std::clamp(orig.x2(), 0.0, 1.0);
    const double y1 = std::clamp(orig.y1(), 0.0, 1.0), y2 = std::clamp(orig.y2(), 0.0, 1.0);
    BoxCxCyWh c{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
    if (c.w < 1e-3 || c.h < 1e-3) continue;
    out.boxes.push_back(c);
    out.scores.push_back(d.score);
  }
  return out;
}

void ema_update(ParamStore& teacher, const ParamStore& student, double m) {
  if (teacher.count() != student.count()) throw ContractError("ema_update: incongruent params");
  for (size_t i = 0; i < teacher.count(); ++i) {
    auto& t = teacher.items()[i].second;
    const auto& s = student.items()[i].second;
    if (t.shape != s.shape) throw ContractError("ema_update: shape mismatch");
    t.v = m * t.v + (1.0 - m) * s.v;
  }
}

double lr_schedule(int epoch, const TrainerConfig& cfg) {
  return epoch >= cfg.drop_epoch() ? cfg.lr * 0.1 : cfg.lr;
}

InMemoryDataset load_dataset(const std::string& root) {
  InMemoryDataset d;
  AnnotationFile af = read_annotations((fs::path(root) / "labels" / "annotations.json").string());
  d.split = read_split((fs::path(root) / "split.json").string());
  d.images.resize(af.images.size());
  for (const auto& im : af.images) {
    AnnotatedImage img = read_image((fs::path(root) / "images" / im.file).string());
    img.id = im.id;
    d.images[static_cast<size_t>(im.id)] = std::move(img);
  }
  for (const auto& a : af.annotations)
    d.images[static_cast<size_t>(a.image_id)].boxes.push_back(a.box);
  return d;
}

Trainer::Trainer(const InMemoryDataset& data, const TrainerConfig& cfg, ModelConfig mcfg)
    : data_(data), cfg_(cfg), student_(mcfg, cfg.seed) {
  cfg_.validate();
  if (data_.split.labeled.empty()) throw ConfigError("empty labeled split");
  if (!cfg_.supervised_only) teacher_.emplace(mcfg, cfg.seed + 1);
}

Model& Trainer::teacher() {
  if (!teacher_) throw ContractError("no teacher in supervised-only mode");
  return *teacher_;
}

const Model& Trainer::eval_model() const { return teacher_ && teacher_initialized_ ? *teacher_ : student_; }

bool Trainer::use_unsup() const {
  return !cfg_.supervised_only && cfg_.alpha > 0 && step_ >= cfg_.burn_in_steps;
}

LossReport Trainer::train_step(const std::vector<int>& labeled_ids,
                               const std::vector<int>& unlabeled_ids) {
  const bool unsup = use_unsup() && !unlabeled_ids.empty();
  // One-time student -> teacher copy at burn-in end, EMA thereafter.
  if (!cfg_.supervised_only && cfg_.alpha > 0 && step_ >= cfg_.burn_in_steps &&
      !teacher_initialized_) {
    teacher_->copy_params_from(student_);
    teacher_initialized_ = true;
  }

  Graph g;
  student_.watch_all(g);

  std::vector<ForwardResult> sup_fwds;
  std::vector<std::vector<BoxCxCyWh>> sup_gts;
  for (int id : labeled_ids) {
    Rng rng = Rng::derive(cfg_.seed, 0xA6A6, static_cast<uint64_t>(step_) * 100003ull +
                                                 static_cast<uint64_t>(id));
    AugmentedView view = strong_augment(data_.images[static_cast<size_t>(id)],
                                        data_.images[static_cast<size_t>(id)].boxes, rng);
    sup_fwds.push_back(student_.forward(view.image.image_tensor()));
    sup_gts.push_back(view.boxes);
  }
  CostWeights w;
  Tensor ls = supervised_loss(sup_fwds, sup_gts, w, student_.config().classes);

  Tensor loss = ls;
  double lu_val = 0;
  if (unsup) {
    std::vector<ForwardResult> un_fwds;
    std::vector<std::vector<BoxCxCyWh>> un_pseudo;
    for (int id : unlabeled_ids) {
      Rng trng = Rng::derive(cfg_.seed, 0x7EAC, static_cast<uint64_t>(step_) * 100003ull +
                                                    static_cast<uint64_t>(id));
      PseudoLabelSet pl = generate_pseudo_labels(*teacher_, data_.images[static_cast<size_t>(id)],
                                                 cfg_, trng);
      Rng srng = Rng::derive(cfg_.seed, 0x5A0C, static_cast<uint64_t>(step_) * 100003ull +
                                                    static_cast<uint64_t>(id));
      AugmentedView view = strong_augment(data_.images[static_cast<size_t>(id)], pl.boxes, srng);
      un_fwds.push_back(student_.forward(view.image.image_tensor()));
      un_pseudo.push_back(view.boxes);
    }
    // Pseudo-label sets are precise but low-recall: absence of a pseudo box is
    // weak evidence of background, so the no-object term is down-weighted
    // further on unlabeled views to keep missed tables from being suppressed.
    CostWeights wu = w;
    wu.eos = w.eos * kUnsupEosFactor;
    Tensor lu = unsupervised_loss(un_fwds, un_pseudo, wu, student_.config().classes);
    lu_val = lu.item();
    loss = add(ls, scale(lu, cfg_.alpha));
  }

  g.backward(loss);
  std::vector<Tensor*> params = student_.params().tensors();
  std::vector<Array> grads;
  grads.reserve(params.size());
  for (Tensor* p : params) grads.push_back(g.grad(*p).v);

  AdamWConfig opt_cfg;
  opt_cfg.lr = lr_schedule(current_epoch_, cfg_);
  opt_cfg.weight_decay = cfg_.weight_decay;
  adamw_step(params, grads, opt_, opt_cfg);
  for (Tensor* p : params) p->node = -1;

  if (teacher_initialized_) ema_update(teacher_->params(), student_.params(), cfg_.ema_momentum);

  LossReport rep = total_loss(ls.item(), lu_val, unsup ? cfg_.alpha : 0.0);
  ++step_;
  return rep;
}

MetricsReport Trainer::evaluate_on(const std::vector<int>& ids) const {
  EvalInstance inst;
  const Model& m = eval_model();
  for (int id : ids) {
    const AnnotatedImage& img = data_.images[static_cast<size_t>(id)];
    std::vector<Detection> dets = m.predict(img.image_tensor());
    std::vector<ScoredBox> preds;
    for (const auto& d : dets) preds.push_back({d.box, d.score});
    inst.preds.push_back(std::move(preds));
    inst.gts.push_back(img.boxes);
  }
  return evaluate(inst);
}

TrainResult Trainer::run(const std::string& out_dir) {
  TrainResult result;
  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log.open(fs::path(out_dir) / "metrics.jsonl");
  }
  // Equal labeled/unlabeled halves; the supervised-only baseline keeps the
  // same labeled half so alpha=0 runs are bit-identical to it.
  const int lab_per_step = cfg_.batch_size / 2;
  const int unl_per_step = cfg_.supervised_only ? 0 : cfg_.batch_size - lab_per_step;
  const auto& labeled = data_.split.labeled;
  const auto& unlabeled = data_.split.unlabeled;
  const int steps_per_epoch =
      std::max(1, static_cast<int>((labeled.size() + lab_per_step - 1) / lab_per_step));

  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    current_epoch_ = epoch;
    // Per-epoch seeded shuffle of the labeled split.
    std::vector<int> order = labeled;
    Rng rng = Rng::derive(cfg_.seed, 0xE90C, static_cast<uint64_t>(epoch));
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(i + 1)))]);
    double ep_loss = 0, ep_ls = 0, ep_lu = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<int> lab_batch;
      for (int i = 0; i < lab_per_step; ++i)
        lab_batch.push_back(order[static_cast<size_t>((s * lab_per_step + i) % order.size())]);
      std::vector<int> unl_batch;
      if (unl_per_step > 0 && !unlabeled.empty()) {
        Rng urng = Rng::derive(cfg_.seed, 0xB47C, static_cast<uint64_t>(step_));
        for (int i = 0; i < unl_per_step; ++i)
          unl_batch.push_back(
              unlabeled[static_cast<size_t>(urng.uniform_int(unlabeled.size()))]);
      }
      LossReport rep = train_step(lab_batch, unl_batch);
      result.step_losses.push_back(rep);
      ep_loss += rep.total;
      ep_ls += rep.supervised;
      ep_lu += rep.unsupervised;
    }
    if ((epoch + 1) % cfg_.eval_interval == 0 || epoch + 1 == cfg_.epochs) {
      MetricsReport m = evaluate_on(data_.split.validation);
      EpochMetrics em;
      em.epoch = epoch;
      em.loss = ep_loss / steps_per_epoch;
      em.loss_s = ep_ls / steps_per_epoch;
      em.loss_u = ep_lu / steps_per_epoch;
      em.ap50 = m.ap50;
      em.map = m.map;
      em.ap75 = m.ap75;
      em.ar = m.ar;
      result.history.push_back(em);
      if (log.is_open()) {
        nlohmann::json j = {{"epoch", epoch},   {"loss", em.loss}, {"loss_s", em.loss_s},
                            {"loss_u", em.loss_u}, {"AP50", em.ap50}, {"mAP", em.map},
                            {"AP75", em.ap75},  {"AR", em.ar}};
        log << j.dump() << "\n";
        log.flush();
      }
    }
  }
  if (!out_dir.empty())
    save_model_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), student_,
                          teacher_ && teacher_initialized_ ? &*teacher_ : nullptr);
  return result;
}

void save_model_checkpoint(const std::string& path, const Model& student, const Model* teacher) {
  std::vector<std::pair<std::string, Tensor>> named;
  for (const auto& [n, t] : student.params().items()) named.emplace_back("student/" + n, t.detached());
  if (teacher)
    for (const auto& [n, t] : teacher->params().items())
      named.emplace_back("teacher/" + n, t.detached());
  save_checkpoint(path, named);
}

}  // namespace tabledet
