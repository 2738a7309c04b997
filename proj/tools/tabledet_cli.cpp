// Command-line front end: dataset generation, training, evaluation,
// ablation sweeps, and gradient verification.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tabledet/eval.hpp"
#include "tabledet/matching.hpp"
#include "tabledet/model.hpp"
#include "tabledet/synthdata.hpp"
#include "tabledet/trainer.hpp"

using namespace tabledet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "tabledet 0.1.0";

std::string timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
  return buf;
}

std::string default_out(const std::string& leaf) {
  const char* root = std::getenv("TABLEDET_OUT_ROOT");
  return (fs::path(root ? root : "runs") / leaf).string();
}

json model_to_json(const ModelConfig& m) {
  return {{"d_model", m.d_model},
          {"heads", m.heads},
          {"enc_layers", m.enc_layers},
          {"dec_layers", m.dec_layers},
          {"queries", m.queries},
          {"roi_size", m.roi_size},
          {"classes", m.classes},
          {"backbone_channels", m.backbone_channels},
          {"ffn_dim", m.ffn_dim},
          {"aligner_channels", m.aligner_channels},
          {"aligner_hidden", m.aligner_hidden}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.d_model = j.value("d_model", m.d_model);
  m.heads = j.value("heads", m.heads);
  m.enc_layers = j.value("enc_layers", m.enc_layers);
  m.dec_layers = j.value("dec_layers", m.dec_layers);
  m.queries = j.value("queries", m.queries);
  m.roi_size = j.value("roi_size", m.roi_size);
  m.classes = j.value("classes", m.classes);
  m.backbone_channels = j.value("backbone_channels", m.backbone_channels);
  m.ffn_dim = j.value("ffn_dim", m.ffn_dim);
  m.aligner_channels = j.value("aligner_channels", m.aligner_channels);
  m.aligner_hidden = j.value("aligner_hidden", m.aligner_hidden);
  m.validate();
  return m;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Minimal SVG line chart: one polyline per named series, shared x axis.
std::string svg_chart(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                      const std::string& title) {
  const int W = 640, H = 360, ml = 50, mr = 20, mt = 30, mb = 30;
  double lo = 0, hi = 1e-12;
  size_t n = 0;
  for (const auto& [name, ys] : series) {
    n = std::max(n, ys.size());
    for (double y : ys) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  }
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  s << "<rect width='100%' height='100%' fill='white'/>\n";
  s << "<text x='" << W / 2 << "' y='18' text-anchor='middle' font-size='14'>" << title
    << "</text>\n";
  s << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
    << "' stroke='black'/>\n";
  s << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
    << "' stroke='black'/>\n";
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  int ci = 0;
  for (const auto& [name, ys] : series) {
    if (ys.empty()) continue;
    std::ostringstream pts;
    for (size_t i = 0; i < ys.size(); ++i) {
      const double x = ml + (W - ml - mr) * (n > 1 ? double(i) / (n - 1) : 0.5);
      const double y = H - mb - (H - mt - mb) * (ys[i] - lo) / (hi - lo);
      pts << x << "," << y << " ";
    }
    const char* c = colors[ci % 4];
    s << "<polyline fill='none' stroke='" << c << "' points='" << pts.str() << "'/>\n";
    s << "<text x='" << W - mr - 120 << "' y='" << mt + 16 * ci << "' fill='" << c
      << "' font-size='12'>" << name << "</text>\n";
    ++ci;
  }
  s << "</svg>\n";
  return s.str();
}

void write_run_artifacts(const fs::path& out, const TrainResult& res) {
  std::vector<double> loss, ap50, epochs;
  std::ostringstream csv;
  csv << "epoch,loss,loss_s,loss_u,AP50,mAP,AP75,AR\n";
  for (const auto& e : res.history) {
    loss.push_back(e.loss);
    ap50.push_back(e.ap50);
    csv << e.epoch << "," << e.loss << "," << e.loss_s << "," << e.loss_u << "," << e.ap50
        << "," << e.map << "," << e.ap75 << "," << e.ar << "\n";
  }
  write_text(out / "history.csv", csv.str());
  write_text(out / "loss.svg", svg_chart({{"loss", loss}}, "training loss"));
  write_text(out / "ap50.svg", svg_chart({{"AP50", ap50}}, "validation AP50"));
}

int cmd_gen_data(const std::string& out, int count, uint64_t seed, double fraction, int side) {
  GenConfig g;
  g.width = side;
  g.height = side;
  generate_dataset(out, count, seed, fraction, g);
  std::printf("wrote %d images to %s\n", count, out.c_str());
  return 0;
}

int cmd_train(const std::string& data, const std::string& out, const std::string& config,
              bool supervised_only, int epochs_override, long seed_override) {
  TrainerConfig cfg;
  ModelConfig mcfg;
  if (!config.empty()) {
    json j = json::parse(read_text(config));
    if (j.contains("trainer")) cfg = TrainerConfig::from_json(j["trainer"].dump());
    if (j.contains("model")) mcfg = model_from_json(j["model"]);
  }
  if (supervised_only) {
    cfg.supervised_only = true;
    cfg.alpha = 0.0;
  }
  if (epochs_override > 0) cfg.epochs = epochs_override;
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  cfg.validate();

  InMemoryDataset ds = load_dataset(data);
  fs::create_directories(out);
  json manifest = {{"version", kVersion},
                   {"started", timestamp()},
                   {"data", fs::absolute(data).string()},
                   {"seed", cfg.seed},
                   {"trainer", json::parse(cfg.to_json())},
                   {"model", model_to_json(mcfg)}};
  Trainer tr(ds, cfg, mcfg);
  TrainResult res = tr.run(out);
  manifest["finished"] = timestamp();
  write_text(fs::path(out) / "manifest.json", manifest.dump(2) + "\n");
  write_run_artifacts(out, res);
  MetricsReport final = tr.evaluate_on(ds.split.validation);
  write_text(fs::path(out) / "metrics.json", final.to_json() + "\n");
  std::printf("%s\n", final.to_text().c_str());
  return 0;
}

int cmd_eval(const std::string& run, std::string checkpoint, std::string data,
             const std::string& split, std::string out) {
  ModelConfig mcfg;
  if (!run.empty()) {
    json manifest = json::parse(read_text(fs::path(run) / "manifest.json"));
    mcfg = model_from_json(manifest["model"]);
    if (checkpoint.empty()) checkpoint = (fs::path(run) / "checkpoint.bin").string();
    if (data.empty()) data = manifest["data"].get<std::string>();
    if (out.empty()) out = run;
  }
  if (checkpoint.empty() || data.empty())
    throw std::runtime_error("need --run or both --checkpoint and --data");
  if (out.empty()) out = default_out("eval");
  fs::create_directories(out);

  auto named = load_checkpoint(checkpoint);
  Model model(mcfg, 0);
  bool has_teacher = false;
  for (const auto& [name, t] : named)
    if (name.rfind("teacher/", 0) == 0) has_teacher = true;
  model.load_params(named, has_teacher ? "teacher/" : "student/");

  InMemoryDataset ds = load_dataset(data);
  std::vector<int> ids;
  if (split == "val") ids = ds.split.validation;
  else if (split == "labeled") ids = ds.split.labeled;
  else if (split == "unlabeled") ids = ds.split.unlabeled;
  else if (split == "train") {
    ids = ds.split.labeled;
    ids.insert(ids.end(), ds.split.unlabeled.begin(), ds.split.unlabeled.end());
  } else if (split == "all") {
    for (size_t i = 0; i < ds.images.size(); ++i) ids.push_back(static_cast<int>(i));
  } else {
    throw CLI::ValidationError("--split", "unknown split: " + split);
  }

  EvalInstance inst;
  AnnotationFile preds;
  for (int id : ids) {
    const AnnotatedImage& img = ds.images[static_cast<size_t>(id)];
    preds.images.push_back({img.id, "", img.width, img.height});
    std::vector<ScoredBox> sb;
    for (const auto& d : model.predict(img.image_tensor())) {
      sb.push_back({d.box, d.score});
      preds.annotations.push_back({img.id, d.box, d.score});
    }
    inst.preds.push_back(std::move(sb));
    inst.gts.push_back(img.boxes);
  }
  write_annotations((fs::path(out) / ("predictions_" + split + ".json")).string(), preds);
  MetricsReport rep = evaluate(inst);
  write_text(fs::path(out) / ("metrics_" + split + ".json"), rep.to_json() + "\n");
  write_text(fs::path(out) / ("metrics_" + split + ".txt"), rep.to_text() + "\n");
  std::printf("%s\n", rep.to_text().c_str());
  return 0;
}

int cmd_sweep(const std::string& param, std::vector<double> values, const std::string& data,
              const std::string& out, uint64_t seed) {
  std::sort(values.begin(), values.end());
  InMemoryDataset ds = load_dataset(data);
  fs::create_directories(out);
  std::ostringstream csv, txt;
  csv << param << ",mAP,AP50,AP75\n";
  txt << param << "        mAP     AP50    AP75\n";
  for (double v : values) {
    TrainerConfig cfg;
    cfg.seed = seed;
    cfg.epochs = 600;
    cfg.burn_in_steps = 1500;
    cfg.eval_interval = 1000;
    cfg.lr = 1e-3;
    ModelConfig mcfg;
    mcfg.d_model = 32;
    mcfg.heads = 4;
    mcfg.enc_layers = 1;
    mcfg.queries = 12;
    mcfg.roi_size = 3;
    mcfg.backbone_channels = {8, 16};
    mcfg.ffn_dim = 64;
    mcfg.aligner_channels = 16;
    mcfg.aligner_hidden = 32;
    if (param == "threshold") cfg.score_threshold = v;
    else if (param == "topk") cfg.top_k = static_cast<int>(v);
    else if (param == "queries") mcfg.queries = static_cast<int>(v);
    else throw CLI::ValidationError("--param", "unknown sweep parameter: " + param);
    Trainer tr(ds, cfg, mcfg);
    tr.run((fs::path(out) / (param + "_" + std::to_string(v))).string());
    MetricsReport m = tr.evaluate_on(ds.split.validation);
    csv << v << "," << m.map << "," << m.ap50 << "," << m.ap75 << "\n";
    char line[128];
    std::snprintf(line, sizeof line, "%-12g %-7.3f %-7.3f %-7.3f\n", v, m.map, m.ap50, m.ap75);
    txt << line;
    std::printf("%s = %g: mAP %.3f AP50 %.3f AP75 %.3f\n", param.c_str(), v, m.map, m.ap50,
                m.ap75);
  }
  write_text(fs::path(out) / "sweep.csv", csv.str());
  write_text(fs::path(out) / "sweep.txt", txt.str());
  return 0;
}

int cmd_gradcheck(bool corrupt) {
  if (corrupt) corrupt_backward_for_tests(true);
  ModelConfig cfg = ModelConfig::tiny();
  Model m(cfg, 51);
  GenConfig g;
  g.width = 32;
  g.height = 32;
  AnnotatedImage img = generate_document(9, g);
  std::vector<std::pair<std::string, Tensor*>> named;
  for (auto& kv : m.params().items()) named.emplace_back(kv.first, &kv.second);
  CostWeights w;
  auto res = finite_diff_check(
      named,
      [&] { return image_loss(m.forward(img.image_tensor()), img.boxes, w, cfg.classes); },
      1e-6, 300, 777);
  corrupt_backward_for_tests(false);
  std::printf("max relative error %.3g (bound 1e-4)\n", res.max_rel_err);
  std::printf("worst parameter: %s coord %d analytic %.6g numeric %.6g\n",
              res.worst_param.c_str(), res.worst_coord, res.analytic, res.numeric);
  std::printf("per-parameter worst errors:\n");
  for (const auto& [name, err] : res.per_param_worst)
    std::printf("  %-28s %.3g\n", name.c_str(), err);
  const bool ok = res.max_rel_err <= 1e-4;
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semi-supervised table detection toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic document dataset");
  std::string gen_out = default_out("dataset");
  int gen_count = 200, gen_side = 128;
  uint64_t gen_seed = 7;
  double gen_fraction = 0.1;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--count", gen_count, "number of images")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--fraction", gen_fraction, "labeled fraction")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--side", gen_side, "image side length")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "run the teacher-student training schedule");
  std::string tr_data, tr_out = default_out("train"), tr_config;
  bool tr_sup = false;
  int tr_epochs = -1;
  long tr_seed = -1;
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--out", tr_out, "run directory");
  train->add_option("--config", tr_config, "JSON config with trainer/model sections");
  train->add_flag("--supervised-only", tr_sup, "labeled data only, no teacher");
  train->add_option("--epochs", tr_epochs, "override epoch count");
  train->add_option("--seed", tr_seed, "override seed");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string ev_run, ev_ckpt, ev_data, ev_split = "val", ev_out;
  ev->add_option("--run", ev_run, "run directory (reads manifest + checkpoint)");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file");
  ev->add_option("--data", ev_data, "dataset directory");
  ev->add_option("--split", ev_split, "val|labeled|unlabeled|train|all");
  ev->add_option("--out", ev_out, "output directory");

  auto* sw = app.add_subcommand("sweep", "ablation sweep over one parameter");
  std::string sw_param, sw_data, sw_out = default_out("sweep");
  std::vector<double> sw_values;
  uint64_t sw_seed = 1;
  sw->add_option("--param", sw_param, "threshold|topk|queries")->required();
  sw->add_option("--values", sw_values, "values to sweep")->required()->expected(-1);
  sw->add_option("--data", sw_data, "dataset directory")->required();
  sw->add_option("--out", sw_out, "output directory");
  sw->add_option("--seed", sw_seed, "shared seed across sweep points");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  bool gc_corrupt = false;
  gc->add_flag("--corrupt", gc_corrupt, "negative control: corrupt one backward rule");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // usage errors -> 2, --help/--version -> 0
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_count, gen_seed, gen_fraction, gen_side);
    if (train->parsed()) return cmd_train(tr_data, tr_out, tr_config, tr_sup, tr_epochs, tr_seed);
    if (ev->parsed()) return cmd_eval(ev_run, ev_ckpt, ev_data, ev_split, ev_out);
    if (sw->parsed()) return cmd_sweep(sw_param, sw_values, sw_data, sw_out, sw_seed);
    if (gc->parsed()) return cmd_gradcheck(gc_corrupt);
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
