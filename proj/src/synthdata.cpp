#include "tabledet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "tabledet/rng.hpp"

namespace fs = std::filesystem;

namespace tabledet {

Tensor AnnotatedImage::image_tensor() const {
  Tensor t = Tensor::zeros({1, height, width});
  std::copy(pixels.begin(), pixels.end(), t.v.data());
  return t;
}

namespace {

void fill_rect(AnnotatedImage& img, int x0, int y0, int x1, int y1, double v) {
  x0 = std::clamp(x0, 0, img.width);
  x1 = std::clamp(x1, 0, img.width);
  y0 = std::clamp(y0, 0, img.height);
  y1 = std::clamp(y1, 0, img.height);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) img.pixels[static_cast<size_t>(y) * img.width + x] = v;
}

}  // namespace

AnnotatedImage generate_document(uint64_t seed, const GenConfig& cfg) {
  Rng rng = Rng::derive(seed, 0x51D0C);
  AnnotatedImage img;
  img.width = cfg.width;
  img.height = cfg.height;
  img.pixels.assign(static_cast<size_t>(cfg.width) * cfg.height, 0.0);
  // Background: near-white with mild per-pixel noise.
  for (auto& p : img.pixels) p = 0.93 + 0.05 * rng.uniform();

  const int W = cfg.width, H = cfg.height;

  // Text-line distractor strips.
  const int n_strips = 3 + static_cast<int>(rng.uniform_int(5));
  struct Strip {
    int x0, y0, x1, y1;
  };
  std::vector<Strip> strips;
  for (int s = 0; s < n_strips; ++s) {
    const int sw = W / 4 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(W / 2)));
    const int sh = 2 + static_cast<int>(rng.uniform_int(2));
    const int sx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(W - sw)));
    const int sy = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(H - sh)));
    strips.push_back({sx, sy, sx + sw, sy + sh});
  }

  // Tables: bordered grids with tight GT boxes, pairwise IoU < 0.05.
  const int want =
      cfg.min_tables + static_cast<int>(rng.uniform_int(
                           static_cast<uint64_t>(cfg.max_tables - cfg.min_tables + 1)));
  std::vector<BoxCxCyWh> placed;
  struct TableSpec {
    int x0, y0, tw, th, rows, cols, thick;
    bool borderless;
  };
  std::vector<TableSpec> tables;
  int attempts = 0;
  while (static_cast<int>(placed.size()) < want && attempts < 200) {
    ++attempts;
    const int tw = W / 5 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(W / 3)));
    const int th = H / 6 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(H / 3)));
    const int margin = 3;
    const int x0 = margin + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(W - tw - 2 * margin)));
    const int y0 = margin + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(H - th - 2 * margin)));
    BoxCxCyWh box{(x0 + tw / 2.0) / W, (y0 + th / 2.0) / H, static_cast<double>(tw) / W,
                  static_cast<double>(th) / H};
    bool ok = true;
    for (const auto& other : placed)
      if (iou(box, other) >= 0.05) ok = false;
    if (!ok) continue;
    TableSpec ts;
    ts.x0 = x0;
    ts.y0 = y0;
    ts.tw = tw;
    ts.th = th;
    ts.rows = 2 + static_cast<int>(rng.uniform_int(5));
    ts.cols = 2 + static_cast<int>(rng.uniform_int(5));
    ts.thick = 1 + static_cast<int>(rng.uniform_int(2));
    ts.borderless = rng.bernoulli(0.25);
    tables.push_back(ts);
    placed.push_back(box);
  }

  // Draw strips first so tables overdraw them.
  for (const auto& s : strips) {
    const double shade = 0.25 + 0.2 * rng.uniform();
    fill_rect(img, s.x0, s.y0, s.x1, s.y1, shade);
  }

  for (const auto& t : tables) {
    const double ink = 0.05 + 0.15 * rng.uniform();
    // Cell background slightly darker than page.
    fill_rect(img, t.x0, t.y0, t.x0 + t.tw, t.y0 + t.th, 0.88 + 0.04 * rng.uniform());
    // Inner grid lines.
    for (int r = 1; r < t.rows; ++r) {
      const int y = t.y0 + r * t.th / t.rows;
      fill_rect(img, t.x0, y, t.x0 + t.tw, y + t.thick, ink);
    }
    for (int c = 1; c < t.cols; ++c) {
      const int x = t.x0 + c * t.tw / t.cols;
      fill_rect(img, x, t.y0, x + t.thick, t.y0 + t.th, ink);
    }
    if (!t.borderless) {
      fill_rect(img, t.x0, t.y0, t.x0 + t.tw, t.y0 + t.thick, ink);
      fill_rect(img, t.x0, t.y0 + t.th - t.thick, t.x0 + t.tw, t.y0 + t.th, ink);
      fill_rect(img, t.x0, t.y0, t.x0 + t.thick, t.y0 + t.th, ink);
      fill_rect(img, t.x0 + t.tw - t.thick, t.y0, t.x0 + t.tw, t.y0 + t.th, ink);
    }
  }

  img.boxes = placed;
  return img;
}

DatasetSplit make_splits(int n_images, double fraction, uint64_t seed, double val_fraction) {
  if (fraction <= 0 || fraction >= 1) throw ConfigError("make_splits: fraction must be in (0,1)");
  DatasetSplit s;
  s.fraction = fraction;
  s.seed = seed;
  std::vector<int> ids(static_cast<size_t>(n_images));
  for (int i = 0; i < n_images; ++i) ids[static_cast<size_t>(i)] = i;
  Rng rng = Rng::derive(seed, 0x5B117);
  for (int i = n_images - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
    std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
  }
  const int n_val = static_cast<int>(std::lround(n_images * val_fraction));
  const int n_train = n_images - n_val;
  const int n_lab = static_cast<int>(std::lround(n_train * fraction));
  s.validation.assign(ids.begin(), ids.begin() + n_val);
  s.labeled.assign(ids.begin() + n_val, ids.begin() + n_val + n_lab);
  s.unlabeled.assign(ids.begin() + n_val + n_lab, ids.end());
  return s;
}

void write_image(const std::string& path, const AnnotatedImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels.size());
  for (size_t i = 0; i < img.pixels.size(); ++i)
    bytes[i] = static_cast<unsigned char>(
        std::clamp(static_cast<int>(std::lround(img.pixels[i] * 255.0)), 0, 255));
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

AnnotatedImage read_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open image: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5") throw ParseError("not a P5 PGM (byte offset 0): " + path);
  int w = 0, h = 0, maxv = 0;
  f >> w >> h >> maxv;
  if (!f || w <= 0 || h <= 0) throw ParseError("bad PGM dimensions: " + path);
  if (maxv != 255) throw ParseError("unsupported PGM maxval: " + path);
  f.get();  // single whitespace after header
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size())) {
    const auto off = static_cast<long>(f.tellg());
    throw ParseError("truncated PGM at byte " + std::to_string(off < 0 ? 0 : off) + ": " + path);
  }
  AnnotatedImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

void write_annotations(const std::string& path, const AnnotationFile& af) {
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  for (const auto& im : af.images)
    j["images"].push_back(
        {{"id", im.id}, {"file", im.file}, {"width", im.width}, {"height", im.height}});
  j["annotations"] = nlohmann::json::array();
  for (const auto& a : af.annotations) {
    nlohmann::json e = {{"image_id", a.image_id},
                        {"bbox", {a.box.cx, a.box.cy, a.box.w, a.box.h}},
                        {"category", "table"}};
    if (a.score >= 0) e["score"] = a.score;
    j["annotations"].push_back(e);
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
}

AnnotationFile read_annotations(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open annotations: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("annotation JSON parse error: " + std::string(e.what()));
  }
  AnnotationFile af;
  if (!j.contains("images") || !j["images"].is_array())
    throw ParseError("annotations: missing field 'images'");
  if (!j.contains("annotations") || !j["annotations"].is_array())
    throw ParseError("annotations: missing field 'annotations'");
  for (const auto& e : j["images"]) {
    for (const char* k : {"id", "file", "width", "height"})
      if (!e.contains(k)) throw ParseError(std::string("annotations: image missing field '") + k + "'");
    af.images.push_back({e["id"].get<int>(), e["file"].get<std::string>(), e["width"].get<int>(),
                         e["height"].get<int>()});
  }
  for (const auto& e : j["annotations"]) {
    for (const char* k : {"image_id", "bbox"})
      if (!e.contains(k))
        throw ParseError(std::string("annotations: annotation missing field '") + k + "'");
    const auto& bb = e["bbox"];
    if (!bb.is_array() || bb.size() != 4) throw ParseError("annotations: field 'bbox' must have 4 numbers");
    AnnotationRecord r;
    r.image_id = e["image_id"].get<int>();
    r.box = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
    if (!(r.box.cx >= 0 && r.box.cx <= 1 && r.box.cy >= 0 && r.box.cy <= 1 && r.box.w > 0 &&
          r.box.w <= 1 && r.box.h > 0 && r.box.h <= 1))
      throw ParseError("annotations: field 'bbox' outside [0,1]");
    if (e.contains("score")) r.score = e["score"].get<double>();
    af.annotations.push_back(r);
  }
  return af;
}

void write_split(const std::string& path, const DatasetSplit& s) {
  nlohmann::json j = {{"labeled", s.labeled},
                      {"unlabeled", s.unlabeled},
                      {"validation", s.validation},
                      {"fraction", s.fraction},
                      {"seed", s.seed}};
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
}

DatasetSplit read_split(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open split: " + path);
  nlohmann::json j;
  f >> j;
  DatasetSplit s;
  s.labeled = j.at("labeled").get<std::vector<int>>();
  s.unlabeled = j.at("unlabeled").get<std::vector<int>>();
  s.validation = j.at("validation").get<std::vector<int>>();
  s.fraction = j.at("fraction").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

void generate_dataset(const std::string& root, int count, uint64_t seed, double fraction,
                      const GenConfig& cfg) {
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "labels");
  AnnotationFile af;
  for (int i = 0; i < count; ++i) {
    AnnotatedImage img = generate_document(seed * 1000003ull + static_cast<uint64_t>(i), cfg);
    img.id = i;
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06d.pgm", i);
    write_image((fs::path(root) / "images" / name).string(), img);
    af.images.push_back({i, name, img.width, img.height});
    for (const auto& b : img.boxes) af.annotations.push_back({i, b, -1});
  }
  write_annotations((fs::path(root) / "labels" / "annotations.json").string(), af);
  write_split((fs::path(root) / "split.json").string(), make_splits(count, fraction, seed));
}

}  // namespace tabledet
