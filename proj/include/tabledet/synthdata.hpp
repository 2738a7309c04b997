#pragma once

#include <string>
#include <vector>

#include "tabledet/geometry.hpp"
#include "tabledet/tensor.hpp"

namespace tabledet {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Grayscale page image in [0,1] with table ground truth.
struct AnnotatedImage {
  int id = 0;
  int width = 0, height = 0;
  std::vector<double> pixels;  // row-major, height*width
  std::vector<BoxCxCyWh> boxes;

  double at(int y, int x) const { return pixels[static_cast<size_t>(y) * width + x]; }
  Tensor image_tensor() const;  // [1 x H x W]
};

struct GenConfig {
  int width = 128;
  int height = 128;
  int min_tables = 1;
  int max_tables = 3;
};

// Fully seed-determined synthetic document page: near-white background,
// text-line distractor strips, 1-3 bordered table grids. GT boxes are the
// tight grid extents and pairwise IoU stays below 0.05.
AnnotatedImage generate_document(uint64_t seed, const GenConfig& cfg = {});

struct DatasetSplit {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
  std::vector<int> validation;
  double fraction = 0;
  uint64_t seed = 0;
};

// Seeded shuffle then prefix split; validation is carved off first
// (val_fraction of the total), the rest splits labeled/unlabeled.
DatasetSplit make_splits(int n_images, double fraction, uint64_t seed,
                         double val_fraction = 0.2);

// Binary PGM (P5, maxval 255).
void write_image(const std::string& path, const AnnotatedImage& img);
AnnotatedImage read_image(const std::string& path);

// Predictions carry a score; ground truth files do not.
struct AnnotationRecord {
  int image_id = 0;
  BoxCxCyWh box;
  double score = -1;  // < 0 means absent
};

struct AnnotationFile {
  struct ImageEntry {
    int id;
    std::string file;
    int width, height;
  };
  std::vector<ImageEntry> images;
  std::vector<AnnotationRecord> annotations;
};

void write_annotations(const std::string& path, const AnnotationFile& af);
AnnotationFile read_annotations(const std::string& path);

void write_split(const std::string& path, const DatasetSplit& s);
DatasetSplit read_split(const std::string& path);

// Full dataset directory: <root>/images/*.pgm, <root>/labels/annotations.json,
// <root>/split.json.
void generate_dataset(const std::string& root, int count, uint64_t seed, double fraction,
                      const GenConfig& cfg = {});

}  // namespace tabledet
