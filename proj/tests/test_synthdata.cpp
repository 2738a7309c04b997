#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "tabledet/geometry.hpp"
#include "tabledet/synthdata.hpp"

using namespace tabledet;
namespace fs = std::filesystem;

namespace {

// FNV-1a over quantized pixels + box coords; stable across platforms since
// everything is derived from integer arithmetic on exact doubles.
uint64_t fingerprint(const AnnotatedImage& img) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](uint64_t x) {
    for (int i = 0; i < 8; ++i) {
      h ^= (x >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (double p : img.pixels) mix(static_cast<uint64_t>(std::lround(p * 255.0)));
  for (const auto& b : img.boxes) {
    mix(static_cast<uint64_t>(std::llround(b.cx * 1e9)));
    mix(static_cast<uint64_t>(std::llround(b.cy * 1e9)));
    mix(static_cast<uint64_t>(std::llround(b.w * 1e9)));
    mix(static_cast<uint64_t>(std::llround(b.h * 1e9)));
  }
  return h;
}

// frozen fingerprints for seeds 1..5 under the default config
constexpr uint64_t kGolden[5] = {0xc27fb2fa127ef98aull, 0x90b895bff4f5657aull,
                                 0x360d249c77a784efull, 0x10e124accb9cd464ull,
                                 0x79f9191bbcdf4e67ull};

fs::path temp_dir() {
  fs::path p = fs::temp_directory_path() / ("synthdata_test_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  GenConfig cfg;
  for (uint64_t seed : {7ull, 99ull, 12345ull}) {
    AnnotatedImage a = generate_document(seed, cfg);
    AnnotatedImage b = generate_document(seed, cfg);
    CHECK(a.pixels == b.pixels);
    REQUIRE(a.boxes.size() == b.boxes.size());
    for (size_t i = 0; i < a.boxes.size(); ++i) {
      CHECK(a.boxes[i].cx == b.boxes[i].cx);
      CHECK(a.boxes[i].w == b.boxes[i].w);
    }
  }
}

TEST_CASE("golden fingerprints") {
  GenConfig cfg;
  for (int i = 0; i < 5; ++i) {
    const uint64_t got = fingerprint(generate_document(static_cast<uint64_t>(i + 1), cfg));
    if (kGolden[i] == 0) {
      std::printf("GOLDEN[%d] = 0x%016llxull\n", i, static_cast<unsigned long long>(got));
      CHECK_MESSAGE(false, "golden fingerprint not frozen yet");
    } else {
      CHECK(got == kGolden[i]);
    }
  }
}

TEST_CASE("box invariants over many seeds") {
  GenConfig cfg;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    AnnotatedImage img = generate_document(seed, cfg);
    REQUIRE(img.boxes.size() >= 1);
    REQUIRE(img.boxes.size() <= 3);
    for (const auto& b : img.boxes) {
      CHECK(b.x1() >= 0.0);
      CHECK(b.y1() >= 0.0);
      CHECK(b.x2() <= 1.0);
      CHECK(b.y2() <= 1.0);
      CHECK(b.w > 0.0);
      CHECK(b.h > 0.0);
    }
    for (size_t i = 0; i < img.boxes.size(); ++i)
      for (size_t j = i + 1; j < img.boxes.size(); ++j)
        CHECK(iou(img.boxes[i], img.boxes[j]) < 0.05);
  }
}

TEST_CASE("pages are mostly light background") {
  GenConfig cfg;
  double acc = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    AnnotatedImage img = generate_document(seed, cfg);
    double s = 0;
    for (double p : img.pixels) s += p;
    acc += s / img.pixels.size();
  }
  CHECK(acc / 100 > 0.7);
}

TEST_CASE("pixels stay inside [0,1]") {
  GenConfig cfg;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    AnnotatedImage img = generate_document(seed, cfg);
    for (double p : img.pixels) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }
  }
}

TEST_CASE("pgm round trip") {
  GenConfig cfg;
  AnnotatedImage img = generate_document(42, cfg);
  fs::path dir = temp_dir();
  fs::path file = dir / "img.pgm";
  write_image(file.string(), img);
  AnnotatedImage back = read_image(file.string());
  CHECK(back.width == img.width);
  CHECK(back.height == img.height);
  for (size_t i = 0; i < img.pixels.size(); ++i)
    CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= 0.5 / 255.0 + 1e-12);
  fs::remove_all(dir);
}

TEST_CASE("truncated pgm reports byte offset") {
  fs::path dir = temp_dir();
  fs::path file = dir / "trunc.pgm";
  {
    std::ofstream out(file, std::ios::binary);
    out << "P5\n16 16\n255\n";
    out.write("\x10\x20\x30", 3);  // only 3 of 256 payload bytes
  }
  CHECK_THROWS_AS(read_image(file.string()), ParseError);
  try {
    read_image(file.string());
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("annotation json round trip") {
  GenConfig cfg;
  AnnotationFile af;
  for (uint64_t s = 0; s < 4; ++s) {
    AnnotatedImage img = generate_document(s, cfg);
    const int id = static_cast<int>(s);
    af.images.push_back({id, "img_" + std::to_string(id) + ".pgm", img.width, img.height});
    for (const auto& b : img.boxes) af.annotations.push_back({id, b, -1});
  }
  fs::path dir = temp_dir();
  fs::path file = dir / "ann.json";
  write_annotations(file.string(), af);
  AnnotationFile back = read_annotations(file.string());
  REQUIRE(back.images.size() == af.images.size());
  REQUIRE(back.annotations.size() == af.annotations.size());
  for (size_t i = 0; i < af.annotations.size(); ++i) {
    CHECK(back.annotations[i].image_id == af.annotations[i].image_id);
    CHECK(back.annotations[i].box.cx ==
          doctest::Approx(af.annotations[i].box.cx).epsilon(1e-12));
    CHECK(back.annotations[i].box.h == doctest::Approx(af.annotations[i].box.h).epsilon(1e-12));
    CHECK(back.annotations[i].score < 0);
  }
  fs::remove_all(dir);
}

TEST_CASE("prediction scores survive the round trip") {
  AnnotationFile af;
  af.images.push_back({0, "x.pgm", 128, 128});
  af.annotations.push_back({0, {0.5, 0.5, 0.2, 0.2}, 0.875});
  fs::path dir = temp_dir();
  fs::path file = dir / "pred.json";
  write_annotations(file.string(), af);
  AnnotationFile back = read_annotations(file.string());
  REQUIRE(back.annotations.size() == 1);
  CHECK(back.annotations[0].score == doctest::Approx(0.875).epsilon(1e-12));
  fs::remove_all(dir);
}

TEST_CASE("annotation reader rejects out-of-range bbox and names missing fields") {
  fs::path dir = temp_dir();
  fs::path bad = dir / "bad.json";
  {
    std::ofstream out(bad);
    out << R"({"images":[{"id":0,"file":"a.pgm","width":128,"height":128}],)"
        << R"("annotations":[{"image_id":0,"bbox":[0.5,0.5,1.4,0.2],"category":"table"}]})";
  }
  CHECK_THROWS_AS(read_annotations(bad.string()), ParseError);
  fs::path missing = dir / "missing.json";
  {
    std::ofstream out(missing);
    out << R"({"images":[{"id":0,"file":"a.pgm","width":128,"height":128}],)"
        << R"("annotations":[{"image_id":0,"category":"table"}]})";
  }
  try {
    read_annotations(missing.string());
    CHECK(false);
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("bbox") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("splits are deterministic disjoint and exhaustive") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    DatasetSplit s1 = make_splits(40, 0.25, seed);
    DatasetSplit s2 = make_splits(40, 0.25, seed);
    CHECK(s1.labeled == s2.labeled);
    CHECK(s1.unlabeled == s2.unlabeled);
    CHECK(s1.validation == s2.validation);
    std::set<int> all;
    for (int i : s1.labeled) all.insert(i);
    for (int i : s1.unlabeled) all.insert(i);
    for (int i : s1.validation) all.insert(i);
    CHECK(all.size() == s1.labeled.size() + s1.unlabeled.size() + s1.validation.size());
    CHECK(all.size() == 40u);
    CHECK(s1.validation.size() == 8u);  // 20% validation
  }
}

TEST_CASE("split fraction controls labeled share") {
  DatasetSplit s = make_splits(100, 0.1, 3);
  CHECK(s.validation.size() == 20u);
  CHECK(s.labeled.size() == 8u);  // 10% of the remaining 80
  CHECK(s.unlabeled.size() == 72u);
}

TEST_CASE("split json round trip") {
  DatasetSplit s = make_splits(30, 0.2, 9);
  fs::path dir = temp_dir();
  fs::path file = dir / "split.json";
  write_split(file.string(), s);
  DatasetSplit back = read_split(file.string());
  CHECK(back.labeled == s.labeled);
  CHECK(back.unlabeled == s.unlabeled);
  CHECK(back.validation == s.validation);
  fs::remove_all(dir);
}

TEST_CASE("generate_dataset writes a loadable tree") {
  fs::path dir = temp_dir() / "ds";
  generate_dataset(dir.string(), 12, 77, 0.25);
  CHECK(fs::exists(dir / "labels" / "annotations.json"));
  CHECK(fs::exists(dir / "split.json"));
  AnnotationFile af = read_annotations((dir / "labels" / "annotations.json").string());
  CHECK(af.images.size() == 12u);
  DatasetSplit sp = read_split((dir / "split.json").string());
  CHECK(sp.labeled.size() + sp.unlabeled.size() + sp.validation.size() == 12u);
  int n_img = 0;
  for (auto& e : fs::directory_iterator(dir / "images"))
    if (e.path().extension() == ".pgm") ++n_img;
  CHECK(n_img == 12);
  fs::remove_all(dir.parent_path());
}
