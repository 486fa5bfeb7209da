#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"

#include "dcfm/dataio.hpp"

using namespace dcfm;
namespace fs = std::filesystem;

namespace {

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Independent label rasterizer: bounce each shape center inside its legal
// band, then paint rectangles / ellipses in order. Frozen against the
// generator's painting rules.
LabelMap rasterize_labels(const GenConfig& cfg, const std::vector<ShapeSpec>& shapes, int t) {
  auto bounce = [](double p, double lo, double hi) {
    if (hi <= lo) return lo;
    const double period = 2.0 * (hi - lo);
    double q = std::fmod(p - lo, period);
    if (q < 0) q += period;
    return q <= period / 2 ? lo + q : lo + period - q;
  };
  LabelMap lm(cfg.height, cfg.width, 0);
  for (const ShapeSpec& sp : shapes) {
    const double cx = bounce(sp.cx + sp.vx * t, sp.sx, cfg.width - 1 - sp.sx);
    const double cy = bounce(sp.cy + sp.vy * t, sp.sy, cfg.height - 1 - sp.sy);
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x) {
        if (x < cx - sp.sx || x > cx + sp.sx || y < cy - sp.sy || y > cy + sp.sy) continue;
        if (sp.disk) {
          const double dx = (x - cx) / sp.sx, dy = (y - cy) / sp.sy;
          if (dx * dx + dy * dy > 1.0) continue;
        }
        lm.at(y, x) = static_cast<uint8_t>(sp.cls);
      }
  }
  return lm;
}

GenConfig tiny_gen(int seed) {
  GenConfig cfg;
  cfg.videos = 2;
  cfg.frames_per_video = 5;
  cfg.height = 32;
  cfg.width = 32;
  cfg.classes = 4;
  cfg.shapes_per_video = 3;
  cfg.max_speed = 3.0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_SUITE("dataio.netpbm") {

TEST_CASE("grayscale and color round trips are lossless") {
  const std::string dir = testutil::make_temp_dir("pbm");
  Rng rng(1);

  LabelMap lm(5, 7);
  for (auto& v : lm.data) v = static_cast<uint8_t>(rng.uniform_int(0, 255));
  write_label(dir + "/a.pgm", lm);
  CHECK(read_label(dir + "/a.pgm") == lm);

  Image img;
  img.h = 4;
  img.w = 6;
  img.c = 3;
  img.data.resize(72);
  for (auto& v : img.data) v = static_cast<uint8_t>(rng.uniform_int(0, 255));
  write_netpbm(dir + "/b.ppm", img);
  const Image back = read_netpbm(dir + "/b.ppm");
  CHECK(back.h == 4);
  CHECK(back.w == 6);
  CHECK(back.c == 3);
  CHECK(back.data == img.data);
}

TEST_CASE("headers with comments and loose whitespace parse") {
  const std::string dir = testutil::make_temp_dir("pbm_hdr");
  write_bytes(dir + "/c.pgm", "P5\n# produced by hand\n  2\t2\n# maxval next\n255\nABCD");
  const Image img = read_netpbm(dir + "/c.pgm");
  CHECK(img.w == 2);
  CHECK(img.h == 2);
  CHECK(img.data == std::vector<uint8_t>{'A', 'B', 'C', 'D'});
}

TEST_CASE("malformed files are rejected") {
  const std::string dir = testutil::make_temp_dir("pbm_bad");
  write_bytes(dir + "/wide.pgm", "P5\n2 2\n65535\nxxxxxxxx");
  CHECK_THROWS_AS(read_netpbm(dir + "/wide.pgm"), IoError);
  write_bytes(dir + "/magic.pgm", "P3\n2 2\n255\nABCD");
  CHECK_THROWS_AS(read_netpbm(dir + "/magic.pgm"), IoError);
  write_bytes(dir + "/short.pgm", "P5\n4 4\n255\nAB");
  CHECK_THROWS_AS(read_netpbm(dir + "/short.pgm"), IoError);
  write_bytes(dir + "/garble.pgm", "P5\ntwo 2\n255\nABCD");
  CHECK_THROWS_AS(read_netpbm(dir + "/garble.pgm"), IoError);
  CHECK_THROWS_AS(read_netpbm(dir + "/missing.pgm"), IoError);

  write_bytes(dir + "/color.ppm", std::string("P6\n1 1\n255\nRGB"));
  CHECK_THROWS_AS(read_label(dir + "/color.ppm"), IoError);

  Image img;
  img.h = 2;
  img.w = 2;
  img.c = 2;
  img.data.resize(8);
  CHECK_THROWS_AS(write_netpbm(dir + "/bad.ppm", img), ConfigError);
}

TEST_CASE("image/tensor conversion round trips and clamps") {
  Image img;
  img.h = 2;
  img.w = 2;
  img.c = 3;
  img.data = {0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255};
  const Tensor<float> t = image_to_tensor(img);
  CHECK(t.shape() == std::vector<int>{3, 2, 2});
  // planar layout: channel 0 holds the first interleaved byte of each pixel
  CHECK(t.data()[0] == 0.0f);
  CHECK(t.data()[3] == 253.0f);
  const Image back = tensor_to_image(t);
  CHECK(back.data == img.data);

  auto wild = Tensor<float>::from_data({1, 1, 2}, {-5.0f, 300.0f});
  const Image clamped = tensor_to_image(wild);
  CHECK(clamped.data == std::vector<uint8_t>{0, 255});
}

}  // TEST_SUITE dataio.netpbm

TEST_SUITE("dataio.generator") {

TEST_CASE("generation is byte-deterministic for a fixed config") {
  GenConfig cfg = tiny_gen(90);
  cfg.noise_sigma = 1.5;
  const std::string d1 = testutil::make_temp_dir("gen_a");
  const std::string d2 = testutil::make_temp_dir("gen_b");
  generate_synthetic(cfg, d1);
  generate_synthetic(cfg, d2);

  size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const std::string rel = fs::relative(e.path(), d1).string();
    CHECK(testutil::read_file(e.path().string()) ==
          testutil::read_file((fs::path(d2) / rel).string()));
  }
  // 2 clips x (5 frames + 5 dense labels) + manifest + resolved nothing else
  CHECK(files == 21);

  GenConfig other = cfg;
  other.seed = 91;
  const std::string d3 = testutil::make_temp_dir("gen_c");
  generate_synthetic(other, d3);
  CHECK(testutil::read_file(d1 + "/clips/clip_0000/frame_0000.ppm") !=
        testutil::read_file(d3 + "/clips/clip_0000/frame_0000.ppm"));
}

TEST_CASE("zero speed and zero noise freeze the clip") {
  GenConfig cfg = tiny_gen(9);
  cfg.max_speed = 0.0;
  const std::string dir = testutil::make_temp_dir("gen_static");
  generate_synthetic(cfg, dir);
  const std::string first = testutil::read_file(dir + "/clips/clip_0000/frame_0000.ppm");
  for (int t = 1; t < cfg.frames_per_video; ++t) {
    char name[64];
    std::snprintf(name, sizeof name, "%s/clips/clip_0000/frame_%04d.ppm", dir.c_str(), t);
    CHECK(testutil::read_file(name) == first);
  }
}

TEST_CASE("labels match an independent rasterization of the drawn shapes") {
  GenConfig cfg = tiny_gen(77);
  const std::string dir = testutil::make_temp_dir("gen_raster");
  generate_synthetic(cfg, dir);
  for (int ci = 0; ci < cfg.videos; ++ci) {
    const std::vector<ShapeSpec> shapes = clip_shapes(cfg, ci);
    REQUIRE(shapes.size() == static_cast<size_t>(cfg.shapes_per_video));
    for (const ShapeSpec& sp : shapes) {
      CHECK(sp.cls >= 1);
      CHECK(sp.cls < cfg.classes);
    }
    for (int t = 0; t < cfg.frames_per_video; ++t) {
      char name[96];
      std::snprintf(name, sizeof name, "%s/clips/clip_%04d/label_%04d.pgm", dir.c_str(), ci, t);
      CHECK(read_label(name) == rasterize_labels(cfg, shapes, t));
    }
  }
}

TEST_CASE("most seeds produce clips covering every class") {
  GenConfig cfg = tiny_gen(0);
  cfg.videos = 1;
  cfg.frames_per_video = 1;
  int covered = 0;
  for (int seed = 0; seed < 50; ++seed) {
    cfg.seed = seed;
    const LabelMap lm = rasterize_labels(cfg, clip_shapes(cfg, 0), 0);
    std::vector<bool> present(static_cast<size_t>(cfg.classes), false);
    for (uint8_t v : lm.data) present[v] = true;
    if (std::all_of(present.begin(), present.end(), [](bool b) { return b; })) ++covered;
  }
  CHECK(covered >= 45);
}

TEST_CASE("sparse labeling keeps only the middle frame") {
  GenConfig cfg = tiny_gen(31);
  cfg.label_mode = GenConfig::LabelMode::sparse;
  const std::string dir = testutil::make_temp_dir("gen_sparse");
  const std::string manifest = generate_synthetic(cfg, dir);
  const Dataset ds = load_manifest(manifest);
  for (const VideoClip& clip : ds.clips) {
    REQUIRE(clip.labels.size() == 1);
    CHECK(clip.labels.begin()->first == cfg.frames_per_video / 2);
  }
}

TEST_CASE("config validation rejects unusable settings") {
  GenConfig cfg = tiny_gen(0);
  cfg.height = 30;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_gen(0);
  cfg.classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_gen(0);
  cfg.videos = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_gen(0);
  cfg.max_speed = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

}  // TEST_SUITE dataio.generator

TEST_SUITE("dataio.manifest") {

TEST_CASE("a generated dataset loads with matching structure") {
  GenConfig cfg = tiny_gen(41);
  const std::string dir = testutil::make_temp_dir("mani_ok");
  const Dataset ds = load_manifest(generate_synthetic(cfg, dir));
  CHECK(ds.num_classes == cfg.classes);
  CHECK(ds.height == cfg.height);
  CHECK(ds.width == cfg.width);
  REQUIRE(ds.clips.size() == static_cast<size_t>(cfg.videos));
  for (const VideoClip& clip : ds.clips) {
    CHECK(clip.frames.size() == static_cast<size_t>(cfg.frames_per_video));
    CHECK(clip.labels.size() == static_cast<size_t>(cfg.frames_per_video));
    CHECK(clip.frames[0].shape() == std::vector<int>{3, cfg.height, cfg.width});
    // frame tensors carry raw pixel values
    for (float v : clip.frames[0].data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 255.0f);
    }
  }
}

TEST_CASE("schema and file problems are reported as IO errors") {
  const std::string dir = testutil::make_temp_dir("mani_bad");
  LabelMap lm(16, 16, 0);
  write_label(dir + "/l.pgm", lm);
  Image frame;
  frame.h = 16;
  frame.w = 16;
  frame.c = 3;
  frame.data.assign(16 * 16 * 3, 100);
  write_netpbm(dir + "/f.ppm", frame);

  auto manifest = [&](const std::string& body) {
    const std::string p = dir + "/m.json";
    write_bytes(p, body);
    return p;
  };

  CHECK_THROWS_AS(load_manifest(dir + "/none.json"), IoError);
  CHECK_THROWS_AS(load_manifest(manifest("{not json")), IoError);
  CHECK_THROWS_AS(load_manifest(manifest(R"({"num_classes":4,"height":16,"width":16})")),
                  IoError);  // no videos
  CHECK_THROWS_AS(
      load_manifest(manifest(
          R"({"num_classes":1,"height":16,"width":16,"videos":[]})")),
      IoError);  // too few classes
  CHECK_THROWS_AS(
      load_manifest(manifest(
          R"({"num_classes":4,"height":16,"width":16,"videos":[]})")),
      IoError);  // empty dataset
  CHECK_THROWS_AS(
      load_manifest(manifest(
          R"({"num_classes":4,"height":16,"width":16,"videos":[{"id":"a","frames":["gone.ppm"]}]})")),
      IoError);  // missing frame file
  CHECK_THROWS_AS(
      load_manifest(manifest(
          R"({"num_classes":4,"height":32,"width":32,"videos":[{"id":"a","frames":["f.ppm"]}]})")),
      IoError);  // dimension mismatch against the manifest
  CHECK_THROWS_AS(
      load_manifest(manifest(
          R"({"num_classes":4,"height":16,"width":16,"videos":[{"id":"a","frames":["f.ppm"],"labels":{"3":"l.pgm"}}]})")),
      IoError);  // label index past the clip
  CHECK_THROWS_AS(
      load_manifest(manifest(
          R"({"num_classes":4,"height":16,"width":16,"videos":[{"id":"a","frames":["f.ppm"],"labels":{"x":"l.pgm"}}]})")),
      IoError);  // non-numeric label index
  CHECK_THROWS_AS(
      load_manifest(manifest(
          R"({"num_classes":4,"height":16,"width":16,"videos":[{"id":"a","frames":["f.ppm"]},{"id":"a","frames":["f.ppm"]}]})")),
      IoError);  // duplicate id

  LabelMap hot(16, 16, 9);  // out-of-range class id
  write_label(dir + "/hot.pgm", hot);
  CHECK_THROWS_AS(
      load_manifest(manifest(
          R"({"num_classes":4,"height":16,"width":16,"videos":[{"id":"a","frames":["f.ppm"],"labels":{"0":"hot.pgm"}}]})")),
      IoError);

  // the ignore value itself is allowed in labels
  LabelMap ign(16, 16, kIgnoreLabel);
  write_label(dir + "/ign.pgm", ign);
  CHECK_NOTHROW(load_manifest(manifest(
      R"({"num_classes":4,"height":16,"width":16,"videos":[{"id":"a","frames":["f.ppm"],"labels":{"0":"ign.pgm"}}]})")));
}

}  // TEST_SUITE dataio.manifest
