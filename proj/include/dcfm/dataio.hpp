#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dcfm/common.hpp"
#include "dcfm/model.hpp"
#include "dcfm/tensor.hpp"

namespace dcfm {

// Interleaved 8-bit raster; c is 1 (PGM) or 3 (PPM).
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> data;

  uint8_t& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
  uint8_t at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
};

Image read_netpbm(const std::string& path);
void write_netpbm(const std::string& path, const Image& img);

LabelMap read_label(const std::string& path);
void write_label(const std::string& path, const LabelMap& lm);

Tensor<float> image_to_tensor(const Image& img);  // planar [C,H,W], values 0..255
Image tensor_to_image(const Tensor<float>& t);    // round + clamp to [0,255]

struct VideoClip {
  std::string id;
  std::vector<Tensor<float>> frames;  // [3,H,W] in [0,255]
  std::map<int, LabelMap> labels;     // frame index -> label map
};

struct Dataset {
  int num_classes = 0;
  int height = 0;
  int width = 0;
  std::vector<VideoClip> clips;
};

struct GenConfig {
  int videos = 20;
  int frames_per_video = 12;
  int height = 48;
  int width = 64;
  int classes = 4;
  int shapes_per_video = 3;
  double max_speed = 2.0;
  double noise_sigma = 0.0;
  enum class LabelMode { dense, sparse };
  LabelMode label_mode = LabelMode::dense;
  int seed = 0;

  void validate() const;
};

// One moving shape: an axis-aligned rectangle or ellipse with a constant
// velocity, bouncing off the frame borders. Sizes are half-extents.
struct ShapeSpec {
  int cls = 1;
  bool disk = false;
  double cx = 0, cy = 0;  // center at t = 0
  double sx = 1, sy = 1;
  double vx = 0, vy = 0;
  uint8_t color[3] = {0, 0, 0};
};

// The seeded shape draw for one clip; exposed so tests can re-rasterize
// frames independently of the generator's own painter.
std::vector<ShapeSpec> clip_shapes(const GenConfig& cfg, int clip_index);

// Renders clips + labels under out_dir, writes out_dir/manifest.json, and
// returns the manifest path. Byte-deterministic for a fixed config.
std::string generate_synthetic(const GenConfig& cfg, const std::string& out_dir);

Dataset load_manifest(const std::string& manifest_path);

// Binary model container: "DCFM" magic, u32 version, length-prefixed config
// JSON, then per parameter: name, dims, raw little-endian f32 data.
void save_model(const std::string& path, const DcfmModel<float>& model);
DcfmModel<float> load_model(const std::string& path);

}  // namespace dcfm
