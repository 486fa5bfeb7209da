#include "dcfm/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dcfm/config_json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dcfm {

// --- netpbm -------------------------------------------------------------------

namespace {

// Next whitespace-delimited token, skipping '#' comment lines.
std::string pbm_token(std::istream& in, const std::string& path) {
  std::string tok;
  for (;;) {
    const int ch = in.get();
    if (ch == EOF) {
      if (!tok.empty()) return tok;
      throw IoError(path + ": truncated header");
    }
    if (ch == '#' && tok.empty()) {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
}

int pbm_int(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = pbm_token(in, path);
  try {
    size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IoError(path + ": bad " + what + " field '" + tok + "'");
  }
}

}  // namespace

Image read_netpbm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  const std::string magic = pbm_token(in, path);
  int channels = 0;
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    throw IoError(path + ": unknown magic '" + magic + "' (want P5 or P6)");

  Image img;
  img.c = channels;
  img.w = pbm_int(in, path, "width");
  img.h = pbm_int(in, path, "height");
  if (img.w <= 0 || img.h <= 0) throw IoError(path + ": non-positive dimensions");
  const int maxval = pbm_int(in, path, "maxval");
  if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
  // exactly one whitespace byte separates the header from the raster
  const size_t n = static_cast<size_t>(img.h) * img.w * channels;
  img.data.resize(n);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n) throw IoError(path + ": truncated pixel data");
  return img;
}

void write_netpbm(const std::string& path, const Image& img) {
  if (img.c != 1 && img.c != 3) throw ConfigError("write_netpbm: channels must be 1 or 3");
  if (img.h <= 0 || img.w <= 0) throw ConfigError("write_netpbm: non-positive dimensions");
  if (img.data.size() != static_cast<size_t>(img.h) * img.w * img.c)
    throw ConfigError("write_netpbm: data size does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << (img.c == 3 ? "P6" : "P5") << "\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError(path + ": write failed");
}

LabelMap read_label(const std::string& path) {
  const Image img = read_netpbm(path);
  if (img.c != 1) throw IoError(path + ": label maps must be single-channel (P5)");
  LabelMap lm(img.h, img.w);
  lm.data = img.data;
  return lm;
}

void write_label(const std::string& path, const LabelMap& lm) {
  Image img;
  img.h = lm.h;
  img.w = lm.w;
  img.c = 1;
  img.data = lm.data;
  write_netpbm(path, img);
}

Tensor<float> image_to_tensor(const Image& img) {
  Tensor<float> t = Tensor<float>::zeros({img.c, img.h, img.w});
  auto d = t.data();
  const size_t plane = static_cast<size_t>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < img.c; ++c)
        d[c * plane + y * static_cast<size_t>(img.w) + x] = img.at(y, x, c);
  return t;
}

Image tensor_to_image(const Tensor<float>& t) {
  if (!t.defined() || t.ndim() != 3) throw ConfigError("tensor_to_image: want [C,H,W]");
  Image img;
  img.c = t.dim(0);
  img.h = t.dim(1);
  img.w = t.dim(2);
  img.data.resize(t.numel());
  auto d = t.data();
  const size_t plane = static_cast<size_t>(img.h) * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < img.c; ++c) {
        const float v = std::round(d[c * plane + y * static_cast<size_t>(img.w) + x]);
        img.at(y, x, c) = static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f));
      }
  return img;
}

// --- synthetic generator --------------------------------------------------------

void GenConfig::validate() const {
  if (videos < 1) throw ConfigError("gen: videos must be >= 1");
  if (frames_per_video < 1) throw ConfigError("gen: frames_per_video must be >= 1");
  if (classes < 2) throw ConfigError("gen: classes must be >= 2");
  if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0)
    throw ConfigError("gen: height and width must be positive multiples of 16");
  if (shapes_per_video < 1) throw ConfigError("gen: shapes_per_video must be >= 1");
  if (max_speed < 0) throw ConfigError("gen: max_speed must be >= 0");
  if (noise_sigma < 0) throw ConfigError("gen: noise_sigma must be >= 0");
}

namespace {

struct TextureParams {
  double base[3], amp[3], fx[3], fy[3], phase[3];
};

constexpr uint8_t kPalette[][3] = {
    {210, 70, 60},  {70, 200, 90},  {70, 100, 220}, {230, 200, 70},
    {180, 70, 200}, {60, 200, 200}, {240, 140, 50}, {150, 230, 150},
    {120, 60, 30},  {220, 120, 180}, {40, 140, 110}, {200, 200, 200},
    {90, 50, 160},  {160, 160, 60}, {60, 60, 120},  {240, 90, 120},
};
constexpr int kPaletteSize = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));

// One clip's seeded parameter draw. The call order here is the generator's
// byte-level contract: texture first, then shapes, then (by the caller) the
// per-frame noise stream.
TextureParams draw_clip_params(const GenConfig& cfg, Rng& rng, std::vector<ShapeSpec>* shapes) {
  TextureParams tex{};
  for (int c = 0; c < 3; ++c) {
    tex.base[c] = rng.uniform(80.0, 130.0);
    tex.amp[c] = rng.uniform(18.0, 40.0);
    tex.fx[c] = rng.uniform(0.7, 2.2);
    tex.fy[c] = rng.uniform(0.7, 2.2);
    tex.phase[c] = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  }
  const double d = std::min(cfg.height, cfg.width);
  const double smin = std::max(2.0, d / 12.0);
  const double smax = d / 4.0;
  shapes->clear();
  for (int s = 0; s < cfg.shapes_per_video; ++s) {
    ShapeSpec sp;
    sp.cls = 1 + s % (cfg.classes - 1);
    sp.disk = rng.coin();
    sp.sx = rng.uniform(smin, smax);
    sp.sy = rng.uniform(smin, smax);
    sp.cx = rng.uniform(sp.sx, cfg.width - 1 - sp.sx);
    sp.cy = rng.uniform(sp.sy, cfg.height - 1 - sp.sy);
    sp.vx = rng.uniform(-cfg.max_speed, cfg.max_speed);
    sp.vy = rng.uniform(-cfg.max_speed, cfg.max_speed);
    const uint8_t* base = kPalette[(sp.cls - 1) % kPaletteSize];
    for (int c = 0; c < 3; ++c) {
      const int v = static_cast<int>(base[c]) + rng.uniform_int(-18, 18);
      sp.color[c] = static_cast<uint8_t>(std::clamp(v, 0, 255));
    }
    shapes->push_back(sp);
  }
  return tex;
}

// Bounce p back and forth inside [lo, hi].
double reflect_into(double p, double lo, double hi) {
  if (hi <= lo) return lo;
  const double span = hi - lo;
  double q = std::fmod(p - lo, 2.0 * span);
  if (q < 0) q += 2.0 * span;
  return lo + (q <= span ? q : 2.0 * span - q);
}

uint8_t quantize(double v) {
  return static_cast<uint8_t>(std::clamp(std::lround(v), 0l, 255l));
}

void render_frame(const GenConfig& cfg, const TextureParams& tex,
                  const std::vector<ShapeSpec>& shapes, int t, Image* frame, LabelMap* label) {
  const int h = cfg.height, w = cfg.width;
  frame->h = h;
  frame->w = w;
  frame->c = 3;
  frame->data.resize(static_cast<size_t>(h) * w * 3);
  *label = LabelMap(h, w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = tex.base[c] +
                         tex.amp[c] * std::sin(2.0 * 3.14159265358979323846 *
                                                   (tex.fx[c] * x / w + tex.fy[c] * y / h) +
                                               tex.phase[c]);
        frame->at(y, x, c) = quantize(v);
      }
  // painter's order: later shapes draw over earlier ones
  for (const ShapeSpec& sp : shapes) {
    const double cx = reflect_into(sp.cx + sp.vx * t, sp.sx, w - 1 - sp.sx);
    const double cy = reflect_into(sp.cy + sp.vy * t, sp.sy, h - 1 - sp.sy);
    const int x0 = std::max(0, static_cast<int>(std::ceil(cx - sp.sx)));
    const int x1 = std::min(w - 1, static_cast<int>(std::floor(cx + sp.sx)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(cy - sp.sy)));
    const int y1 = std::min(h - 1, static_cast<int>(std::floor(cy + sp.sy)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        if (sp.disk) {
          const double dx = (x - cx) / sp.sx, dy = (y - cy) / sp.sy;
          if (dx * dx + dy * dy > 1.0) continue;
        }
        label->at(y, x) = static_cast<uint8_t>(sp.cls);
        for (int c = 0; c < 3; ++c) frame->at(y, x, c) = sp.color[c];
      }
  }
}

std::string clip_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "clip_%04d", index);
  return buf;
}

std::string frame_name(int index, const char* stem, const char* ext) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s_%04d.%s", stem, index, ext);
  return buf;
}

}  // namespace

std::vector<ShapeSpec> clip_shapes(const GenConfig& cfg, int clip_index) {
  cfg.validate();
  Rng rng(Rng::derive(static_cast<uint64_t>(cfg.seed), static_cast<uint64_t>(clip_index)));
  std::vector<ShapeSpec> shapes;
  draw_clip_params(cfg, rng, &shapes);
  return shapes;
}

std::string generate_synthetic(const GenConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "clips", ec);
  if (ec) throw IoError(out_dir + ": cannot create output directory (" + ec.message() + ")");

  json videos = json::array();
  for (int ci = 0; ci < cfg.videos; ++ci) {
    const std::string id = clip_name(ci);
    const fs::path clip_dir = fs::path(out_dir) / "clips" / id;
    fs::create_directories(clip_dir, ec);
    if (ec) throw IoError(clip_dir.string() + ": cannot create directory (" + ec.message() + ")");

    Rng rng(Rng::derive(static_cast<uint64_t>(cfg.seed), static_cast<uint64_t>(ci)));
    std::vector<ShapeSpec> shapes;
    const TextureParams tex = draw_clip_params(cfg, rng, &shapes);

    json frame_paths = json::array();
    json label_paths = json::object();
    const int labeled_only = cfg.frames_per_video / 2;  // sparse mode: middle frame
    for (int t = 0; t < cfg.frames_per_video; ++t) {
      Image frame;
      LabelMap label;
      render_frame(cfg, tex, shapes, t, &frame, &label);
      if (cfg.noise_sigma > 0)
        for (auto& px : frame.data)
          px = quantize(px + rng.normal() * cfg.noise_sigma);

      const std::string fname = frame_name(t, "frame", "ppm");
      write_netpbm((clip_dir / fname).string(), frame);
      frame_paths.push_back("clips/" + id + "/" + fname);

      if (cfg.label_mode == GenConfig::LabelMode::dense || t == labeled_only) {
        const std::string lname = frame_name(t, "label", "pgm");
        write_label((clip_dir / lname).string(), label);
        label_paths[std::to_string(t)] = "clips/" + id + "/" + lname;
      }
    }
    videos.push_back({{"id", id}, {"frames", frame_paths}, {"labels", label_paths}});
  }

  json manifest = {{"num_classes", cfg.classes},
                   {"height", cfg.height},
                   {"width", cfg.width},
                   {"videos", videos}};
  const std::string mpath = (fs::path(out_dir) / "manifest.json").string();
  std::ofstream out(mpath, std::ios::binary);
  if (!out) throw IoError(mpath + ": cannot open for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError(mpath + ": write failed");
  return mpath;
}

// --- manifest loading -------------------------------------------------------------

Dataset load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError(manifest_path + ": cannot open");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(manifest_path + ": invalid JSON (" + e.what() + ")");
  }

  Dataset ds;
  try {
    ds.num_classes = j.at("num_classes").get<int>();
    ds.height = j.at("height").get<int>();
    ds.width = j.at("width").get<int>();
  } catch (const json::exception& e) {
    throw IoError(manifest_path + ": bad schema (" + e.what() + ")");
  }
  if (ds.num_classes < 2 || ds.height < 1 || ds.width < 1)
    throw IoError(manifest_path + ": invalid num_classes/height/width");
  if (!j.contains("videos") || !j["videos"].is_array())
    throw IoError(manifest_path + ": missing videos array");

  const fs::path base = fs::path(manifest_path).parent_path();
  std::set<std::string> seen_ids;
  for (const json& v : j["videos"]) {
    VideoClip clip;
    try {
      clip.id = v.at("id").get<std::string>();
    } catch (const json::exception&) {
      throw IoError(manifest_path + ": video entry without id");
    }
    if (!seen_ids.insert(clip.id).second)
      throw IoError(manifest_path + ": duplicate video id '" + clip.id + "'");
    if (!v.contains("frames") || !v["frames"].is_array() || v["frames"].empty())
      throw IoError(manifest_path + ": video '" + clip.id + "' has no frames");

    for (const json& fp : v["frames"]) {
      const std::string rel = fp.get<std::string>();
      const std::string path = (base / rel).string();
      if (!fs::exists(path)) throw IoError("missing frame file '" + path + "'");
      const Image img = read_netpbm(path);
      if (img.c != 3) throw IoError(path + ": frames must be 3-channel (P6)");
      if (img.h != ds.height || img.w != ds.width)
        throw IoError(path + ": dimensions " + std::to_string(img.w) + "x" +
                      std::to_string(img.h) + " do not match manifest " +
                      std::to_string(ds.width) + "x" + std::to_string(ds.height));
      clip.frames.push_back(image_to_tensor(img));
    }

    if (v.contains("labels")) {
      if (!v["labels"].is_object())
        throw IoError(manifest_path + ": labels of '" + clip.id + "' must be an object");
      for (const auto& [key, val] : v["labels"].items()) {
        int idx = -1;
        try {
          size_t pos = 0;
          idx = std::stoi(key, &pos);
          if (pos != key.size()) throw std::invalid_argument(key);
        } catch (const std::exception&) {
          throw IoError(manifest_path + ": bad label index '" + key + "' in '" + clip.id + "'");
        }
        if (idx < 0 || idx >= static_cast<int>(clip.frames.size()))
          throw IoError(manifest_path + ": label index " + key + " out of range in '" +
                        clip.id + "'");
        const std::string path = (base / val.get<std::string>()).string();
        if (!fs::exists(path)) throw IoError("missing label file '" + path + "'");
        LabelMap lm = read_label(path);
        if (lm.h != ds.height || lm.w != ds.width)
          throw IoError(path + ": label dimensions do not match manifest");
        for (uint8_t px : lm.data)
          if (px != kIgnoreLabel && px >= ds.num_classes)
            throw IoError(path + ": label value " + std::to_string(px) +
                          " >= num_classes " + std::to_string(ds.num_classes));
        clip.labels.emplace(idx, std::move(lm));
      }
    }
    ds.clips.push_back(std::move(clip));
  }
  if (ds.clips.empty()) throw IoError(manifest_path + ": empty dataset");
  return ds;
}

// --- model serialization ------------------------------------------------------------

namespace {

void wr_u32(std::ostream& out, uint32_t v) {
  const uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                        static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

struct Cursor {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw IoError(path + ": truncated model file");
  }
  uint32_t u32() {
    need(4);
    const uint32_t v = static_cast<uint32_t>(buf[pos]) | (static_cast<uint32_t>(buf[pos + 1]) << 8) |
                       (static_cast<uint32_t>(buf[pos + 2]) << 16) |
                       (static_cast<uint32_t>(buf[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_model(const std::string& path, const DcfmModel<float>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  out.write("DCFM", 4);
  wr_u32(out, 1);  // version
  const std::string cfg_json = json(model.config()).dump();
  wr_u32(out, static_cast<uint32_t>(cfg_json.size()));
  out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
  for (const auto& [name, t] : model.params().items()) {
    wr_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    wr_u32(out, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) wr_u32(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!out) throw IoError(path + ": write failed");
}

DcfmModel<float> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Cursor cur{buf, 0, path};

  if (cur.bytes(4) != "DCFM") throw IoError(path + ": bad magic (not a model file)");
  const uint32_t version = cur.u32();
  if (version != 1) throw IoError(path + ": unsupported version " + std::to_string(version));
  const uint32_t cfg_len = cur.u32();
  ModelConfig cfg;
  try {
    json::parse(cur.bytes(cfg_len)).get_to(cfg);
  } catch (const json::exception& e) {
    throw IoError(path + ": bad embedded config (" + std::string(e.what()) + ")");
  }
  cfg.validate();

  DcfmModel<float> model(cfg);
  for (auto& [name, t] : model.params().items()) {
    const uint32_t name_len = cur.u32();
    const std::string got = cur.bytes(name_len);
    if (got != name)
      throw IoError(path + ": unexpected parameter '" + got + "' (want '" + name + "')");
    const uint32_t ndim = cur.u32();
    if (ndim != t.shape().size())
      throw IoError(path + ": parameter '" + name + "' has wrong rank");
    for (size_t d = 0; d < ndim; ++d)
      if (cur.u32() != static_cast<uint32_t>(t.shape()[d]))
        throw IoError(path + ": parameter '" + name + "' has wrong shape");
    cur.need(t.numel() * sizeof(float));
    std::memcpy(t.data().data(), buf.data() + cur.pos, t.numel() * sizeof(float));
    cur.pos += t.numel() * sizeof(float);
  }
  if (cur.pos != buf.size()) throw IoError(path + ": trailing bytes after parameters");
  return model;
}

}  // namespace dcfm
