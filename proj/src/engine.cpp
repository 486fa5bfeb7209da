#include "dcfm/engine.hpp"

#include <chrono>
#include <cmath>
#include <string>

namespace dcfm {

void ScheduleConfig::validate(int clip_len) const {
  if (clip_len < 1) throw ConfigError("schedule: empty clip");
  if (K < 1) throw ConfigError("schedule: K must be >= 1");
  if (min_k < 1) throw ConfigError("schedule: min_k must be >= 1");
  if (first_key < 0 || first_key >= clip_len)
    throw ConfigError("schedule: first_key outside the clip");
  if (!std::isfinite(threshold)) throw ConfigError("schedule: threshold must be finite");
}

double frame_score(const Tensor<float>& a, const Tensor<float>& b) {
  if (!a.defined() || !b.defined()) throw ConfigError("frame_score: undefined frame");
  if (a.shape() != b.shape()) throw ConfigError("frame_score: frame shapes do not match");
  const float* av = a.data().data();
  const float* bv = b.data().data();
  double total = 0;
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) total += std::abs(static_cast<double>(av[i]) - bv[i]);
  return total / static_cast<double>(n);
}

int next_keyframe_index(const std::vector<Tensor<float>>& clip, int t_p,
                        const ScheduleConfig& cfg) {
  const int n = static_cast<int>(clip.size());
  if (t_p < 0 || t_p >= n) throw ConfigError("next_keyframe_index: t_p outside the clip");
  if (t_p >= n - 1) return -1;
  int t_s = t_p + cfg.min_k;
  if (t_s >= n - 1) return n - 1;
  // Low difference means the cached feature still describes the scene: keep
  // going. The first frame that moved too far becomes the next keyframe.
  while (t_s < n - 1 && frame_score(clip[t_s], clip[t_p]) <= cfg.threshold) ++t_s;
  return t_s;
}

std::vector<int> compute_schedule(const std::vector<Tensor<float>>& clip,
                                  const ScheduleConfig& cfg) {
  const int n = static_cast<int>(clip.size());
  cfg.validate(n);
  std::vector<int> keys{cfg.first_key};
  if (cfg.policy == ScheduleConfig::Policy::fixed) {
    for (int t = cfg.first_key + cfg.K; t < n; t += cfg.K) keys.push_back(t);
  } else {
    for (;;) {
      const int t = next_keyframe_index(clip, keys.back(), cfg);
      if (t < 0) break;
      keys.push_back(t);
    }
  }
  return keys;
}

template <typename T>
Tensor<T> merge_predictions(const Tensor<T>& a, const Tensor<T>& b) {
  return scale(add(a, b), static_cast<T>(0.5));
}

LabelMap argmax_labels(const Tensor<float>& logits) {
  if (!logits.defined() || logits.ndim() != 3) throw ConfigError("argmax_labels: want [C,H,W]");
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  if (c > kIgnoreLabel) throw ConfigError("argmax_labels: too many classes for 8-bit labels");
  LabelMap lm(h, w);
  const float* v = logits.data().data();
  const size_t m = static_cast<size_t>(h) * w;
  for (size_t p = 0; p < m; ++p) {
    int best = 0;
    float best_v = v[p];
    for (int ch = 1; ch < c; ++ch)
      if (v[ch * m + p] > best_v) {  // ties keep the lowest class
        best_v = v[ch * m + p];
        best = ch;
      }
    lm.data[p] = static_cast<uint8_t>(best);
  }
  return lm;
}

EngineReport latency_report(const std::vector<FrameTiming>& frames,
                            const std::vector<int>& keyframes, const ScheduleConfig& cfg) {
  if (frames.empty()) throw ConfigError("latency_report: no frames");
  if (keyframes.empty()) throw ConfigError("latency_report: no keyframes");

  EngineReport r;
  r.keyframe_indices = keyframes;
  r.frames = frames;

  double k_sum = 0, n_sum = 0;
  int k_cnt = 0, n_cnt = 0;
  for (const FrameTiming& ft : frames) {
    const double tot = ft.total_ms();
    if (ft.is_key) {
      k_sum += tot;
      ++k_cnt;
    } else {
      n_sum += tot;
      ++n_cnt;
    }
  }
  if (k_cnt == 0) throw ConfigError("latency_report: no keyframe timings");
  r.t_k_mean = k_sum / k_cnt;
  r.t_n_mean = n_cnt > 0 ? n_sum / n_cnt : 0.0;
  r.empirical_avg_ms = (k_sum + n_sum) / static_cast<double>(frames.size());

  // Under the fixed policy the steady-state cost repeats every K frames; the
  // adaptive policy has no closed form, so fall back to the measured mean.
  if (cfg.policy == ScheduleConfig::Policy::fixed)
    r.avg_ms_per_frame = (r.t_k_mean + (cfg.K - 1) * r.t_n_mean) / cfg.K;
  else
    r.avg_ms_per_frame = r.empirical_avg_ms;

  double k_eff = 1.0;
  if (cfg.policy == ScheduleConfig::Policy::fixed) {
    k_eff = cfg.K;
  } else if (keyframes.size() >= 2) {
    k_eff = static_cast<double>(keyframes.back() - keyframes.front()) /
            static_cast<double>(keyframes.size() - 1);
  }
  // P emits as soon as the previous key is known; B waits for the future key
  // and the per-frame work in between.
  r.latency_ms = cfg.mode == ScheduleConfig::Mode::P
                     ? r.t_k_mean
                     : r.t_k_mean + (k_eff - 1.0) * r.t_n_mean;
  return r;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Tensor<float> crop_chw(const Tensor<float>& t, int h, int w) {
  if (t.dim(1) == h && t.dim(2) == w) return t;
  const int c = t.dim(0), hp = t.dim(1), wp = t.dim(2);
  std::vector<float> out(static_cast<size_t>(c) * h * w);
  const float* v = t.data().data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<size_t>(ch) * h + y) * w + x] =
            v[(static_cast<size_t>(ch) * hp + y) * wp + x];
  return Tensor<float>::from_data({c, h, w}, std::move(out));
}

}  // namespace

RunResult run_video(const DcfmModel<float>& model, const std::vector<Tensor<float>>& clip,
                    const ScheduleConfig& cfg, const EngineOptions& opts) {
  const int n = static_cast<int>(clip.size());
  cfg.validate(n);
  for (const auto& f : clip) {
    if (!f.defined() || f.ndim() != 3 || f.dim(0) != 3)
      throw ConfigError("run_video: frames must be [3,H,W]");
    if (f.shape() != clip[0].shape())
      throw ConfigError("run_video: frame dimensions change mid-clip");
  }
  const int h = clip[0].dim(1), w = clip[0].dim(2);
  const int hp = (h + 15) / 16 * 16, wp = (w + 15) / 16 * 16;

  autograd::NoGradGuard ng;
  const std::vector<int> keys = compute_schedule(clip, cfg);

  RunResult res;
  res.predictions.resize(static_cast<size_t>(n));
  res.full_logits.resize(static_cast<size_t>(n));
  std::vector<FrameTiming> timings(static_cast<size_t>(n));

  auto padded = [&](int t) {
    const Tensor<float>& f = clip[static_cast<size_t>(t)];
    return (hp == h && wp == w) ? f : reflect_pad_br(f, hp, wp);
  };

  auto store = [&](int t, const Tensor<float>& full) {
    Tensor<float> cropped = crop_chw(full, h, w);
    res.predictions[static_cast<size_t>(t)] = argmax_labels(cropped);
    res.full_logits[static_cast<size_t>(t)] = cropped;
  };

  // One full pass: shallow + deep features, own prediction, staged timing.
  auto key_pass = [&](int t) {
    FrameTiming ft;
    ft.frame = t;
    ft.is_key = true;
    auto t0 = Clock::now();
    Tensor<float> raw = model.enc_lo(padded(t));
    Tensor<float> ind = channel_norm(raw, DcfmModel<float>::kNormEps);
    ft.enc_lo_ms = ms_since(t0);
    t0 = Clock::now();
    Tensor<float> common = model.extract_common(raw);
    ft.enc_hi_ms = ms_since(t0);
    t0 = Clock::now();
    Tensor<float> fused = model.fuse(common, ind);
    auto [coarse, full] = model.decode(fused);
    (void)coarse;
    ft.fuse_decode_ms = ms_since(t0);
    store(t, full);
    timings[static_cast<size_t>(t)] = ft;
    return common;
  };

  // Shallow-only pass against one or two cached deep features.
  auto nonkey_pass = [&](int t, const Tensor<float>* a, const Tensor<float>* b) {
    FrameTiming ft;
    ft.frame = t;
    auto t0 = Clock::now();
    Tensor<float> raw = model.enc_lo(padded(t));
    Tensor<float> ind = channel_norm(raw, DcfmModel<float>::kNormEps);
    ft.enc_lo_ms = ms_since(t0);
    t0 = Clock::now();
    Tensor<float> full = model.decode(model.fuse(*a, ind)).second;
    if (b) full = merge_predictions(full, model.decode(model.fuse(*b, ind)).second);
    ft.fuse_decode_ms = ms_since(t0);
    store(t, full);
    timings[static_cast<size_t>(t)] = ft;
  };

  auto run_segment = [&](int begin, int end, const Tensor<float>* a, const Tensor<float>* b) {
    if (opts.pipelined) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
      for (int t = begin; t < end; ++t) {
        autograd::NoGradGuard worker_ng;  // the guard depth is thread-local
        nonkey_pass(t, a, b);
      }
    } else {
      for (int t = begin; t < end; ++t) nonkey_pass(t, a, b);
    }
  };

  KeyframeCache cache;
  for (const int key : keys) {
    Tensor<float> common = key_pass(key);
    res.key_commons.emplace_back(key, common);
    cache.advance(key, std::move(common));
    if (!cache.t_p) {
      run_segment(0, key, &cache.f_s, nullptr);  // before the first key: future only
    } else if (cfg.mode == ScheduleConfig::Mode::P) {
      run_segment(*cache.t_p + 1, key, &cache.f_p, nullptr);
    } else {
      run_segment(*cache.t_p + 1, key, &cache.f_p, &cache.f_s);
    }
  }
  // Past the last key there is nothing to wait for: previous key only.
  run_segment(keys.back() + 1, n, &cache.f_s, nullptr);

  res.report = latency_report(timings, keys, cfg);
  return res;
}

template Tensor<float> merge_predictions<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> merge_predictions<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace dcfm
