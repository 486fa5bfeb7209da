#pragma once

#include <optional>
#include <vector>

#include "dcfm/common.hpp"
#include "dcfm/model.hpp"
#include "dcfm/tensor.hpp"

namespace dcfm {

struct ScheduleConfig {
  enum class Policy { fixed, adaptive };
  enum class Mode { P, B };  // previous-only, or previous+future merged

  Policy policy = Policy::fixed;
  int K = 2;               // fixed keyframe interval
  int min_k = 1;           // minimum interval for the adaptive policy
  double threshold = 10.0; // adaptive score threshold S
  int first_key = 0;
  Mode mode = Mode::B;

  void validate(int clip_len) const;
};

// Sliding window over the two live common features, as the inference loop
// walks keyframe to keyframe. Entries are never mutated once stored.
struct KeyframeCache {
  std::optional<int> t_p;
  Tensor<float> f_p;
  std::optional<int> t_s;
  Tensor<float> f_s;

  void advance(int t, Tensor<float> f) {
    t_p = t_s;
    f_p = f_s;
    t_s = t;
    f_s = std::move(f);
  }
};

struct FrameTiming {
  int frame = 0;
  bool is_key = false;
  double enc_lo_ms = 0;
  double enc_hi_ms = 0;
  double fuse_decode_ms = 0;

  double total_ms() const { return enc_lo_ms + enc_hi_ms + fuse_decode_ms; }
};

struct EngineReport {
  std::vector<int> keyframe_indices;
  std::vector<FrameTiming> frames;
  double t_k_mean = 0;
  double t_n_mean = 0;
  double avg_ms_per_frame = 0;  // interval formula under the fixed policy
  double empirical_avg_ms = 0;  // plain mean of per-frame totals
  double latency_ms = 0;
};

struct EngineOptions {
  // Process the non-key frames between two published keyframes in parallel.
  // Outputs are bit-identical to the serial path.
  bool pipelined = false;
};

struct RunResult {
  std::vector<LabelMap> predictions;
  std::vector<Tensor<float>> full_logits;
  std::vector<std::pair<int, Tensor<float>>> key_commons;  // cached features, for audits
  EngineReport report;
};

// Mean absolute pixel difference between two frames.
double frame_score(const Tensor<float>& a, const Tensor<float>& b);

// Adaptive scan: start at t_p + min_k, advance while the score against the
// previous keyframe stays <= threshold, clamp to the last frame.
// Returns -1 when no further keyframe exists.
int next_keyframe_index(const std::vector<Tensor<float>>& clip, int t_p,
                        const ScheduleConfig& cfg);

std::vector<int> compute_schedule(const std::vector<Tensor<float>>& clip,
                                  const ScheduleConfig& cfg);

// Equal-weight average of two prediction tensors.
template <typename T>
Tensor<T> merge_predictions(const Tensor<T>& a, const Tensor<T>& b);

LabelMap argmax_labels(const Tensor<float>& logits);

EngineReport latency_report(const std::vector<FrameTiming>& frames,
                            const std::vector<int>& keyframes, const ScheduleConfig& cfg);

RunResult run_video(const DcfmModel<float>& model, const std::vector<Tensor<float>>& clip,
                    const ScheduleConfig& cfg, const EngineOptions& opts = {});

}  // namespace dcfm
