#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <utility>

#include "dcfm/common.hpp"
#include "dcfm/tensor.hpp"

namespace dcfm {

struct ModelConfig {
  int num_classes = 4;
  int in_channels = 3;
  int c_f_indep = 16;   // channels of the per-frame shallow feature
  int c_hi = 224;       // deep encoder width; sized so the deep stage dominates
  int c_common = 32;    // channels of the cached common feature
  int indep_half = 8;   // shallow channels forwarded into the fusion conv
  bool use_common = true;
  bool use_indep = true;
  int seed = 0;

  void validate() const;
};

// Cached per-frame features: the deep common feature (normalized, coarse grid)
// plus the normalized shallow feature it is fused with.
template <typename T>
struct FeaturePair {
  Tensor<T> common;  // [c_common, H/16, W/16]
  Tensor<T> indep;   // [c_f_indep, H/4, W/4]
  int frame_index = -1;
};

template <typename T>
struct KeyframeOutput {
  FeaturePair<T> features;
  Tensor<T> fused;          // [c_common, H/4, W/4]
  Tensor<T> coarse_logits;  // [num_classes, H/4, W/4]
  Tensor<T> full_logits;    // [num_classes, H, W]
};

// Two-stage segmentation network. The shallow encoder runs on every frame;
// the deep encoder + projection produce the common feature only on keyframes,
// and the fusion conv + decoder turn (common, shallow) into logits.
template <typename T>
class DcfmModel {
 public:
  explicit DcfmModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Shallow feature, un-normalized: two stride-2 conv+relu blocks.
  // Requires H and W divisible by 16 (pad with reflect_pad_br first).
  Tensor<T> enc_lo(const Tensor<T>& frame) const;

  // Deep path on top of enc_lo output: two stride-2 conv+relu blocks, a 1x1
  // projection to c_common, then channel_norm.
  Tensor<T> extract_common(const Tensor<T>& raw_indep) const;

  // Upsample common to the shallow grid, concat the first indep_half channels
  // of the (already normalized) shallow feature, one 3x3 conv + relu.
  // The use_common / use_indep flags zero out the respective branch.
  Tensor<T> fuse(const Tensor<T>& common, const Tensor<T>& indep_norm) const;

  // 3x3 conv + relu, 1x1 conv to classes, then 4x bilinear upsample.
  std::pair<Tensor<T>, Tensor<T>> decode(const Tensor<T>& fused) const;

  // Full pipeline with exactly one enc_lo evaluation shared by both stages.
  KeyframeOutput<T> keyframe_forward(const Tensor<T>& frame, int frame_index = -1) const;

  // Shallow pipeline against a cached common feature; never touches the deep
  // encoder. Returns (coarse_logits, full_logits).
  std::pair<Tensor<T>, Tensor<T>> nonkey_forward(const Tensor<T>& frame,
                                                 const Tensor<T>& key_common) const;

  int64_t enc_lo_calls() const { return counters_->enc_lo.load(); }
  int64_t enc_hi_calls() const { return counters_->enc_hi.load(); }
  void reset_call_counters() const {
    counters_->enc_lo = 0;
    counters_->enc_hi = 0;
  }

  static constexpr T kNormEps = static_cast<T>(1e-5);

 private:
  // Shared so the model stays movable; concurrent nonkey_forward calls bump
  // them from several threads.
  struct CallCounters {
    std::atomic<int64_t> enc_lo{0};
    std::atomic<int64_t> enc_hi{0};
  };

  ModelConfig cfg_;
  ParamStore<T> params_;
  // Handles below share storage with the entries in params_.
  Tensor<T> lo1_w_, lo1_b_, lo2_w_, lo2_b_;
  Tensor<T> hi1_w_, hi1_b_, hi2_w_, hi2_b_, proj_w_, proj_b_;
  Tensor<T> ffm_w_, ffm_b_;
  Tensor<T> dec_w_, dec_b_, head_w_, head_b_;
  mutable std::shared_ptr<CallCounters> counters_ = std::make_shared<CallCounters>();
};

}  // namespace dcfm
