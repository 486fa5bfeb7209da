#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dcfm/common.hpp"
#include "dcfm/tensor.hpp"

namespace dcfm {

// Rows are ground truth, columns are prediction; ignore pixels never counted.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<int64_t> counts;

  explicit ConfusionMatrix(int cls);
  int64_t& at(int gt, int pred) { return counts[static_cast<size_t>(gt) * num_classes + pred]; }
  int64_t at(int gt, int pred) const {
    return counts[static_cast<size_t>(gt) * num_classes + pred];
  }
  int64_t total() const;
};

void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt);

// IoU per class; empty optional for classes with no ground-truth pixels.
std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm);
double miou(const ConfusionMatrix& cm);
double wiou(const ConfusionMatrix& cm);

// Windowed temporal consistency: over every l consecutive frames, the share
// of pixels with stable ground truth whose predictions are stable AND correct.
// Windows with no stable ground-truth pixel are skipped; nullopt when every
// window is skipped.
std::optional<double> video_consistency(const std::vector<LabelMap>& preds,
                                        const std::vector<LabelMap>& gts, int l);

double mvc(const std::vector<double>& per_video);

// Mean cosine similarity of each pixel's channel vector with its in-bounds
// 8-neighborhood; zero vectors contribute similarity 0.
template <typename T>
Tensor<T> cosine_similarity_map(const Tensor<T>& fused);

}  // namespace dcfm
