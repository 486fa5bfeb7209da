#include "dcfm/metrics.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace dcfm {

ConfusionMatrix::ConfusionMatrix(int cls) : num_classes(cls) {
  if (cls < 1) throw ConfigError("confusion matrix needs at least one class");
  counts.assign(static_cast<size_t>(cls) * cls, 0);
}

int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), int64_t{0});
}

void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw ConfigError("accumulate: prediction and ground truth dims differ");
  for (size_t i = 0; i < gt.data.size(); ++i) {
    const int g = gt.data[i];
    if (g == kIgnoreLabel) continue;
    const int p = pred.data[i];
    if (g >= cm.num_classes)
      throw ConfigError("accumulate: ground-truth label " + std::to_string(g) + " out of range");
    if (p >= cm.num_classes)
      throw ConfigError("accumulate: predicted label " + std::to_string(p) + " out of range");
    ++cm.at(g, p);
  }
}

std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  const int cls = cm.num_classes;
  std::vector<std::optional<double>> out(static_cast<size_t>(cls));
  for (int c = 0; c < cls; ++c) {
    const int64_t tp = cm.at(c, c);
    int64_t fp = 0, fn = 0;
    for (int o = 0; o < cls; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    if (tp + fn == 0) continue;  // class absent from ground truth
    out[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
  }
  return out;
}

double miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ConfigError("miou: empty confusion matrix");
  const auto ious = per_class_iou(cm);
  double sum = 0;
  int n = 0;
  for (const auto& iou : ious)
    if (iou) {
      sum += *iou;
      ++n;
    }
  return sum / n;  // n >= 1 because total() > 0
}

double wiou(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total == 0) throw ConfigError("wiou: empty confusion matrix");
  const auto ious = per_class_iou(cm);
  double sum = 0;
  for (int c = 0; c < cm.num_classes; ++c) {
    if (!ious[static_cast<size_t>(c)]) continue;
    int64_t gt_c = 0;
    for (int o = 0; o < cm.num_classes; ++o) gt_c += cm.at(c, o);
    sum += (static_cast<double>(gt_c) / static_cast<double>(total)) * *ious[static_cast<size_t>(c)];
  }
  return sum;
}

std::optional<double> video_consistency(const std::vector<LabelMap>& preds,
                                        const std::vector<LabelMap>& gts, int l) {
  const int n = static_cast<int>(preds.size());
  if (static_cast<int>(gts.size()) != n)
    throw ConfigError("video_consistency: prediction/ground-truth counts differ");
  if (l < 1) throw ConfigError("video_consistency: window length must be >= 1");
  if (l > n) throw ConfigError("video_consistency: window longer than the clip");
  for (int i = 0; i < n; ++i)
    if (preds[i].h != gts[0].h || preds[i].w != gts[0].w || gts[i].h != gts[0].h ||
        gts[i].w != gts[0].w)
      throw ConfigError("video_consistency: inconsistent frame dimensions");

  const size_t npx = gts[0].data.size();
  double score_sum = 0;
  int windows = 0;
  for (int i = 0; i + l <= n; ++i) {
    int64_t stable_gt = 0, stable_correct = 0;
    for (size_t p = 0; p < npx; ++p) {
      const uint8_t g = gts[static_cast<size_t>(i)].data[p];
      if (g == kIgnoreLabel) continue;
      bool gt_stable = true;
      for (int k = 1; k < l && gt_stable; ++k)
        gt_stable = gts[static_cast<size_t>(i + k)].data[p] == g;
      if (!gt_stable) continue;
      ++stable_gt;
      bool pred_match = true;
      for (int k = 0; k < l && pred_match; ++k)
        pred_match = preds[static_cast<size_t>(i + k)].data[p] == g;
      if (pred_match) ++stable_correct;
    }
    if (stable_gt == 0) continue;  // fully dynamic window: skipped, not zero
    score_sum += static_cast<double>(stable_correct) / static_cast<double>(stable_gt);
    ++windows;
  }
  if (windows == 0) return std::nullopt;
  return score_sum / windows;
}

double mvc(const std::vector<double>& per_video) {
  if (per_video.empty()) throw ConfigError("mvc: no per-video scores");
  return std::accumulate(per_video.begin(), per_video.end(), 0.0) /
         static_cast<double>(per_video.size());
}

template <typename T>
Tensor<T> cosine_similarity_map(const Tensor<T>& fused) {
  if (!fused.defined() || fused.ndim() != 3)
    throw ConfigError("cosine_similarity_map: want [C,H,W]");
  const int c = fused.dim(0), h = fused.dim(1), w = fused.dim(2);
  if (h < 3 || w < 3) throw ConfigError("cosine_similarity_map: need at least 3x3 spatial dims");

  const T* v = fused.data().data();
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<T> norms(plane);
  for (size_t p = 0; p < plane; ++p) {
    double s = 0;
    for (int ch = 0; ch < c; ++ch) {
      const double x = v[ch * plane + p];
      s += x * x;
    }
    norms[p] = static_cast<T>(std::sqrt(s));
  }

  Tensor<T> out = Tensor<T>::zeros({h, w});
  auto o = out.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t p = static_cast<size_t>(y) * w + x;
      double acc = 0;
      int neighbors = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          ++neighbors;
          const size_t q = static_cast<size_t>(ny) * w + nx;
          if (norms[p] == T(0) || norms[q] == T(0)) continue;  // zero vector: sim 0
          double dot = 0;
          for (int ch = 0; ch < c; ++ch)
            dot += static_cast<double>(v[ch * plane + p]) * v[ch * plane + q];
          acc += dot / (static_cast<double>(norms[p]) * norms[q]);
        }
      o[p] = static_cast<T>(acc / neighbors);
    }
  return out;
}

template Tensor<float> cosine_similarity_map<float>(const Tensor<float>&);
template Tensor<double> cosine_similarity_map<double>(const Tensor<double>&);

}  // namespace dcfm
