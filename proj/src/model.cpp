#include "dcfm/model.hpp"

#include <cmath>
#include <string>

namespace dcfm {

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (in_channels < 1 || c_f_indep < 1 || c_hi < 1 || c_common < 1 || indep_half < 1)
    throw ConfigError("model: all widths must be >= 1");
  if (indep_half > c_f_indep)
    throw ConfigError("model: indep_half must not exceed c_f_indep");
  if (!use_common && !use_indep)
    throw ConfigError("model: at least one of use_common/use_indep must be true");
}

namespace {

// He-normal init: weights scaled by sqrt(2 / fan_in), biases zero.
template <typename T>
Tensor<T> he_conv(ParamStore<T>& store, const std::string& name, int co, int ci, int k,
                  Rng& rng) {
  const T std = static_cast<T>(std::sqrt(2.0 / (static_cast<double>(ci) * k * k)));
  return store.add(name + ".w", Tensor<T>::randn({co, ci, k, k}, rng, std, true));
}

template <typename T>
Tensor<T> zero_bias(ParamStore<T>& store, const std::string& name, int co) {
  return store.add(name + ".b", Tensor<T>::zeros({co}, true));
}

}  // namespace

template <typename T>
DcfmModel<T>::DcfmModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(static_cast<uint64_t>(cfg_.seed));
  const int cf = cfg_.c_f_indep;
  lo1_w_ = he_conv(params_, "enc_lo.conv1", cf, cfg_.in_channels, 3, rng);
  lo1_b_ = zero_bias(params_, "enc_lo.conv1", cf);
  lo2_w_ = he_conv(params_, "enc_lo.conv2", cf, cf, 3, rng);
  lo2_b_ = zero_bias(params_, "enc_lo.conv2", cf);
  hi1_w_ = he_conv(params_, "enc_hi.conv1", cfg_.c_hi, cf, 3, rng);
  hi1_b_ = zero_bias(params_, "enc_hi.conv1", cfg_.c_hi);
  hi2_w_ = he_conv(params_, "enc_hi.conv2", cfg_.c_hi, cfg_.c_hi, 3, rng);
  hi2_b_ = zero_bias(params_, "enc_hi.conv2", cfg_.c_hi);
  proj_w_ = he_conv(params_, "enc_hi.proj", cfg_.c_common, cfg_.c_hi, 1, rng);
  proj_b_ = zero_bias(params_, "enc_hi.proj", cfg_.c_common);
  ffm_w_ = he_conv(params_, "ffm.conv", cfg_.c_common, cfg_.c_common + cfg_.indep_half, 3, rng);
  ffm_b_ = zero_bias(params_, "ffm.conv", cfg_.c_common);
  dec_w_ = he_conv(params_, "dec.conv", cfg_.c_common, cfg_.c_common, 3, rng);
  dec_b_ = zero_bias(params_, "dec.conv", cfg_.c_common);
  head_w_ = he_conv(params_, "dec.head", cfg_.num_classes, cfg_.c_common, 1, rng);
  head_b_ = zero_bias(params_, "dec.head", cfg_.num_classes);
}

template <typename T>
Tensor<T> DcfmModel<T>::enc_lo(const Tensor<T>& frame) const {
  if (!frame.defined() || frame.ndim() != 3 || frame.dim(0) != cfg_.in_channels)
    throw ConfigError("enc_lo: frame must be [" + std::to_string(cfg_.in_channels) + ",H,W]");
  if (frame.dim(1) % 16 != 0 || frame.dim(2) % 16 != 0)
    throw ConfigError("enc_lo: H and W must be divisible by 16; reflect-pad the frame first");
  counters_->enc_lo.fetch_add(1, std::memory_order_relaxed);
  // Pixel range is [0,255]; bring it to unit scale before the convs.
  Tensor<T> x = scale(frame, static_cast<T>(1.0 / 255.0));
  x = relu(conv2d(x, lo1_w_, lo1_b_, 2, 1));
  x = relu(conv2d(x, lo2_w_, lo2_b_, 2, 1));
  return x;
}

template <typename T>
Tensor<T> DcfmModel<T>::extract_common(const Tensor<T>& raw_indep) const {
  if (!raw_indep.defined() || raw_indep.ndim() != 3 || raw_indep.dim(0) != cfg_.c_f_indep)
    throw ConfigError("extract_common: input must be an enc_lo output");
  counters_->enc_hi.fetch_add(1, std::memory_order_relaxed);
  Tensor<T> x = relu(conv2d(raw_indep, hi1_w_, hi1_b_, 2, 1));
  x = relu(conv2d(x, hi2_w_, hi2_b_, 2, 1));
  x = conv2d(x, proj_w_, proj_b_, 1, 0);
  return channel_norm(x, kNormEps);
}

template <typename T>
Tensor<T> DcfmModel<T>::fuse(const Tensor<T>& common, const Tensor<T>& indep_norm) const {
  if (!common.defined() || common.ndim() != 3 || common.dim(0) != cfg_.c_common)
    throw ConfigError("fuse: common feature has wrong channel count");
  if (!indep_norm.defined() || indep_norm.ndim() != 3 || indep_norm.dim(0) != cfg_.c_f_indep)
    throw ConfigError("fuse: shallow feature has wrong channel count");
  const int h4 = indep_norm.dim(1), w4 = indep_norm.dim(2);
  Tensor<T> up = cfg_.use_common ? bilinear_resize(common, h4, w4)
                                 : Tensor<T>::zeros({cfg_.c_common, h4, w4});
  Tensor<T> half = cfg_.use_indep ? slice_channels(indep_norm, 0, cfg_.indep_half)
                                  : Tensor<T>::zeros({cfg_.indep_half, h4, w4});
  return relu(conv2d(concat_channels(up, half), ffm_w_, ffm_b_, 1, 1));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> DcfmModel<T>::decode(const Tensor<T>& fused) const {
  Tensor<T> x = relu(conv2d(fused, dec_w_, dec_b_, 1, 1));
  Tensor<T> coarse = conv2d(x, head_w_, head_b_, 1, 0);
  Tensor<T> full = bilinear_resize(coarse, coarse.dim(1) * 4, coarse.dim(2) * 4);
  return {coarse, full};
}

template <typename T>
KeyframeOutput<T> DcfmModel<T>::keyframe_forward(const Tensor<T>& frame, int frame_index) const {
  Tensor<T> raw = enc_lo(frame);
  Tensor<T> indep_norm = channel_norm(raw, kNormEps);
  Tensor<T> common = extract_common(raw);
  Tensor<T> fused = fuse(common, indep_norm);
  auto [coarse, full] = decode(fused);
  return {FeaturePair<T>{common, indep_norm, frame_index}, fused, coarse, full};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> DcfmModel<T>::nonkey_forward(const Tensor<T>& frame,
                                                             const Tensor<T>& key_common) const {
  Tensor<T> indep_norm = channel_norm(enc_lo(frame), kNormEps);
  return decode(fuse(key_common, indep_norm));
}

template class DcfmModel<float>;
template class DcfmModel<double>;

}  // namespace dcfm
