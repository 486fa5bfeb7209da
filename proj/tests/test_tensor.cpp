#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"

#include "dcfm/tensor.hpp"

using namespace dcfm;
using testutil::bitwise_equal;
using testutil::fd_check;

namespace {

// Independent six-loop convolution, the frozen oracle for conv2d.
template <typename T>
std::vector<T> naive_conv(const std::vector<T>& in, int ci, int h, int w,
                          const std::vector<T>& wt, int co, int kh, int kw,
                          const std::vector<T>& bias, int stride, int pad, int oh, int ow) {
  std::vector<T> out(static_cast<size_t>(co) * oh * ow, T(0));
  for (int oc = 0; oc < co; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias[static_cast<size_t>(oc)];
        for (int ic = 0; ic < ci; ++ic)
          for (int fy = 0; fy < kh; ++fy)
            for (int fx = 0; fx < kw; ++fx) {
              const int iy = oy * stride - pad + fy;
              const int ix = ox * stride - pad + fx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += static_cast<double>(in[(static_cast<size_t>(ic) * h + iy) * w + ix]) *
                     wt[((static_cast<size_t>(oc) * ci + ic) * kh + fy) * kw + fx];
            }
        out[(static_cast<size_t>(oc) * oh + oy) * ow + ox] = static_cast<T>(acc);
      }
  return out;
}

// Independent bilinear oracle: half-pixel source coords, edges clamped.
template <typename T>
std::vector<T> naive_bilinear(const std::vector<T>& in, int c, int h, int w, int oh, int ow) {
  auto coord = [](int o, int on, int n) {
    double s = (o + 0.5) * static_cast<double>(n) / on - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    int i0 = std::min(static_cast<int>(std::floor(s)), n - 2);
    i0 = std::max(i0, 0);
    return std::pair<int, double>{i0, n == 1 ? 0.0 : s - i0};
  };
  std::vector<T> out(static_cast<size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        auto [y0, fy] = coord(y, oh, h);
        auto [x0, fx] = coord(x, ow, w);
        const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        auto at = [&](int yy, int xx) {
          return static_cast<double>(in[(static_cast<size_t>(ch) * h + yy) * w + xx]);
        };
        const double top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
        const double bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
        out[(static_cast<size_t>(ch) * oh + y) * ow + x] = static_cast<T>(top + (bot - top) * fy);
      }
  return out;
}

template <typename T>
Tensor<T> const_like(const Tensor<T>& t, Rng& rng) {
  return Tensor<T>::randn(t.shape(), rng, T(1));
}

}  // namespace

TEST_SUITE("tensor.conv2d") {

TEST_CASE("1x1 identity kernel reproduces the input") {
  auto in = Tensor<double>::from_data({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = Tensor<double>::from_data({1, 1, 1, 1}, {1});
  auto b = Tensor<double>::from_data({1}, {0});
  auto out = conv2d(in, w, b, 1, 0);
  CHECK(out.shape() == std::vector<int>{1, 3, 3});
  CHECK(bitwise_equal(out, in));
}

TEST_CASE("all-ones 3x3 kernel on all-ones 4x4 input counts the receptive field") {
  auto in = Tensor<double>::full({1, 4, 4}, 1.0);
  auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto b = Tensor<double>::from_data({1}, {0});
  auto out = conv2d(in, w, b, 1, 1);
  const std::vector<double> want = {4, 6, 6, 4, 6, 9, 9, 6, 6, 9, 9, 6, 4, 6, 6, 4};
  for (size_t i = 0; i < want.size(); ++i) CHECK(out.data()[i] == want[i]);
}

TEST_CASE("stride 2 subsamples the top-left taps") {
  std::vector<double> vals(16);
  for (int i = 0; i < 16; ++i) vals[static_cast<size_t>(i)] = i + 1;
  auto in = Tensor<double>::from_data({1, 4, 4}, vals);
  auto w = Tensor<double>::from_data({1, 1, 1, 1}, {1});
  auto b = Tensor<double>::from_data({1}, {0});
  auto out = conv2d(in, w, b, 2, 0);
  CHECK(out.shape() == std::vector<int>{1, 2, 2});
  CHECK(out.data()[0] == 1);
  CHECK(out.data()[1] == 3);
  CHECK(out.data()[2] == 9);
  CHECK(out.data()[3] == 11);
}

TEST_CASE("bias is added to every output position") {
  auto in = Tensor<double>::zeros({2, 3, 3});
  auto w = Tensor<double>::zeros({2, 2, 3, 3});
  auto b = Tensor<double>::from_data({2}, {1.5, -2.0});
  auto out = conv2d(in, w, b, 1, 1);
  for (int p = 0; p < 9; ++p) {
    CHECK(out.data()[static_cast<size_t>(p)] == 1.5);
    CHECK(out.data()[static_cast<size_t>(9 + p)] == -2.0);
  }
}

TEST_CASE("shape validation") {
  Rng rng(1);
  auto in = Tensor<double>::randn({2, 4, 4}, rng, 1.0);
  auto b1 = Tensor<double>::zeros({1});
  CHECK_THROWS_AS(conv2d(in, Tensor<double>::zeros({1, 2, 2, 2}), b1, 1, 0), ConfigError);
  CHECK_THROWS_AS(conv2d(in, Tensor<double>::zeros({1, 3, 3, 3}), b1, 1, 0), ConfigError);
  CHECK_THROWS_AS(conv2d(in, Tensor<double>::zeros({1, 2, 3, 3}), b1, 0, 0), ConfigError);
  CHECK_THROWS_AS(conv2d(in, Tensor<double>::zeros({1, 2, 3, 3}), b1, 1, -1), ConfigError);
  CHECK_THROWS_AS(conv2d(in, Tensor<double>::zeros({1, 2, 3, 3}), Tensor<double>::zeros({2}), 1, 0),
                  ConfigError);
  auto tiny = Tensor<double>::randn({1, 2, 2}, rng, 1.0);
  CHECK_THROWS_AS(conv2d(tiny, Tensor<double>::zeros({1, 1, 3, 3}), b1, 1, 0), ConfigError);
}

TEST_CASE("matches the six-loop oracle on random instances") {
  Rng rng(42);
  for (int rep = 0; rep < 20; ++rep) {
    const int ci = rng.uniform_int(1, 4), co = rng.uniform_int(1, 4);
    const int h = rng.uniform_int(3, 9), w = rng.uniform_int(3, 9);
    const int k = 1 + 2 * rng.uniform_int(0, 1);
    const int stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 2);
    if (h + 2 * pad < k || w + 2 * pad < k) continue;
    auto in = Tensor<double>::randn({ci, h, w}, rng, 1.0);
    auto wt = Tensor<double>::randn({co, ci, k, k}, rng, 1.0);
    auto b = Tensor<double>::randn({co}, rng, 1.0);
    auto out = conv2d(in, wt, b, stride, pad);
    const auto want =
        naive_conv(std::vector<double>(in.data().begin(), in.data().end()), ci, h, w,
                   std::vector<double>(wt.data().begin(), wt.data().end()), co, k, k,
                   std::vector<double>(b.data().begin(), b.data().end()), stride, pad,
                   out.dim(1), out.dim(2));
    REQUIRE(out.numel() == want.size());
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(want[i]).epsilon(1e-9));
  }
}

TEST_CASE("gradients match finite differences for input, weight, and bias") {
  Rng rng(7);
  for (int rep = 0; rep < 7; ++rep) {
    const int ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const int h = rng.uniform_int(3, 5), w = rng.uniform_int(3, 5);
    const int stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1);
    auto in = Tensor<double>::randn({ci, h, w}, rng, 1.0, true);
    auto wt = Tensor<double>::randn({co, ci, 3, 3}, rng, 1.0, true);
    auto b = Tensor<double>::randn({co}, rng, 1.0, true);
    Tensor<double> proj;
    auto loss = [&] {
      auto out = conv2d(in, wt, b, stride, pad);
      if (!proj.defined()) proj = const_like(out, rng);
      return sum(mul(out, proj));
    };
    fd_check(in, loss);
    fd_check(wt, loss);
    fd_check(b, loss);
  }
}

}  // TEST_SUITE tensor.conv2d

TEST_SUITE("tensor.resize_and_norm") {

TEST_CASE("bilinear keeps a constant image constant") {
  auto in = Tensor<double>::full({2, 3, 4}, 2.5);
  auto out = bilinear_resize(in, 9, 16);
  for (double v : out.data()) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("bilinear identity when sizes match") {
  Rng rng(3);
  auto in = Tensor<double>::randn({3, 5, 7}, rng, 1.0);
  CHECK(bitwise_equal(bilinear_resize(in, 5, 7), in));
}

TEST_CASE("bilinear 2x upscale pins corners to the input corners") {
  auto in = Tensor<double>::from_data({1, 2, 2}, {1, 2, 3, 4});
  auto out = bilinear_resize(in, 4, 4);
  CHECK(out.data()[0] == doctest::Approx(1.0));
  CHECK(out.data()[3] == doctest::Approx(2.0));
  CHECK(out.data()[12] == doctest::Approx(3.0));
  CHECK(out.data()[15] == doctest::Approx(4.0));
  // interior sample at fractional offsets 0.25/0.75
  const double want = 0.75 * (0.25 * 1 + 0.75 * 2) + 0.25 * (0.25 * 3 + 0.75 * 4);
  CHECK(out.data()[static_cast<size_t>(1 * 4 + 2)] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("bilinear matches the oracle on random sizes, both directions") {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const int c = rng.uniform_int(1, 3);
    const int h = rng.uniform_int(1, 7), w = rng.uniform_int(1, 7);
    const int oh = rng.uniform_int(1, 9), ow = rng.uniform_int(1, 9);
    auto in = Tensor<double>::randn({c, h, w}, rng, 1.0);
    auto out = bilinear_resize(in, oh, ow);
    const auto want = naive_bilinear(std::vector<double>(in.data().begin(), in.data().end()),
                                     c, h, w, oh, ow);
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(want[i]).epsilon(1e-9));
  }
}

TEST_CASE("bilinear gradient matches finite differences") {
  Rng rng(13);
  for (int rep = 0; rep < 20; ++rep) {
    const int c = rng.uniform_int(1, 2);
    const int h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5);
    const int oh = rng.uniform_int(1, 7), ow = rng.uniform_int(1, 7);
    auto in = Tensor<double>::randn({c, h, w}, rng, 1.0, true);
    Tensor<double> proj;
    auto loss = [&] {
      auto out = bilinear_resize(in, oh, ow);
      if (!proj.defined()) proj = const_like(out, rng);
      return sum(mul(out, proj));
    };
    fd_check(in, loss);
  }
}

TEST_CASE("channel_norm standardizes the two-value channel to +/- 1/sqrt(1+eps)") {
  const double eps = 1e-5;
  auto in = Tensor<double>::from_data({1, 1, 2}, {-1, 1});
  auto out = channel_norm(in, eps);
  const double want = 1.0 / std::sqrt(1.0 + eps);
  CHECK(out.data()[0] == doctest::Approx(-want).epsilon(1e-14));
  CHECK(out.data()[1] == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("channel_norm sends constant channels to zero") {
  auto in = Tensor<double>::full({2, 3, 3}, 4.2);
  auto out = channel_norm(in, 1e-5);
  for (double v : out.data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("channel_norm output has zero mean and unit variance per channel") {
  Rng rng(17);
  auto in = Tensor<double>::randn({4, 6, 5}, rng, 3.0);
  auto out = channel_norm(in, 1e-8);
  const size_t m = 30;
  for (int c = 0; c < 4; ++c) {
    double mean = 0, var = 0;
    for (size_t i = 0; i < m; ++i) mean += out.data()[c * m + i];
    mean /= static_cast<double>(m);
    for (size_t i = 0; i < m; ++i) {
      const double d = out.data()[c * m + i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("channel_norm gradient matches finite differences") {
  Rng rng(19);
  for (int rep = 0; rep < 20; ++rep) {
    const int c = rng.uniform_int(1, 3);
    const int h = rng.uniform_int(2, 4), w = rng.uniform_int(2, 4);
    auto in = Tensor<double>::randn({c, h, w}, rng, 2.0, true);
    Tensor<double> proj;
    auto loss = [&] {
      auto out = channel_norm(in, 1e-3);
      if (!proj.defined()) proj = const_like(out, rng);
      return sum(mul(out, proj));
    };
    fd_check(in, loss);
  }
}

}  // TEST_SUITE tensor.resize_and_norm

TEST_SUITE("tensor.structure_ops") {

TEST_CASE("slice of a concat returns the original parts") {
  Rng rng(23);
  auto a = Tensor<double>::randn({3, 4, 5}, rng, 1.0);
  auto b = Tensor<double>::randn({2, 4, 5}, rng, 1.0);
  auto cat = concat_channels(a, b);
  CHECK(cat.shape() == std::vector<int>{5, 4, 5});
  CHECK(bitwise_equal(slice_channels(cat, 0, 3), a));
  CHECK(bitwise_equal(slice_channels(cat, 3, 5), b));
}

TEST_CASE("concat with a zero-channel tensor is the identity") {
  Rng rng(29);
  auto a = Tensor<double>::randn({3, 2, 2}, rng, 1.0);
  auto empty = Tensor<double>::zeros({0, 2, 2});
  CHECK(bitwise_equal(concat_channels(a, empty), a));
  CHECK(bitwise_equal(concat_channels(empty, a), a));
}

TEST_CASE("concat and slice validate their ranges") {
  Rng rng(31);
  auto a = Tensor<double>::randn({2, 3, 3}, rng, 1.0);
  auto b = Tensor<double>::randn({2, 4, 3}, rng, 1.0);
  CHECK_THROWS_AS(concat_channels(a, b), ConfigError);
  CHECK_THROWS_AS(slice_channels(a, 2, 1), ConfigError);
  CHECK_THROWS_AS(slice_channels(a, 0, 3), ConfigError);
  CHECK_THROWS_AS(slice_channels(a, -1, 1), ConfigError);
  CHECK(slice_channels(a, 1, 1).shape() == std::vector<int>{0, 3, 3});
}

TEST_CASE("concat and slice gradients match finite differences") {
  Rng rng(37);
  for (int rep = 0; rep < 20; ++rep) {
    const int ca = rng.uniform_int(1, 3), cb = rng.uniform_int(1, 3);
    const int h = rng.uniform_int(2, 4), w = rng.uniform_int(2, 4);
    auto a = Tensor<double>::randn({ca, h, w}, rng, 1.0, true);
    auto b = Tensor<double>::randn({cb, h, w}, rng, 1.0);
    Tensor<double> proj;
    auto loss = [&] {
      auto sliced = slice_channels(concat_channels(a, b), 0, ca + cb - 1);
      if (!proj.defined()) proj = const_like(sliced, rng);
      return sum(mul(sliced, proj));
    };
    fd_check(a, loss);
  }
}

TEST_CASE("reflect_pad_br mirrors without repeating the edge") {
  auto in = Tensor<double>::from_data({1, 2, 2}, {1, 2, 3, 4});
  auto out = reflect_pad_br(in, 3, 3);
  const std::vector<double> want = {1, 2, 1, 3, 4, 3, 1, 2, 1};
  for (size_t i = 0; i < want.size(); ++i) CHECK(out.data()[i] == want[i]);
}

TEST_CASE("reflect_pad_br validates the mirrorable range") {
  auto in = Tensor<double>::full({1, 3, 3}, 1.0);
  CHECK_THROWS_AS(reflect_pad_br(in, 2, 3), ConfigError);
  CHECK_THROWS_AS(reflect_pad_br(in, 6, 3), ConfigError);
  CHECK(reflect_pad_br(in, 5, 5).shape() == std::vector<int>{1, 5, 5});
}

TEST_CASE("reflect_pad_br gradient matches finite differences") {
  Rng rng(41);
  for (int rep = 0; rep < 20; ++rep) {
    const int c = rng.uniform_int(1, 2);
    const int h = rng.uniform_int(2, 4), w = rng.uniform_int(2, 4);
    const int oh = h + rng.uniform_int(0, h - 1), ow = w + rng.uniform_int(0, w - 1);
    auto in = Tensor<double>::randn({c, h, w}, rng, 1.0, true);
    Tensor<double> proj;
    auto loss = [&] {
      auto out = reflect_pad_br(in, oh, ow);
      if (!proj.defined()) proj = const_like(out, rng);
      return sum(mul(out, proj));
    };
    fd_check(in, loss);
  }
}

TEST_CASE("relu clamps negatives and keeps positives") {
  auto in = Tensor<double>::from_data({1, 1, 4}, {-2, -0.5, 0, 3});
  auto out = relu(in);
  CHECK(out.data()[0] == 0);
  CHECK(out.data()[1] == 0);
  CHECK(out.data()[2] == 0);
  CHECK(out.data()[3] == 3);
}

TEST_CASE("relu gradient matches finite differences away from the kink") {
  Rng rng(43);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = rng.uniform_int(4, 12);
    auto in = Tensor<double>::randn({n}, rng, 1.0, true);
    for (auto& v : in.data())
      if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
    Tensor<double> proj;
    auto loss = [&] {
      auto out = relu(in);
      if (!proj.defined()) proj = const_like(out, rng);
      return sum(mul(out, proj));
    };
    fd_check(in, loss);
  }
}

}  // TEST_SUITE tensor.structure_ops

TEST_SUITE("tensor.losses") {

TEST_CASE("cross entropy of uniform logits over 4 classes is ln 4") {
  auto logits = Tensor<double>::zeros({4, 2, 2});
  LabelMap y(2, 2, 2);
  auto loss = softmax_cross_entropy(logits, y);
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("a large margin on the correct class drives the loss to zero") {
  auto logits = Tensor<double>::zeros({3, 2, 2});
  LabelMap y(2, 2, 1);
  for (int p = 0; p < 4; ++p) logits.data()[static_cast<size_t>(4 + p)] = 20.0;
  auto loss = softmax_cross_entropy(logits, y);
  CHECK(loss.item() < 1e-6);
}

TEST_CASE("cross entropy matches a per-pixel log-sum-exp oracle") {
  Rng rng(47);
  auto logits = Tensor<double>::randn({3, 2, 2}, rng, 2.0);
  LabelMap y(2, 2);
  y.at(0, 0) = 0;
  y.at(0, 1) = 2;
  y.at(1, 0) = 1;
  y.at(1, 1) = kIgnoreLabel;
  double want = 0;
  int counted = 0;
  for (int p = 0; p < 4; ++p) {
    const int lab = y.data[static_cast<size_t>(p)];
    if (lab == kIgnoreLabel) continue;
    double lse = 0;
    for (int c = 0; c < 3; ++c) lse += std::exp(logits.data()[static_cast<size_t>(c * 4 + p)]);
    want += std::log(lse) - logits.data()[static_cast<size_t>(lab * 4 + p)];
    ++counted;
  }
  want /= counted;
  CHECK(softmax_cross_entropy(logits, y).item() == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("cross entropy is invariant to a constant logit shift") {
  Rng rng(53);
  auto logits = Tensor<double>::randn({4, 3, 3}, rng, 1.0);
  LabelMap y(3, 3);
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = static_cast<uint8_t>(i % 4);
  const double base = softmax_cross_entropy(logits, y).item();
  auto shifted = add(logits, Tensor<double>::full({4, 3, 3}, 7.3));
  CHECK(softmax_cross_entropy(shifted, y).item() == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("ignored pixels are excluded; an all-ignore map costs zero") {
  Rng rng(59);
  auto logits = Tensor<double>::randn({3, 2, 2}, rng, 1.0, true);
  LabelMap all_ignore(2, 2, kIgnoreLabel);
  auto loss = softmax_cross_entropy(logits, all_ignore);
  CHECK(loss.item() == 0.0);
  backward(loss);
  for (double g : logits.grad()) CHECK(g == 0.0);
}

TEST_CASE("labels outside the class range are rejected") {
  auto logits = Tensor<double>::zeros({3, 1, 1});
  LabelMap y(1, 1, 3);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, y), ConfigError);
  LabelMap bad_dims(2, 1, 0);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, bad_dims), ConfigError);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(61);
  for (int rep = 0; rep < 20; ++rep) {
    const int cls = rng.uniform_int(2, 4);
    const int h = rng.uniform_int(1, 3), w = rng.uniform_int(1, 3);
    auto logits = Tensor<double>::randn({cls, h, w}, rng, 1.5, true);
    LabelMap y(h, w);
    for (auto& v : y.data)
      v = rng.uniform() < 0.2 ? static_cast<uint8_t>(kIgnoreLabel)
                              : static_cast<uint8_t>(rng.uniform_int(0, cls - 1));
    if (std::all_of(y.data.begin(), y.data.end(),
                    [](uint8_t v) { return v == kIgnoreLabel; }))
      y.data[0] = 0;
    auto loss = [&] { return softmax_cross_entropy(logits, y); };
    fd_check(logits, loss);
  }
}

TEST_CASE("masked mse averages squared error over selected positions and channels") {
  auto a = Tensor<double>::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto b = Tensor<double>::zeros({2, 2, 2});
  auto mask = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  // selected positions (0,0) and (1,1): (1 + 16 + 25 + 64) / (2 channels * 2 positions)
  CHECK(mse_masked(a, b, mask).item() == doctest::Approx(106.0 / 4.0).epsilon(1e-12));
}

TEST_CASE("masked mse of identical tensors is exactly zero") {
  Rng rng(67);
  auto a = Tensor<double>::randn({3, 4, 4}, rng, 1.0);
  auto mask = Tensor<double>::full({4, 4}, 1.0);
  CHECK(mse_masked(a, a.detach(), mask).item() == 0.0);
}

TEST_CASE("perturbing a masked-out position does not change the loss") {
  Rng rng(71);
  auto a = Tensor<double>::randn({2, 3, 3}, rng, 1.0);
  auto b = Tensor<double>::randn({2, 3, 3}, rng, 1.0);
  auto mask = Tensor<double>::full({3, 3}, 1.0);
  mask.data()[4] = 0.0;
  const double base = mse_masked(a, b, mask).item();
  auto a2 = a.detach();
  a2.data()[4] += 100.0;       // channel 0, the masked-out center
  a2.data()[9 + 4] -= 50.0;    // channel 1, same position
  CHECK(mse_masked(a2, b, mask).item() == base);
  auto a3 = a.detach();
  a3.data()[0] += 1.0;  // a selected position: the loss must move
  CHECK(mse_masked(a3, b, mask).item() != base);
}

TEST_CASE("an all-zero mask gives zero loss and zero gradient") {
  Rng rng(73);
  auto a = Tensor<double>::randn({2, 2, 2}, rng, 1.0, true);
  auto b = Tensor<double>::randn({2, 2, 2}, rng, 1.0);
  auto mask = Tensor<double>::zeros({2, 2});
  auto loss = mse_masked(a, b, mask);
  CHECK(loss.item() == 0.0);
  backward(loss);
  for (double g : a.grad()) CHECK(g == 0.0);
}

TEST_CASE("non-binary mask entries are rejected") {
  auto a = Tensor<double>::zeros({1, 2, 2});
  auto mask = Tensor<double>::from_data({2, 2}, {1, 0.5, 0, 1});
  CHECK_THROWS_AS(mse_masked(a, a, mask), ConfigError);
}

TEST_CASE("masked mse back-propagates into the first argument only") {
  Rng rng(79);
  auto a = Tensor<double>::randn({2, 2, 2}, rng, 1.0, true);
  auto b = Tensor<double>::randn({2, 2, 2}, rng, 1.0, true);
  auto mask = Tensor<double>::full({2, 2}, 1.0);
  auto loss = mse_masked(a, b, mask);
  backward(loss);
  CHECK(a.has_grad());
  bool a_moves = false;
  for (double g : a.grad()) a_moves |= g != 0.0;
  CHECK(a_moves);
  // b is a constant target: it never receives gradient
  for (double g : b.grad()) CHECK(g == 0.0);
}

TEST_CASE("masked mse gradient matches finite differences") {
  Rng rng(83);
  for (int rep = 0; rep < 20; ++rep) {
    const int c = rng.uniform_int(1, 3);
    const int h = rng.uniform_int(1, 3), w = rng.uniform_int(1, 3);
    auto a = Tensor<double>::randn({c, h, w}, rng, 1.0, true);
    auto b = Tensor<double>::randn({c, h, w}, rng, 1.0);
    std::vector<double> mv(static_cast<size_t>(h) * w);
    for (auto& v : mv) v = rng.coin() ? 1.0 : 0.0;
    mv[0] = 1.0;
    auto mask = Tensor<double>::from_data({h, w}, std::move(mv));
    auto loss = [&] { return mse_masked(a, b, mask); };
    fd_check(a, loss);
  }
}

}  // TEST_SUITE tensor.losses

TEST_SUITE("tensor.elementwise_and_autograd") {

TEST_CASE("add, mul, scale, and sum produce the expected values") {
  auto a = Tensor<double>::from_data({3}, {1, 2, 3});
  auto b = Tensor<double>::from_data({3}, {10, 20, 30});
  CHECK(add(a, b).data()[1] == 22);
  CHECK(mul(a, b).data()[2] == 90);
  CHECK(scale(a, -2.0).data()[0] == -2);
  CHECK(sum(a).item() == 6);
  CHECK_THROWS_AS(add(a, Tensor<double>::zeros({4})), ConfigError);
  CHECK_THROWS_AS(mul(a, Tensor<double>::zeros({4})), ConfigError);
}

TEST_CASE("elementwise gradients match finite differences") {
  Rng rng(89);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = rng.uniform_int(2, 10);
    auto a = Tensor<double>::randn({n}, rng, 1.0, true);
    auto b = Tensor<double>::randn({n}, rng, 1.0);
    auto loss = [&] { return sum(mul(add(a, b), scale(a, 0.7))); };
    fd_check(a, loss);
  }
}

TEST_CASE("sum of a parameter back-propagates ones") {
  Rng rng(97);
  auto w = Tensor<double>::randn({2, 3}, rng, 1.0, true);
  backward(sum(w));
  for (double g : w.grad()) CHECK(g == 1.0);
}

TEST_CASE("sum of squares back-propagates twice the values") {
  Rng rng(101);
  auto w = Tensor<double>::randn({5}, rng, 1.0, true);
  backward(sum(mul(w, w)));
  for (size_t i = 0; i < w.numel(); ++i)
    CHECK(w.grad()[i] == doctest::Approx(2.0 * w.data()[i]).epsilon(1e-12));
}

TEST_CASE("repeated backward calls accumulate leaf gradients") {
  auto w = Tensor<double>::from_data({2}, {1, 2}, true);
  backward(sum(w));
  backward(sum(w));
  CHECK(w.grad()[0] == 2.0);
  CHECK(w.grad()[1] == 2.0);
  w.zero_grad();
  CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("detach cuts the tape") {
  auto w = Tensor<double>::from_data({2}, {1, 2}, true);
  auto cut = scale(w, 2.0).detach();
  CHECK_THROWS_AS(backward(sum(cut)), ConfigError);
}

TEST_CASE("inputs without requires_grad receive no gradient buffer") {
  auto w = Tensor<double>::from_data({2}, {1, 2}, true);
  auto x = Tensor<double>::from_data({2}, {3, 4});
  backward(sum(mul(w, x)));
  CHECK(w.has_grad());
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward validates its root") {
  auto w = Tensor<double>::from_data({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(add(w, w)), ConfigError);  // not a scalar
  auto plain = Tensor<double>::from_data({1}, {5});
  CHECK_THROWS_AS(backward(plain), ConfigError);  // no tape
}

TEST_CASE("the no-grad guard suppresses tape construction") {
  auto w = Tensor<double>::from_data({2}, {1, 2}, true);
  Tensor<double> out;
  {
    autograd::NoGradGuard ng;
    CHECK_FALSE(autograd::enabled());
    out = sum(mul(w, w));
  }
  CHECK(autograd::enabled());
  CHECK_THROWS_AS(backward(out), ConfigError);
}

TEST_CASE("non-finite values surface as NumericError") {
  auto big = Tensor<float>::from_data({2}, {3e38f, 3e38f});
  CHECK_THROWS_AS(add(big, big), NumericError);
  auto t = Tensor<double>::from_data({1}, {1.0});
  CHECK_THROWS_AS(scale(t, std::numeric_limits<double>::infinity()), NumericError);
  auto nan_in = Tensor<double>::from_data({1, 1, 1}, {std::nan("")});
  auto w1 = Tensor<double>::full({1, 1, 1, 1}, 1.0);
  CHECK_THROWS_AS(conv2d(nan_in, w1, Tensor<double>::zeros({1}), 1, 0), NumericError);
}

}  // TEST_SUITE tensor.elementwise_and_autograd

TEST_SUITE("tensor.optimizer") {

TEST_CASE("plain SGD step without momentum") {
  ParamStore<double> store;
  auto& p = store.add("p", Tensor<double>::from_data({1}, {1.0}, true));
  p.node()->grad = {0.5};
  SgdOptimizer<double> opt;
  opt.step(store, 0.1, 0.0);
  CHECK(p.data()[0] == doctest::Approx(0.95).epsilon(1e-15));
}

TEST_CASE("two momentum steps against a constant gradient") {
  // v1 = 1, w1 = -1; v2 = 0.9 + 1 = 1.9, w2 = -2.9
  ParamStore<double> store;
  auto& p = store.add("w", Tensor<double>::from_data({1}, {0.0}, true));
  SgdOptimizer<double> opt;
  for (int i = 0; i < 2; ++i) {
    p.node()->grad = {1.0};
    opt.step(store, 1.0, 0.9);
  }
  CHECK(p.data()[0] == doctest::Approx(-2.9).epsilon(1e-15));
}

TEST_CASE("gradients are cleared by the step") {
  ParamStore<double> store;
  auto& p = store.add("p", Tensor<double>::from_data({2}, {1.0, 2.0}, true));
  p.node()->grad = {0.3, 0.4};
  SgdOptimizer<double> opt;
  opt.step(store, 0.1, 0.0);
  REQUIRE(p.has_grad());
  for (double g : p.grad()) CHECK(g == 0.0);
}

TEST_CASE("a missing gradient acts as zero while momentum decays") {
  ParamStore<double> store;
  auto& p = store.add("p", Tensor<double>::from_data({1}, {0.0}, true));
  SgdOptimizer<double> opt;
  p.node()->grad = {1.0};
  opt.step(store, 1.0, 0.5);  // v = 1, p = -1
  p.drop_grad();
  opt.step(store, 1.0, 0.5);  // v = 0.5, p = -1.5
  CHECK(p.data()[0] == doctest::Approx(-1.5).epsilon(1e-15));
}

TEST_CASE("a step that destroys finiteness is rejected") {
  ParamStore<float> store;
  auto& p = store.add("p", Tensor<float>::from_data({1}, {0.0f}, true));
  p.node()->grad = {1e38f};
  SgdOptimizer<float> opt;
  CHECK_THROWS_AS(opt.step(store, 1e38f, 0.0f), NumericError);
}

TEST_CASE("momentum SGD minimizes a convex quadratic within 500 steps") {
  Rng rng(103);
  ParamStore<double> store;
  auto& w = store.add("w", Tensor<double>::randn({6}, rng, 1.0, true));
  auto target = Tensor<double>::randn({6}, rng, 1.0);
  SgdOptimizer<double> opt;
  int steps = 0;
  double worst = 1.0;
  for (; steps < 500 && worst >= 1e-6; ++steps) {
    auto diff = add(w, scale(target, -1.0));
    backward(scale(sum(mul(diff, diff)), 0.5));
    opt.step(store, 0.1, 0.9);
    worst = 0;
    for (size_t i = 0; i < w.numel(); ++i)
      worst = std::max(worst, std::abs(w.data()[i] - target.data()[i]));
  }
  CHECK(worst < 1e-6);
  CHECK(steps <= 500);
}

TEST_CASE("poly schedule: full rate at the start, halfway decay, pinned value") {
  CHECK(poly_lr(0, 2000, 0.01, 0.9) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(poly_lr(1000, 2000, 0.01, 0.9) ==
        doctest::Approx(0.01 * std::pow(0.5, 0.9)).epsilon(1e-12));
  CHECK(poly_lr(1000, 2000, 0.01, 0.9) == doctest::Approx(0.0053588673).epsilon(1e-7));
  CHECK(poly_lr(2000, 2000, 0.01, 0.9) == 0.0);
  double prev = poly_lr(0, 100, 0.02, 0.9);
  for (int i = 1; i <= 100; ++i) {
    const double cur = poly_lr(i, 100, 0.02, 0.9);
    CHECK(cur <= prev);
    prev = cur;
  }
  CHECK_THROWS_AS(poly_lr(-1, 10, 0.01, 0.9), ConfigError);
  CHECK_THROWS_AS(poly_lr(11, 10, 0.01, 0.9), ConfigError);
  CHECK_THROWS_AS(poly_lr(0, 0, 0.01, 0.9), ConfigError);
}

}  // TEST_SUITE tensor.optimizer
