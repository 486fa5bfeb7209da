#include "dcfm/kernels.hpp"

#include <algorithm>
#include <vector>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dcfm::kernels {

namespace {
bool g_parallel = true;
}

bool parallel_enabled() {
#ifdef _OPENMP
  return g_parallel;
#else
  return false;
#endif
}

void set_parallel(bool on) { g_parallel = on; }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

// The conv kernels unfold the input into an im2col patch matrix, then run
// plain row-times-column loops against it. Channel-heavy layers with tiny
// spatial grids (the deep-encoder shapes) spend their time on arithmetic
// instead of per-tap bounds checks, and every output element keeps one fixed
// accumulation order, so results are bit-identical across thread counts.
//
// Patch layout: rows indexed by (ic, fh, fw), columns by output position;
// out-of-bounds taps are stored as zero.
template <typename T>
void im2col(const T* in, int ci, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, bool par, T* patch) {
  const int rows = ci * kh * kw;
  const size_t cols = static_cast<size_t>(oh) * ow;
#pragma omp parallel for schedule(static) if (par)
  for (int r = 0; r < rows; ++r) {
    const int ic = r / (kh * kw);
    const int fh = r / kw % kh;
    const int fw = r % kw;
    const T* plane = in + static_cast<size_t>(ic) * h * w;
    T* prow = patch + static_cast<size_t>(r) * cols;
    for (int y = 0; y < oh; ++y) {
      T* dst = prow + static_cast<size_t>(y) * ow;
      const int iy = y * stride + fh - pad;
      if (iy < 0 || iy >= h) {
        for (int x = 0; x < ow; ++x) dst[x] = T(0);
        continue;
      }
      const T* irow = plane + static_cast<size_t>(iy) * w;
      for (int x = 0; x < ow; ++x) {
        const int ix = x * stride + fw - pad;
        dst[x] = (ix >= 0 && ix < w) ? irow[ix] : T(0);
      }
    }
  }
}

// 1x1/stride-1/no-pad convolutions can use the input as the patch matrix
// directly; everything else unfolds into the scratch buffer.
template <typename T>
const T* patch_matrix(const T* in, int ci, int h, int w, int kh, int kw, int stride,
                      int pad, int oh, int ow, bool par, std::vector<T>& scratch) {
  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) return in;
  scratch.resize(static_cast<size_t>(ci) * kh * kw * oh * ow);
  im2col(in, ci, h, w, kh, kw, stride, pad, oh, ow, par, scratch.data());
  return scratch.data();
}

}  // namespace

template <typename T>
void conv2d_forward(const T* in, int ci, int h, int w,
                    const T* wt, int co, int kh, int kw,
                    const T* bias, int stride, int pad,
                    T* out, int oh, int ow) {
  const bool par = parallel_enabled();
  const int k = ci * kh * kw;
  const size_t cols = static_cast<size_t>(oh) * ow;
  std::vector<T> scratch;
  const T* patch = patch_matrix(in, ci, h, w, kh, kw, stride, pad, oh, ow, par, scratch);

#pragma omp parallel for schedule(static) if (par)
  for (int oc = 0; oc < co; ++oc) {
    T* orow = out + static_cast<size_t>(oc) * cols;
    const T b = bias ? bias[oc] : T(0);
    for (size_t p = 0; p < cols; ++p) orow[p] = b;
    const T* wrow = wt + static_cast<size_t>(oc) * k;
    for (int r = 0; r < k; ++r) {
      const T wv = wrow[r];
      const T* prow = patch + static_cast<size_t>(r) * cols;
      for (size_t p = 0; p < cols; ++p) orow[p] += wv * prow[p];
    }
  }
}

template <typename T>
void conv2d_backward_input(const T* gout, int co, int oh, int ow,
                           const T* wt, int ci, int kh, int kw,
                           int stride, int pad,
                           T* gin, int h, int w) {
  const bool par = parallel_enabled();
  const int k = ci * kh * kw;
  const size_t cols = static_cast<size_t>(oh) * ow;

  // Patch-space gradient first (transposed weights keep the inner loops
  // contiguous), then fold the rows back onto the input planes. Rows of a
  // given input channel only touch that channel's plane, so the fold stays
  // race-free and ordered when split across threads.
  std::vector<T> wt_t(static_cast<size_t>(k) * co);
#pragma omp parallel for schedule(static) if (par)
  for (int r = 0; r < k; ++r)
    for (int oc = 0; oc < co; ++oc)
      wt_t[static_cast<size_t>(r) * co + oc] = wt[static_cast<size_t>(oc) * k + r];

  std::vector<T> gpatch(static_cast<size_t>(k) * cols);
#pragma omp parallel for schedule(static) if (par)
  for (int r = 0; r < k; ++r) {
    T* prow = gpatch.data() + static_cast<size_t>(r) * cols;
    for (size_t p = 0; p < cols; ++p) prow[p] = T(0);
    const T* wrow = wt_t.data() + static_cast<size_t>(r) * co;
    for (int oc = 0; oc < co; ++oc) {
      const T wv = wrow[oc];
      const T* grow = gout + static_cast<size_t>(oc) * cols;
      for (size_t p = 0; p < cols; ++p) prow[p] += wv * grow[p];
    }
  }

#pragma omp parallel for schedule(static) if (par)
  for (int ic = 0; ic < ci; ++ic) {
    T* plane = gin + static_cast<size_t>(ic) * h * w;
    for (int fh = 0; fh < kh; ++fh) {
      for (int fw = 0; fw < kw; ++fw) {
        const T* prow = gpatch.data() + (static_cast<size_t>(ic) * kh * kw + fh * kw + fw) * cols;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride + fh - pad;
          if (iy < 0 || iy >= h) continue;
          T* irow = plane + static_cast<size_t>(iy) * w;
          const T* src = prow + static_cast<size_t>(y) * ow;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * stride + fw - pad;
            if (ix >= 0 && ix < w) irow[ix] += src[x];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const T* gout, int co, int oh, int ow,
                            const T* in, int ci, int h, int w,
                            int kh, int kw, int stride, int pad,
                            T* gwt) {
  const bool par = parallel_enabled();
  const int k = ci * kh * kw;
  const size_t cols = static_cast<size_t>(oh) * ow;
  std::vector<T> scratch;
  const T* patch = patch_matrix(in, ci, h, w, kh, kw, stride, pad, oh, ow, par, scratch);

#pragma omp parallel for schedule(static) if (par)
  for (int oc = 0; oc < co; ++oc) {
    const T* grow = gout + static_cast<size_t>(oc) * cols;
    T* wrow = gwt + static_cast<size_t>(oc) * k;
    for (int r = 0; r < k; ++r) {
      const T* prow = patch + static_cast<size_t>(r) * cols;
      T acc = 0;
      for (size_t p = 0; p < cols; ++p) acc += grow[p] * prow[p];
      wrow[r] += acc;
    }
  }
}

template <typename T>
void conv2d_backward_bias(const T* gout, int co, int oh, int ow, T* gbias) {
  const bool par = parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
  for (int oc = 0; oc < co; ++oc) {
    const T* plane = gout + static_cast<size_t>(oc) * oh * ow;
    T acc = 0;
    for (int i = 0; i < oh * ow; ++i) acc += plane[i];
    gbias[oc] += acc;
  }
}

namespace {

// align-corners-false source coordinate with edge clamping.
template <typename T>
inline void sample_coord(int o, int out_n, int in_n, int& i0, int& i1, T& frac) {
  T s = (static_cast<T>(o) + T(0.5)) * static_cast<T>(in_n) / static_cast<T>(out_n) - T(0.5);
  if (s < 0) s = 0;
  T limit = static_cast<T>(in_n - 1);
  if (s > limit) s = limit;
  i0 = static_cast<int>(std::floor(s));
  if (i0 > in_n - 2) i0 = in_n - 2;
  if (i0 < 0) i0 = 0;
  i1 = i0 + 1;
  if (in_n == 1) { i0 = 0; i1 = 0; frac = 0; return; }
  frac = s - static_cast<T>(i0);
}

}  // namespace

template <typename T>
void bilinear_forward(const T* in, int c, int h, int w, T* out, int oh, int ow) {
  const bool par = parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = in + static_cast<size_t>(ch) * h * w;
    T* oplane = out + static_cast<size_t>(ch) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      int y0, y1;
      T fy;
      sample_coord<T>(y, oh, h, y0, y1, fy);
      for (int x = 0; x < ow; ++x) {
        int x0, x1;
        T fx;
        sample_coord<T>(x, ow, w, x0, x1, fx);
        const T v00 = plane[y0 * w + x0];
        const T v01 = plane[y0 * w + x1];
        const T v10 = plane[y1 * w + x0];
        const T v11 = plane[y1 * w + x1];
        // Two-sided weights, not a lerp: exact at frac 0 and 1, so a same-size
        // resize is the identity and the clamped border sample reproduces the
        // border value. Also mirrors the weights the backward pass scatters.
        const T top = (T(1) - fx) * v00 + fx * v01;
        const T bot = (T(1) - fx) * v10 + fx * v11;
        oplane[y * ow + x] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
}

template <typename T>
void bilinear_backward(const T* gout, int c, int oh, int ow, T* gin, int h, int w) {
  const bool par = parallel_enabled();
  // Scatter per channel; channels are independent so the per-element order is
  // the serial (y, x) order regardless of thread count.
#pragma omp parallel for schedule(static) if (par)
  for (int ch = 0; ch < c; ++ch) {
    const T* gplane = gout + static_cast<size_t>(ch) * oh * ow;
    T* iplane = gin + static_cast<size_t>(ch) * h * w;
    for (int y = 0; y < oh; ++y) {
      int y0, y1;
      T fy;
      sample_coord<T>(y, oh, h, y0, y1, fy);
      for (int x = 0; x < ow; ++x) {
        int x0, x1;
        T fx;
        sample_coord<T>(x, ow, w, x0, x1, fx);
        const T g = gplane[y * ow + x];
        iplane[y0 * w + x0] += g * (T(1) - fy) * (T(1) - fx);
        iplane[y0 * w + x1] += g * (T(1) - fy) * fx;
        iplane[y1 * w + x0] += g * fy * (T(1) - fx);
        iplane[y1 * w + x1] += g * fy * fx;
      }
    }
  }
}

template <typename T>
void relu_forward(const T* x, T* y, size_t n) {
  const bool par = parallel_enabled() && n > 4096;
#pragma omp parallel for schedule(static) if (par)
  for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(const T* x, const T* gy, T* gx, size_t n) {
  const bool par = parallel_enabled() && n > 4096;
#pragma omp parallel for schedule(static) if (par)
  for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) {
    if (x[i] > T(0)) gx[i] += gy[i];
  }
}

#define DCFM_INSTANTIATE(T)                                                                     \
  template void conv2d_forward<T>(const T*, int, int, int, const T*, int, int, int, const T*,  \
                                  int, int, T*, int, int);                                      \
  template void conv2d_backward_input<T>(const T*, int, int, int, const T*, int, int, int,     \
                                         int, int, T*, int, int);                               \
  template void conv2d_backward_weight<T>(const T*, int, int, int, const T*, int, int, int,    \
                                          int, int, int, int, T*);                              \
  template void conv2d_backward_bias<T>(const T*, int, int, int, T*);                           \
  template void bilinear_forward<T>(const T*, int, int, int, T*, int, int);                     \
  template void bilinear_backward<T>(const T*, int, int, int, T*, int, int);                    \
  template void relu_forward<T>(const T*, T*, size_t);                                          \
  template void relu_backward<T>(const T*, const T*, T*, size_t);

DCFM_INSTANTIATE(float)
DCFM_INSTANTIATE(double)

#undef DCFM_INSTANTIATE

}  // namespace dcfm::kernels
