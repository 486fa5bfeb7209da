#include "dcfm/kernels.hpp"

#include <cmath>

namespace dcfm::reference {

// Plain loop nests, one index at a time. Kept deliberately simple so they can
// serve as the oracle for the optimized kernels.

template <typename T>
void conv2d_forward(const T* in, int ci, int h, int w,
                    const T* wt, int co, int kh, int kw,
                    const T* bias, int stride, int pad,
                    T* out, int oh, int ow) {
  for (int oc = 0; oc < co; ++oc) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        T acc = bias ? bias[oc] : T(0);
        for (int ic = 0; ic < ci; ++ic) {
          for (int fh = 0; fh < kh; ++fh) {
            for (int fw = 0; fw < kw; ++fw) {
              const int iy = y * stride + fh - pad;
              const int ix = x * stride + fw - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += wt[((static_cast<size_t>(oc) * ci + ic) * kh + fh) * kw + fw] *
                     in[(static_cast<size_t>(ic) * h + iy) * w + ix];
            }
          }
        }
        out[(static_cast<size_t>(oc) * oh + y) * ow + x] = acc;
      }
    }
  }
}

template <typename T>
void bilinear_forward(const T* in, int c, int h, int w, T* out, int oh, int ow) {
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        T sy = (static_cast<T>(y) + T(0.5)) * static_cast<T>(h) / static_cast<T>(oh) - T(0.5);
        T sx = (static_cast<T>(x) + T(0.5)) * static_cast<T>(w) / static_cast<T>(ow) - T(0.5);
        sy = std::min(std::max(sy, T(0)), static_cast<T>(h - 1));
        sx = std::min(std::max(sx, T(0)), static_cast<T>(w - 1));
        int y0 = static_cast<int>(std::floor(sy));
        int x0 = static_cast<int>(std::floor(sx));
        if (y0 > h - 2) y0 = h >= 2 ? h - 2 : 0;
        if (x0 > w - 2) x0 = w >= 2 ? w - 2 : 0;
        const int y1 = h >= 2 ? y0 + 1 : 0;
        const int x1 = w >= 2 ? x0 + 1 : 0;
        const T fy = h >= 2 ? sy - static_cast<T>(y0) : T(0);
        const T fx = w >= 2 ? sx - static_cast<T>(x0) : T(0);
        auto v = [&](int yy, int xx) { return in[(static_cast<size_t>(ch) * h + yy) * w + xx]; };
        // Same two-sided weight form as the optimized kernel (exact at frac 0
        // and 1); the expressions must match so outputs stay bit-identical.
        const T top = (T(1) - fx) * v(y0, x0) + fx * v(y0, x1);
        const T bot = (T(1) - fx) * v(y1, x0) + fx * v(y1, x1);
        out[(static_cast<size_t>(ch) * oh + y) * ow + x] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
}

template void conv2d_forward<float>(const float*, int, int, int, const float*, int, int, int,
                                    const float*, int, int, float*, int, int);
template void conv2d_forward<double>(const double*, int, int, int, const double*, int, int, int,
                                     const double*, int, int, double*, int, int);
template void bilinear_forward<float>(const float*, int, int, int, float*, int, int);
template void bilinear_forward<double>(const double*, int, int, int, double*, int, int);

}  // namespace dcfm::reference
