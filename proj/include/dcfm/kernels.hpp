#pragma once

#include <cstddef>

namespace dcfm::kernels {

// Optimized loop kernels behind the tensor ops. Parallelized with OpenMP when
// enabled; every kernel assigns each output element to exactly one iteration
// and accumulates its contributions in a fixed order, so results are
// bit-identical across thread counts and to the serial path.
//
// Gradient kernels accumulate (+=) into their destination buffers.

bool parallel_enabled();
void set_parallel(bool on);
int max_threads();

template <typename T>
void conv2d_forward(const T* in, int ci, int h, int w,
                    const T* wt, int co, int kh, int kw,
                    const T* bias, int stride, int pad,
                    T* out, int oh, int ow);

template <typename T>
void conv2d_backward_input(const T* gout, int co, int oh, int ow,
                           const T* wt, int ci, int kh, int kw,
                           int stride, int pad,
                           T* gin, int h, int w);

template <typename T>
void conv2d_backward_weight(const T* gout, int co, int oh, int ow,
                            const T* in, int ci, int h, int w,
                            int kh, int kw, int stride, int pad,
                            T* gwt);

template <typename T>
void conv2d_backward_bias(const T* gout, int co, int oh, int ow, T* gbias);

template <typename T>
void bilinear_forward(const T* in, int c, int h, int w, T* out, int oh, int ow);

template <typename T>
void bilinear_backward(const T* gout, int c, int oh, int ow, T* gin, int h, int w);

template <typename T>
void relu_forward(const T* x, T* y, size_t n);

template <typename T>
void relu_backward(const T* x, const T* gy, T* gx, size_t n);

}  // namespace dcfm::kernels

namespace dcfm::reference {

// Naive serial implementations, written independently of the optimized
// kernels. They are the ground truth the kernel tests compare against and the
// baseline the kernel benchmark times.

template <typename T>
void conv2d_forward(const T* in, int ci, int h, int w,
                    const T* wt, int co, int kh, int kw,
                    const T* bias, int stride, int pad,
                    T* out, int oh, int ow);

template <typename T>
void bilinear_forward(const T* in, int c, int h, int w, T* out, int oh, int ow);

}  // namespace dcfm::reference
