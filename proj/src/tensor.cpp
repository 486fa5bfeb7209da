#include "dcfm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "dcfm/flops.hpp"
#include "dcfm/kernels.hpp"

namespace dcfm {

namespace {

size_t numel_of(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

void validate_shape(const std::vector<int>& shape) {
  if (shape.empty()) throw ConfigError("tensor shape must have at least one dimension");
  for (int d : shape)
    if (d < 0) throw ConfigError("tensor dimensions must be non-negative");
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* what) {
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

template <typename T>
std::shared_ptr<TensorNode<T>> fresh_node(std::vector<int> shape, const char* op) {
  validate_shape(shape);
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value.assign(numel_of(n->shape), T(0));
  n->op = op;
  return n;
}

// True when the op should record itself on the tape.
template <typename T>
bool taped(std::initializer_list<const Tensor<T>*> ins) {
  if (!autograd::enabled()) return false;
  for (const Tensor<T>* t : ins)
    if (t->defined() && t->node()->tape) return true;
  return false;
}

// Grad buffers exist only for nodes backward() has decided to visit.
template <typename T>
bool wants_grad(const std::shared_ptr<TensorNode<T>>& p) {
  return !p->grad.empty();
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ConfigError(std::string(op) + ": undefined tensor argument");
}

}  // namespace

// --- construction ------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = fresh_node<T>(std::move(shape), "leaf");
  n->requires_grad = requires_grad;
  n->tape = requires_grad;
  return Tensor(n);
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<int> shape, T fill, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node()->value.begin(), t.node()->value.end(), fill);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad) {
  validate_shape(shape);
  if (data.size() != numel_of(shape))
    throw ConfigError("tensor data length does not match shape");
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  n->tape = requires_grad;
  return Tensor(n);
}

template <typename T>
Tensor<T> Tensor<T>::randn(std::vector<int> shape, Rng& rng, T stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (T& x : t.node()->value) x = static_cast<T>(rng.normal()) * stddev;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto n = fresh_node<T>(node_->shape, "detach");
  n->value = node_->value;
  return Tensor(n);
}

// --- conv2d ------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int pad) {
  require_defined(input, "conv2d");
  require_defined(weight, "conv2d");
  require_defined(bias, "conv2d");
  const auto& is = input.shape();
  const bool batched = is.size() == 4;
  if (!batched && is.size() != 3)
    throw ConfigError("conv2d: input must be [C,H,W] or [N,C,H,W]");
  if (weight.ndim() != 4) throw ConfigError("conv2d: weight must be [C_out,C_in,KH,KW]");
  const int n = batched ? is[0] : 1;
  const int ci = batched ? is[1] : is[0];
  const int h = batched ? is[2] : is[1];
  const int w = batched ? is[3] : is[2];
  const int co = weight.dim(0);
  const int kh = weight.dim(2);
  const int kw = weight.dim(3);
  if (weight.dim(1) != ci) throw ConfigError("conv2d: weight channels do not match input");
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel dims must be odd");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
  if (bias.ndim() != 1 || bias.dim(0) != co) throw ConfigError("conv2d: bias must be [C_out]");
  if (ci < 1 || h < 1 || w < 1 || co < 1) throw ConfigError("conv2d: empty input or weight");
  if (h + 2 * pad < kh || w + 2 * pad < kw)
    throw ConfigError("conv2d: output would be empty for this input size");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;

  std::vector<int> oshape = batched ? std::vector<int>{n, co, oh, ow}
                                    : std::vector<int>{co, oh, ow};
  auto out = fresh_node<T>(std::move(oshape), "conv2d");
  const size_t in_sz = static_cast<size_t>(ci) * h * w;
  const size_t out_sz = static_cast<size_t>(co) * oh * ow;
  for (int s = 0; s < n; ++s)
    kernels::conv2d_forward(input.data().data() + s * in_sz, ci, h, w,
                            weight.data().data(), co, kh, kw,
                            bias.data().data(), stride, pad,
                            out->value.data() + s * out_sz, oh, ow);
  check_finite(out->value, "conv2d output");
  if (flops::enabled())
    flops::add(static_cast<int64_t>(n) *
               (2ll * co * oh * ow * ci * kh * kw + 1ll * co * oh * ow));

  if (taped<T>({&input, &weight, &bias})) {
    out->tape = true;
    auto in_n = input.node();
    auto w_n = weight.node();
    auto b_n = bias.node();
    out->parents = {in_n, w_n, b_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      for (int s = 0; s < n; ++s) {
        const T* g = self.grad.data() + s * out_sz;
        if (wants_grad(in_n))
          kernels::conv2d_backward_input(g, co, oh, ow, w_n->value.data(), ci, kh, kw,
                                         stride, pad, in_n->grad.data() + s * in_sz, h, w);
        if (wants_grad(w_n))
          kernels::conv2d_backward_weight(g, co, oh, ow, in_n->value.data() + s * in_sz,
                                          ci, h, w, kh, kw, stride, pad, w_n->grad.data());
        if (wants_grad(b_n))
          kernels::conv2d_backward_bias(g, co, oh, ow, b_n->grad.data());
      }
    };
  }
  return Tensor<T>(out);
}

// --- bilinear_resize ----------------------------------------------------------

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, int out_h, int out_w) {
  require_defined(input, "bilinear_resize");
  if (input.ndim() != 3) throw ConfigError("bilinear_resize: input must be [C,H,W]");
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (c < 1 || h < 1 || w < 1) throw ConfigError("bilinear_resize: empty input");
  if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: output dims must be >= 1");

  auto out = fresh_node<T>({c, out_h, out_w}, "bilinear_resize");
  kernels::bilinear_forward(input.data().data(), c, h, w, out->value.data(), out_h, out_w);
  check_finite(out->value, "bilinear_resize output");
  if (flops::enabled()) flops::add(8ll * c * out_h * out_w);

  if (taped<T>({&input})) {
    out->tape = true;
    auto in_n = input.node();
    out->parents = {in_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (wants_grad(in_n))
        kernels::bilinear_backward(self.grad.data(), c, out_h, out_w, in_n->grad.data(), h, w);
    };
  }
  return Tensor<T>(out);
}

// --- channel_norm ---------------------------------------------------------------

template <typename T>
Tensor<T> channel_norm(const Tensor<T>& input, T eps) {
  require_defined(input, "channel_norm");
  if (input.ndim() != 3) throw ConfigError("channel_norm: input must be [C,H,W]");
  if (!(eps > T(0))) throw ConfigError("channel_norm: eps must be positive");
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (c < 1 || h < 1 || w < 1) throw ConfigError("channel_norm: empty input");
  const size_t m = static_cast<size_t>(h) * w;

  auto out = fresh_node<T>({c, h, w}, "channel_norm");
  std::vector<T> inv_sigma(static_cast<size_t>(c));
  const T* x = input.data().data();
  T* y = out->value.data();
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = x + ch * m;
    T* yc = y + ch * m;
    T mean = 0;
    for (size_t i = 0; i < m; ++i) mean += xc[i];
    mean /= static_cast<T>(m);
    T var = 0;
    for (size_t i = 0; i < m; ++i) {
      const T d = xc[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(m);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(ch)] = inv;
    for (size_t i = 0; i < m; ++i) yc[i] = (xc[i] - mean) * inv;
  }
  check_finite(out->value, "channel_norm output");
  if (flops::enabled()) flops::add(6ll * c * static_cast<int64_t>(m));

  if (taped<T>({&input})) {
    out->tape = true;
    auto in_n = input.node();
    out->parents = {in_n};
    out->backward_fn = [=, inv = std::move(inv_sigma)](TensorNode<T>& self) {
      if (!wants_grad(in_n)) return;
      // d/dx of (x - mu) / sigma: sigma^-1 * (g - mean(g) - yhat * mean(g * yhat))
      for (int ch = 0; ch < c; ++ch) {
        const T* gc = self.grad.data() + ch * m;
        const T* yc = self.value.data() + ch * m;
        T* gx = in_n->grad.data() + ch * m;
        T gmean = 0, gymean = 0;
        for (size_t i = 0; i < m; ++i) {
          gmean += gc[i];
          gymean += gc[i] * yc[i];
        }
        gmean /= static_cast<T>(m);
        gymean /= static_cast<T>(m);
        const T s = inv[static_cast<size_t>(ch)];
        for (size_t i = 0; i < m; ++i)
          gx[i] += s * (gc[i] - gmean - yc[i] * gymean);
      }
    };
  }
  return Tensor<T>(out);
}

// --- concat / slice -------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "concat_channels");
  require_defined(b, "concat_channels");
  if (a.ndim() != 3 || b.ndim() != 3)
    throw ConfigError("concat_channels: inputs must be [C,H,W]");
  const int ca = a.dim(0), h = a.dim(1), w = a.dim(2);
  const int cb = b.dim(0);
  if (b.dim(1) != h || b.dim(2) != w)
    throw ConfigError("concat_channels: spatial dims do not match");

  auto out = fresh_node<T>({ca + cb, h, w}, "concat_channels");
  const size_t asz = a.numel(), bsz = b.numel();
  std::memcpy(out->value.data(), a.data().data(), asz * sizeof(T));
  std::memcpy(out->value.data() + asz, b.data().data(), bsz * sizeof(T));

  if (taped<T>({&a, &b})) {
    out->tape = true;
    auto a_n = a.node();
    auto b_n = b.node();
    out->parents = {a_n, b_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (wants_grad(a_n))
        for (size_t i = 0; i < asz; ++i) a_n->grad[i] += self.grad[i];
      if (wants_grad(b_n))
        for (size_t i = 0; i < bsz; ++i) b_n->grad[i] += self.grad[asz + i];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c_begin, int c_end) {
  require_defined(x, "slice_channels");
  if (x.ndim() != 3) throw ConfigError("slice_channels: input must be [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (c_begin < 0 || c_end < c_begin || c_end > c)
    throw ConfigError("slice_channels: range out of bounds");
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t off = static_cast<size_t>(c_begin) * plane;
  const size_t len = static_cast<size_t>(c_end - c_begin) * plane;

  auto out = fresh_node<T>({c_end - c_begin, h, w}, "slice_channels");
  std::memcpy(out->value.data(), x.data().data() + off, len * sizeof(T));

  if (taped<T>({&x})) {
    out->tape = true;
    auto x_n = x.node();
    out->parents = {x_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (wants_grad(x_n))
        for (size_t i = 0; i < len; ++i) x_n->grad[off + i] += self.grad[i];
    };
  }
  return Tensor<T>(out);
}

// --- relu ----------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  require_defined(x, "relu");
  auto out = fresh_node<T>(x.shape(), "relu");
  kernels::relu_forward(x.data().data(), out->value.data(), x.numel());
  if (flops::enabled()) flops::add(static_cast<int64_t>(x.numel()));

  if (taped<T>({&x})) {
    out->tape = true;
    auto x_n = x.node();
    out->parents = {x_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (wants_grad(x_n))
        kernels::relu_backward(x_n->value.data(), self.grad.data(), x_n->grad.data(),
                               x_n->value.size());
    };
  }
  return Tensor<T>(out);
}

// --- losses ----------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelMap& labels, int ignore) {
  require_defined(logits, "softmax_cross_entropy");
  if (logits.ndim() != 3) throw ConfigError("softmax_cross_entropy: logits must be [C,H,W]");
  const int cls = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  if (cls < 1) throw ConfigError("softmax_cross_entropy: need at least one class");
  if (labels.h != h || labels.w != w)
    throw ConfigError("softmax_cross_entropy: label dims do not match logits");
  const size_t m = static_cast<size_t>(h) * w;
  for (size_t i = 0; i < m; ++i) {
    const int lab = labels.data[i];
    if (lab != ignore && lab >= cls)
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(lab) +
                        " out of range for " + std::to_string(cls) + " classes");
  }

  const bool keep_probs = taped<T>({&logits});
  std::vector<T> probs;
  if (keep_probs) probs.assign(static_cast<size_t>(cls) * m, T(0));

  const T* x = logits.data().data();
  double total = 0.0;
  int64_t nvalid = 0;
  for (size_t i = 0; i < m; ++i) {
    const int lab = labels.data[i];
    if (lab == ignore) continue;
    T mx = x[i];
    for (int c = 1; c < cls; ++c) mx = std::max(mx, x[c * m + i]);
    T sum = 0;
    for (int c = 0; c < cls; ++c) sum += std::exp(x[c * m + i] - mx);
    if (keep_probs) {
      const T inv = T(1) / sum;
      for (int c = 0; c < cls; ++c)
        probs[c * m + i] = std::exp(x[c * m + i] - mx) * inv;
    }
    total -= static_cast<double>(x[lab * m + i] - mx - std::log(sum));
    ++nvalid;
  }
  const T loss = nvalid > 0 ? static_cast<T>(total / static_cast<double>(nvalid)) : T(0);
  if (!std::isfinite(loss)) throw NumericError("non-finite value in softmax_cross_entropy");
  if (flops::enabled()) flops::add(6ll * cls * static_cast<int64_t>(m));

  auto out = fresh_node<T>({1}, "softmax_cross_entropy");
  out->value[0] = loss;
  if (keep_probs) {
    out->tape = true;
    auto x_n = logits.node();
    out->parents = {x_n};
    LabelMap labs = labels;
    out->backward_fn = [=, probs = std::move(probs), labs = std::move(labs)](TensorNode<T>& self) {
      if (!wants_grad(x_n) || nvalid == 0) return;
      const T g = self.grad[0] / static_cast<T>(nvalid);
      for (size_t i = 0; i < m; ++i) {
        const int lab = labs.data[i];
        if (lab == ignore) continue;
        for (int c = 0; c < cls; ++c) {
          T p = probs[c * m + i];
          if (c == lab) p -= T(1);
          x_n->grad[c * m + i] += g * p;
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mse_masked(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& mask) {
  require_defined(a, "mse_masked");
  require_defined(b, "mse_masked");
  require_defined(mask, "mse_masked");
  if (a.ndim() != 3 || b.ndim() != 3) throw ConfigError("mse_masked: inputs must be [C,H,W]");
  if (a.shape() != b.shape()) throw ConfigError("mse_masked: input shapes do not match");
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (mask.ndim() != 2 || mask.dim(0) != h || mask.dim(1) != w)
    throw ConfigError("mse_masked: mask must be [H,W] matching the inputs");
  const size_t m = static_cast<size_t>(h) * w;
  const T* mk = mask.data().data();
  int64_t count = 0;
  for (size_t i = 0; i < m; ++i) {
    if (mk[i] == T(0)) continue;
    if (mk[i] == T(1)) {
      ++count;
      continue;
    }
    throw ConfigError("mse_masked: mask entries must be exactly 0 or 1");
  }

  const T* av = a.data().data();
  const T* bv = b.data().data();
  double total = 0.0;
  if (count > 0) {
    for (int ch = 0; ch < c; ++ch) {
      const T* ac = av + ch * m;
      const T* bc = bv + ch * m;
      for (size_t i = 0; i < m; ++i) {
        if (mk[i] == T(0)) continue;
        const double d = static_cast<double>(ac[i]) - static_cast<double>(bc[i]);
        total += d * d;
      }
    }
  }
  const double denom = static_cast<double>(c) * static_cast<double>(std::max<int64_t>(count, 1));
  const T loss = static_cast<T>(total / denom);
  if (!std::isfinite(loss)) throw NumericError("non-finite value in mse_masked");
  if (flops::enabled()) flops::add(3ll * c * static_cast<int64_t>(m));

  auto out = fresh_node<T>({1}, "mse_masked");
  out->value[0] = loss;
  if (taped<T>({&a})) {
    out->tape = true;
    auto a_n = a.node();
    auto b_n = b.node();
    auto m_n = mask.node();
    out->parents = {a_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (!wants_grad(a_n) || count == 0) return;
      const T g = self.grad[0] * T(2) / static_cast<T>(denom);
      const T* mv = m_n->value.data();
      for (int ch = 0; ch < c; ++ch) {
        const size_t off = ch * m;
        for (size_t i = 0; i < m; ++i)
          if (mv[i] != T(0))
            a_n->grad[off + i] += g * (a_n->value[off + i] - b_n->value[off + i]);
      }
    };
  }
  return Tensor<T>(out);
}

// --- elementwise -------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (a.shape() != b.shape()) throw ConfigError("add: shapes do not match");
  auto out = fresh_node<T>(a.shape(), "add");
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out->value[i] = a.data()[i] + b.data()[i];
  check_finite(out->value, "add output");
  if (flops::enabled()) flops::add(static_cast<int64_t>(n));

  if (taped<T>({&a, &b})) {
    out->tape = true;
    auto a_n = a.node();
    auto b_n = b.node();
    out->parents = {a_n, b_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (wants_grad(a_n))
        for (size_t i = 0; i < n; ++i) a_n->grad[i] += self.grad[i];
      if (wants_grad(b_n))
        for (size_t i = 0; i < n; ++i) b_n->grad[i] += self.grad[i];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) throw ConfigError("mul: shapes do not match");
  auto out = fresh_node<T>(a.shape(), "mul");
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out->value[i] = a.data()[i] * b.data()[i];
  check_finite(out->value, "mul output");
  if (flops::enabled()) flops::add(static_cast<int64_t>(n));

  if (taped<T>({&a, &b})) {
    out->tape = true;
    auto a_n = a.node();
    auto b_n = b.node();
    out->parents = {a_n, b_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (wants_grad(a_n))
        for (size_t i = 0; i < n; ++i) a_n->grad[i] += self.grad[i] * b_n->value[i];
      if (wants_grad(b_n))
        for (size_t i = 0; i < n; ++i) b_n->grad[i] += self.grad[i] * a_n->value[i];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  require_defined(a, "scale");
  if (!std::isfinite(c)) throw NumericError("non-finite scale factor");
  auto out = fresh_node<T>(a.shape(), "scale");
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out->value[i] = a.data()[i] * c;
  check_finite(out->value, "scale output");
  if (flops::enabled()) flops::add(static_cast<int64_t>(n));

  if (taped<T>({&a})) {
    out->tape = true;
    auto a_n = a.node();
    out->parents = {a_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (wants_grad(a_n))
        for (size_t i = 0; i < n; ++i) a_n->grad[i] += self.grad[i] * c;
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum");
  auto out = fresh_node<T>({1}, "sum");
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  out->value[0] = static_cast<T>(acc);
  check_finite(out->value, "sum output");
  if (flops::enabled()) flops::add(static_cast<int64_t>(x.numel()));

  if (taped<T>({&x})) {
    out->tape = true;
    auto x_n = x.node();
    out->parents = {x_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (!wants_grad(x_n)) return;
      const T g = self.grad[0];
      for (T& gx : x_n->grad) gx += g;
    };
  }
  return Tensor<T>(out);
}

// --- reflect pad ---------------------------------------------------------------------

template <typename T>
Tensor<T> reflect_pad_br(const Tensor<T>& x, int out_h, int out_w) {
  require_defined(x, "reflect_pad_br");
  if (x.ndim() != 3) throw ConfigError("reflect_pad_br: input must be [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h < h || out_w < w) throw ConfigError("reflect_pad_br: output smaller than input");
  if (out_h > 2 * h - 1 || out_w > 2 * w - 1)
    throw ConfigError("reflect_pad_br: pad exceeds input size, cannot mirror");

  auto out = fresh_node<T>({c, out_h, out_w}, "reflect_pad_br");
  const T* src = x.data().data();
  T* dst = out->value.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < out_h; ++y) {
      const int sy = y < h ? y : 2 * h - 2 - y;
      const T* srow = src + (static_cast<size_t>(ch) * h + sy) * w;
      T* drow = dst + (static_cast<size_t>(ch) * out_h + y) * out_w;
      std::memcpy(drow, srow, static_cast<size_t>(w) * sizeof(T));
      for (int xc = w; xc < out_w; ++xc) drow[xc] = srow[2 * w - 2 - xc];
    }
  }

  if (taped<T>({&x})) {
    out->tape = true;
    auto x_n = x.node();
    out->parents = {x_n};
    out->backward_fn = [=](TensorNode<T>& self) {
      if (!wants_grad(x_n)) return;
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < out_h; ++y) {
          const int sy = y < h ? y : 2 * h - 2 - y;
          const T* grow = self.grad.data() + (static_cast<size_t>(ch) * out_h + y) * out_w;
          T* gx = x_n->grad.data() + (static_cast<size_t>(ch) * h + sy) * w;
          for (int xc = 0; xc < out_w; ++xc) {
            const int sx = xc < w ? xc : 2 * w - 2 - xc;
            gx[sx] += grow[xc];
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

// --- backward ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw ConfigError("backward: undefined tensor");
  if (loss.numel() != 1) throw ConfigError("backward: loss must be a scalar");
  auto root = loss.node();
  if (!root->tape)
    throw ConfigError("backward: tensor has no tape (no grad-requiring inputs)");

  // Depth-first topological order over taped nodes.
  std::vector<TensorNode<T>*> topo;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* p = node->parents[next++].get();
      if (p->tape && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are rebuilt each call; leaf grads persist so repeated
  // backward calls accumulate (and batch loops can sum gradients).
  for (auto* n : topo) {
    if (n->requires_grad) {
      if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
    } else {
      n->grad.assign(n->value.size(), T(0));
    }
  }
  root->grad[0] += T(1);

  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);

  for (auto* n : topo)
    if (n->requires_grad) check_finite(n->grad, "gradient");
}

// --- parameters / optimizer ------------------------------------------------------------

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Tensor<T> t) {
  if (!t.defined()) throw ConfigError("parameter '" + name + "' is undefined");
  if (!t.requires_grad()) throw ConfigError("parameter '" + name + "' must require grad");
  for (const auto& [n, _] : items_)
    if (n == name) throw ConfigError("duplicate parameter name '" + name + "'");
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

template <typename T>
Tensor<T>* ParamStore<T>::find(const std::string& name) {
  for (auto& [n, t] : items_)
    if (n == name) return &t;
  return nullptr;
}

template <typename T>
size_t ParamStore<T>::total_scalars() const {
  size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

template <typename T>
void SgdOptimizer<T>::step(ParamStore<T>& params, T lr, T momentum) {
  if (!std::isfinite(lr) || !std::isfinite(momentum))
    throw NumericError("non-finite optimizer hyperparameter");
  auto& items = params.items();
  if (velocity_.size() != items.size()) velocity_.resize(items.size());
  for (size_t pi = 0; pi < items.size(); ++pi) {
    Tensor<T>& p = items[pi].second;
    auto node = p.node();
    const size_t n = node->value.size();
    if (velocity_[pi].size() != n) velocity_[pi].assign(n, T(0));
    T* v = velocity_[pi].data();
    T* val = node->value.data();
    const bool has_g = !node->grad.empty();
    const T* g = has_g ? node->grad.data() : nullptr;
    for (size_t i = 0; i < n; ++i) {
      v[i] = momentum * v[i] + (has_g ? g[i] : T(0));
      val[i] -= lr * v[i];
      if (!std::isfinite(val[i]))
        throw NumericError("non-finite parameter after update: " + items[pi].first);
    }
    if (has_g) node->grad.assign(n, T(0));
  }
}

double poly_lr(int iter, int total, double base, double power) {
  if (total < 1) throw ConfigError("poly_lr: total iterations must be >= 1");
  if (iter < 0 || iter > total) throw ConfigError("poly_lr: iteration out of range");
  if (base < 0 || power < 0) throw ConfigError("poly_lr: base and power must be >= 0");
  return base * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total), power);
}

// --- explicit instantiations -------------------------------------------------------------

#define DCFM_TENSOR_INSTANTIATE(T)                                                         \
  template class Tensor<T>;                                                                \
  template class ParamStore<T>;                                                            \
  template class SgdOptimizer<T>;                                                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,  \
                               int);                                                       \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, int, int);                       \
  template Tensor<T> channel_norm<T>(const Tensor<T>&, T);                                 \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, int, int);                        \
  template Tensor<T> relu<T>(const Tensor<T>&);                                            \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, const LabelMap&, int);     \
  template Tensor<T> mse_masked<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                             \
  template Tensor<T> reflect_pad_br<T>(const Tensor<T>&, int, int);                        \
  template void backward<T>(const Tensor<T>&);

DCFM_TENSOR_INSTANTIATE(float)
DCFM_TENSOR_INSTANTIATE(double)

#undef DCFM_TENSOR_INSTANTIATE

}  // namespace dcfm
