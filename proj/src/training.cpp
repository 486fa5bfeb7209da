#include "dcfm/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace dcfm {

void TrainConfig::validate() const {
  if (lambda_b < 0 || lambda_c < 0) throw ConfigError("loss weights must be >= 0");
  if (base_lr <= 0) throw ConfigError("base_lr must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  if (poly_power <= 0) throw ConfigError("poly_power must be positive");
  if (iters < 1) throw ConfigError("iters must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (!use_li && !use_lb && !use_lc)
    throw ConfigError("all loss terms disabled; nothing to train");
}

PairSample sample_training_pair(const Dataset& ds, Rng& rng) {
  // Candidate pool: every labeled frame living in a clip with a neighbor.
  std::vector<PairSample> pool;
  int skipped = 0;
  for (size_t ci = 0; ci < ds.clips.size(); ++ci) {
    const VideoClip& clip = ds.clips[ci];
    for (const auto& [idx, lm] : clip.labels) {
      (void)lm;
      if (clip.frames.size() < 2) {
        ++skipped;
        continue;
      }
      pool.push_back({static_cast<int>(ci), idx, -1});
    }
  }
  if (skipped > 0) {
    static bool warned = false;
    if (!warned) {
      warned = true;
      std::cerr << "warning: " << skipped
                << " labeled frame(s) live in single-frame clips and cannot be paired\n";
    }
  }
  if (pool.empty()) throw ConfigError("no labeled frame with a neighboring frame to pair with");

  PairSample s = pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
  const int n = static_cast<int>(ds.clips[static_cast<size_t>(s.clip)].frames.size());
  if (s.l == 0)
    s.u = 1;
  else if (s.l == n - 1)
    s.u = n - 2;
  else
    s.u = rng.coin() ? s.l + 1 : s.l - 1;
  return s;
}

template <typename T>
Tensor<T> compute_mask(const Tensor<T>& coarse_u, const Tensor<T>& coarse_l) {
  if (!coarse_u.defined() || !coarse_l.defined() || coarse_u.ndim() != 3 || coarse_l.ndim() != 3)
    throw ConfigError("compute_mask: want [C,H,W] logits");
  if (coarse_u.shape() != coarse_l.shape())
    throw ConfigError("compute_mask: logit shapes do not match");
  const int c = coarse_u.dim(0), h = coarse_u.dim(1), w = coarse_u.dim(2);
  const size_t m = static_cast<size_t>(h) * w;
  const T* u = coarse_u.data().data();
  const T* l = coarse_l.data().data();

  auto argmax_at = [&](const T* v, size_t p) {
    int best = 0;
    T best_v = v[p];
    for (int ch = 1; ch < c; ++ch) {
      const T x = v[ch * m + p];
      if (x > best_v) {  // strict: ties resolve to the lowest class index
        best_v = x;
        best = ch;
      }
    }
    return best;
  };

  std::vector<T> mask(m);
  for (size_t p = 0; p < m; ++p)
    mask[p] = argmax_at(u, p) == argmax_at(l, p) ? T(1) : T(0);
  return Tensor<T>::from_data({h, w}, std::move(mask));
}

template <typename T>
JointLoss<T> compute_joint_loss(const DcfmModel<T>& model, const Tensor<T>& x_l,
                                const LabelMap& y_l, const Tensor<T>& x_u,
                                const TrainConfig& cfg) {
  const bool need_u = cfg.use_lb || cfg.use_lc;

  KeyframeOutput<T> out_l = model.keyframe_forward(x_l);
  KeyframeOutput<T> out_u;
  if (need_u) out_u = model.keyframe_forward(x_u);

  JointLoss<T> jl;
  Tensor<T> total;
  auto accumulate_term = [&](const Tensor<T>& term, double weight) {
    Tensor<T> scaled = weight == 1.0 ? term : scale(term, static_cast<T>(weight));
    total = total.defined() ? add(total, scaled) : scaled;
  };

  if (cfg.use_li) {
    Tensor<T> l_i = softmax_cross_entropy(out_l.full_logits, y_l);
    jl.parts.l_i = l_i.item();
    accumulate_term(l_i, 1.0);
  }
  if (cfg.use_lb) {
    // Segment the labeled frame from the neighbor's deep feature: same loss,
    // but the common feature crossed over from the other frame.
    Tensor<T> fused_bl = model.fuse(out_u.features.common, out_l.features.indep);
    auto [coarse_bl, full_bl] = model.decode(fused_bl);
    (void)coarse_bl;
    Tensor<T> l_b = softmax_cross_entropy(full_bl, y_l);
    jl.parts.l_b = l_b.item();
    accumulate_term(l_b, cfg.lambda_b);
  }
  if (cfg.use_lc) {
    // Pull the neighbor's fused feature toward the labeled frame's, but only
    // where both frames already agree on the class.
    Tensor<T> mask = compute_mask(out_u.coarse_logits, out_l.coarse_logits);
    const auto mv = mask.data();
    double on = 0;
    for (const T v : mv) on += static_cast<double>(v);
    jl.parts.mask_fraction = on / static_cast<double>(mask.numel());

    Tensor<T> l_c = mse_masked(out_u.fused, out_l.fused.detach(), mask);
    jl.parts.l_c = l_c.item();
    accumulate_term(l_c, cfg.lambda_c);
  }

  jl.total = total;
  jl.parts.total = total.item();
  return jl;
}

template <typename T>
LossBreakdown train_step(DcfmModel<T>& model, const std::vector<TrainPair<T>>& batch,
                         const TrainConfig& cfg, int iter, SgdOptimizer<T>& opt) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  const T inv_b = T(1) / static_cast<T>(batch.size());
  const double lr = poly_lr(iter, cfg.iters, cfg.base_lr, cfg.poly_power);

  LossBreakdown mean;
  try {
    Tensor<T> total;
    for (const TrainPair<T>& p : batch) {
      JointLoss<T> jl = compute_joint_loss(model, p.x_l, p.y_l, p.x_u, cfg);
      mean.l_i += jl.parts.l_i;
      mean.l_b += jl.parts.l_b;
      mean.l_c += jl.parts.l_c;
      mean.total += jl.parts.total;
      mean.mask_fraction += jl.parts.mask_fraction;
      Tensor<T> scaled = scale(jl.total, inv_b);
      total = total.defined() ? add(total, scaled) : scaled;
    }
    backward(total);
    opt.step(model.params(), static_cast<T>(lr), static_cast<T>(cfg.momentum));
  } catch (const NumericError& e) {
    std::ostringstream msg;
    msg << e.what() << " (iter " << iter << ", lr " << lr << ", running loss "
        << mean.total << ")";
    throw NumericError(msg.str());
  }

  const double ib = 1.0 / static_cast<double>(batch.size());
  mean.l_i *= ib;
  mean.l_b *= ib;
  mean.l_c *= ib;
  mean.total *= ib;
  mean.mask_fraction *= ib;
  return mean;
}

template <typename T>
Tensor<T> hflip(const Tensor<T>& frame) {
  if (!frame.defined() || frame.ndim() != 3) throw ConfigError("hflip: want [C,H,W]");
  const int c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
  std::vector<T> out(frame.numel());
  const T* in = frame.data().data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y) {
      const size_t row = (static_cast<size_t>(ch) * h + y) * w;
      for (int x = 0; x < w; ++x) out[row + x] = in[row + (w - 1 - x)];
    }
  return Tensor<T>::from_data(frame.shape(), std::move(out));
}

LabelMap hflip(const LabelMap& lm) {
  LabelMap out = lm;
  for (int y = 0; y < lm.h; ++y)
    for (int x = 0; x < lm.w; ++x) out.data[static_cast<size_t>(y) * lm.w + x] =
        lm.data[static_cast<size_t>(y) * lm.w + (lm.w - 1 - x)];
  return out;
}

LossBreakdown train(DcfmModel<float>& model, const Dataset& ds, const TrainConfig& cfg,
                    std::ostream* log) {
  cfg.validate();
  Rng rng(Rng::derive(static_cast<uint64_t>(cfg.seed), 0x7261696e));  // sampling stream
  SgdOptimizer<float> opt;

  LossBreakdown last;
  for (int iter = 0; iter < cfg.iters; ++iter) {
    std::vector<TrainPair<float>> batch;
    batch.reserve(static_cast<size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
      const PairSample s = sample_training_pair(ds, rng);
      const VideoClip& clip = ds.clips[static_cast<size_t>(s.clip)];
      TrainPair<float> p{clip.frames[static_cast<size_t>(s.l)], clip.labels.at(s.l),
                         clip.frames[static_cast<size_t>(s.u)]};
      if (rng.coin()) {
        p.x_l = hflip(p.x_l);
        p.y_l = hflip(p.y_l);
        p.x_u = hflip(p.x_u);
      }
      batch.push_back(std::move(p));
    }
    last = train_step(model, batch, cfg, iter, opt);

    if (log && ((iter + 1) % cfg.log_every == 0 || iter + 1 == cfg.iters)) {
      nlohmann::json line = {
          {"iter", iter},
          {"lr", poly_lr(iter, cfg.iters, cfg.base_lr, cfg.poly_power)},
          {"l_i", last.l_i},
          {"l_b", last.l_b},
          {"l_c", last.l_c},
          {"total", last.total},
          {"mask_fraction", last.mask_fraction},
      };
      *log << line.dump() << "\n";
    }
  }
  return last;
}

GradCheckReport gradcheck_joint_loss(int seed, int height, int width, int classes,
                                     int samples_per_tensor, double tol) {
  if (height % 16 != 0 || width % 16 != 0)
    throw ConfigError("gradcheck: frame dims must be divisible by 16");
  if (samples_per_tensor < 1) throw ConfigError("gradcheck: samples_per_tensor must be >= 1");
  if (tol <= 0) throw ConfigError("gradcheck: tol must be positive");

  ModelConfig mc;
  mc.num_classes = classes;
  mc.seed = seed;
  mc.validate();
  DcfmModel<double> model(mc);

  Rng rng(Rng::derive(static_cast<uint64_t>(seed), 0x67636b));
  auto random_frame = [&] {
    std::vector<double> px(static_cast<size_t>(3) * height * width);
    for (double& v : px) v = rng.uniform(0.0, 255.0);
    return Tensor<double>::from_data({3, height, width}, std::move(px));
  };
  Tensor<double> x_l = random_frame();
  Tensor<double> x_u = random_frame();
  LabelMap y_l(height, width);
  for (auto& v : y_l.data)
    v = rng.uniform() < 0.1 ? kIgnoreLabel
                            : static_cast<uint8_t>(rng.uniform_int(0, classes - 1));

  TrainConfig tc;  // all three loss terms on, default weights

  // The consistency term compares against a stop-gradient target under an
  // argmax agreement mask; the tape treats both as constants. The difference
  // quotient has to probe that same function, so freeze target and mask at
  // the base point. Re-deriving them from perturbed parameters would measure
  // the target's own sensitivity (and any mask flip) as spurious gradient.
  Tensor<double> target0, mask0;
  {
    autograd::NoGradGuard ng;
    KeyframeOutput<double> out_l = model.keyframe_forward(x_l);
    KeyframeOutput<double> out_u = model.keyframe_forward(x_u);
    target0 = out_l.fused;
    mask0 = compute_mask(out_u.coarse_logits, out_l.coarse_logits);
  }

  auto frozen_loss = [&] {
    KeyframeOutput<double> out_l = model.keyframe_forward(x_l);
    KeyframeOutput<double> out_u = model.keyframe_forward(x_u);
    Tensor<double> l_i = softmax_cross_entropy(out_l.full_logits, y_l);
    Tensor<double> fused_bl = model.fuse(out_u.features.common, out_l.features.indep);
    Tensor<double> l_b = softmax_cross_entropy(model.decode(fused_bl).second, y_l);
    Tensor<double> l_c = mse_masked(out_u.fused, target0, mask0);
    return add(l_i, add(scale(l_b, tc.lambda_b), scale(l_c, tc.lambda_c)));
  };

  auto loss_value = [&] {
    autograd::NoGradGuard ng;  // value only, no tape
    return frozen_loss().item();
  };

  // Analytic gradients once, of the same frozen function the probes evaluate.
  model.params().zero_grad();
  backward(frozen_loss());
  const double l0 = loss_value();

  GradCheckReport rep;
  for (auto& [name, t] : model.params().items()) {
    const auto g = t.grad();
    auto vals = t.data();
    const size_t n = vals.size();
    // Deterministic stratified picks: spread over the tensor, no RNG.
    for (int s = 0; s < samples_per_tensor; ++s) {
      const size_t i = (n * static_cast<size_t>(s) + n / 2) / static_cast<size_t>(samples_per_tensor) % n;
      const double v0 = vals[i];
      const double h = 1e-5 * std::max(std::abs(v0), 0.1);
      vals[i] = v0 + h;
      const double up = loss_value();
      vals[i] = v0 - h;
      const double dn = loss_value();
      vals[i] = v0;
      const double fd = (up - dn) / (2 * h);
      const double an = g[i];
      // The difference quotient cannot resolve slopes below the rounding of
      // the loss itself (~eps*|L|/2h); some parameters sit in exactly flat
      // directions (e.g. a bias absorbed by the following normalization), so
      // the comparison floors at the level where noise could fake a failure.
      const double noise = std::numeric_limits<double>::epsilon() * std::abs(l0) / (2 * h);
      const double floor = std::max(1e-8, 8 * noise / tol);
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

#define DCFM_TRAINING_INSTANTIATE(T)                                                     \
  template Tensor<T> compute_mask<T>(const Tensor<T>&, const Tensor<T>&);                \
  template JointLoss<T> compute_joint_loss<T>(const DcfmModel<T>&, const Tensor<T>&,     \
                                              const LabelMap&, const Tensor<T>&,         \
                                              const TrainConfig&);                       \
  template LossBreakdown train_step<T>(DcfmModel<T>&, const std::vector<TrainPair<T>>&,  \
                                       const TrainConfig&, int, SgdOptimizer<T>&);       \
  template Tensor<T> hflip<T>(const Tensor<T>&);

DCFM_TRAINING_INSTANTIATE(float)
DCFM_TRAINING_INSTANTIATE(double)

#undef DCFM_TRAINING_INSTANTIATE

}  // namespace dcfm
