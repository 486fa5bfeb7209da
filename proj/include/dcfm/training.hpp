#pragma once

#include <iosfwd>
#include <optional>
#include <vector>

#include "dcfm/dataio.hpp"
#include "dcfm/model.hpp"
#include "dcfm/tensor.hpp"

namespace dcfm {

struct TrainConfig {
  double lambda_b = 0.4;   // weight of the cross-frame segmentation loss
  double lambda_c = 10.0;  // weight of the masked feature-consistency loss
  double base_lr = 0.02;
  double momentum = 0.9;
  double poly_power = 0.9;
  int iters = 2000;
  int batch = 4;
  int seed = 0;
  bool use_li = true;
  bool use_lb = true;
  bool use_lc = true;
  int log_every = 1;

  void validate() const;
};

struct LossBreakdown {
  double l_i = 0;
  double l_b = 0;
  double l_c = 0;
  double total = 0;
  double mask_fraction = 0;
};

template <typename T>
struct JointLoss {
  Tensor<T> total;  // scalar carrying the tape
  LossBreakdown parts;
};

struct PairSample {
  int clip = -1;
  int l = -1;  // labeled frame
  int u = -1;  // unlabeled neighbor (l-1 or l+1)
};

// Uniform draw over labeled frames, then a uniform in-range neighbor; labeled
// frames without neighbors are skipped with a warning to stderr.
PairSample sample_training_pair(const Dataset& ds, Rng& rng);

// 1 where the per-pixel argmax classes of the two logits agree (ties resolved
// to the lowest class index). Constant: carries no tape.
template <typename T>
Tensor<T> compute_mask(const Tensor<T>& coarse_u, const Tensor<T>& coarse_l);

template <typename T>
struct TrainPair {
  Tensor<T> x_l;
  LabelMap y_l;
  Tensor<T> x_u;
};

template <typename T>
JointLoss<T> compute_joint_loss(const DcfmModel<T>& model, const Tensor<T>& x_l,
                                const LabelMap& y_l, const Tensor<T>& x_u,
                                const TrainConfig& cfg);

template <typename T>
LossBreakdown train_step(DcfmModel<T>& model, const std::vector<TrainPair<T>>& batch,
                         const TrainConfig& cfg, int iter, SgdOptimizer<T>& opt);

// Full loop: seeded sampling + horizontal-flip augmentation, JSONL log lines
// written to `log` (if non-null) every cfg.log_every iterations.
LossBreakdown train(DcfmModel<float>& model, const Dataset& ds, const TrainConfig& cfg,
                    std::ostream* log);

template <typename T>
Tensor<T> hflip(const Tensor<T>& frame);
LabelMap hflip(const LabelMap& lm);

// Finite-difference check of the joint-loss gradients on a random
// double-precision model; exercised by the gradcheck CLI command.
struct GradCheckReport {
  int checked = 0;
  double max_rel_err = 0;
  std::string worst_param;
  bool pass = false;
};

GradCheckReport gradcheck_joint_loss(int seed, int height, int width, int classes,
                                     int samples_per_tensor, double tol);

}  // namespace dcfm
