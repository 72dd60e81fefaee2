#pragma once

// Training losses: cross-entropy, focal, and class-weighted focal with
// ENet-style 1/ln(c + p) re-weighting. All are composed from autograd
// primitives so their gradients come from the same machinery as the models.

#include <cmath>
#include <string>
#include <vector>

#include "dseg/ops.hpp"

namespace dseg {

enum class LossKind { ce, nwf, wf };

inline std::string loss_token(LossKind k) {
  switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::nwf: return "nwf";
    case LossKind::wf: return "wf";
  }
  throw ConfigError("unknown loss kind");
}

inline LossKind loss_from_token(const std::string& s) {
  for (LossKind k : {LossKind::ce, LossKind::nwf, LossKind::wf})
    if (s == loss_token(k)) return k;
  throw ConfigError("unknown loss token: " + s + " (expected ce|nwf|wf)");
}

// Mean over all pixels of -log p(true class).
template <class T>
VarT<T> cross_entropy(GraphT<T>& g, VarT<T> logits, const ClassMask& target) {
  VarT<T> lp = gather_classes(g, log_softmax_channels(g, logits), target);
  return affine(g, mean_all(g, lp), T(-1), T(0));
}

// Mean over all pixels of -(1 - p_t)^gamma * log p_t.
template <class T>
VarT<T> focal_loss(GraphT<T>& g, VarT<T> logits, const ClassMask& target, T gamma) {
  check_config(gamma >= T(0), "focal gamma must be non-negative");
  VarT<T> lp = gather_classes(g, log_softmax_channels(g, logits), target);
  VarT<T> p = exp_elem(g, lp);
  VarT<T> factor = pow_const(g, affine(g, p, T(-1), T(1)), gamma);
  return affine(g, mean_all(g, mul(g, factor, lp)), T(-1), T(0));
}

// w_i = 1 / ln(c + freq_i); rarer classes get larger weights.
inline std::vector<double> class_weights_enet(const std::vector<double>& freq,
                                              double c) {
  check_config(c > 1.0, "re-weighting constant must exceed 1");
  double sum = 0;
  for (double f : freq) {
    check_config(f >= 0.0, "class frequencies must be non-negative");
    sum += f;
  }
  check_config(std::abs(sum - 1.0) <= 1e-6, "class frequencies must sum to 1");
  std::vector<double> w(freq.size());
  for (size_t i = 0; i < freq.size(); ++i) w[i] = 1.0 / std::log(c + freq[i]);
  return w;
}

// Focal term weighted per pixel by the true class's weight, normalized by
// the sum of applied weights (a weighted mean, so uniform weights reduce
// exactly to the plain focal loss).
template <class T>
VarT<T> weighted_focal(GraphT<T>& g, VarT<T> logits, const ClassMask& target,
                       T gamma, const std::vector<double>& weights) {
  check_config(gamma >= T(0), "focal gamma must be non-negative");
  const TensorT<T>& lv = g.val(logits);
  check_dim(lv.rank() == 4, "weighted_focal expects [B,C,H,W] logits");
  check_config(int(weights.size()) == lv.dim(1),
               "one class weight required per logit channel");
  VarT<T> lp = gather_classes(g, log_softmax_channels(g, logits), target);
  VarT<T> p = exp_elem(g, lp);
  VarT<T> factor = pow_const(g, affine(g, p, T(-1), T(1)), gamma);
  VarT<T> term = mul(g, factor, lp);

  double wsum = 0;
  std::vector<T> coeff(target.v.size());
  for (size_t i = 0; i < target.v.size(); ++i) wsum += weights[target.v[i]];
  for (size_t i = 0; i < target.v.size(); ++i)
    coeff[i] = T(weights[target.v[i]] / wsum);
  return affine(g, dot_const(g, term, std::move(coeff)), T(-1), T(0));
}

// Dispatch used by the trainer; `weights` is only consulted for LossKind::wf.
template <class T>
VarT<T> segmentation_loss(GraphT<T>& g, VarT<T> logits, const ClassMask& target,
                          LossKind kind, T gamma,
                          const std::vector<double>& weights) {
  switch (kind) {
    case LossKind::ce: return cross_entropy(g, logits, target);
    case LossKind::nwf: return focal_loss(g, logits, target, gamma);
    case LossKind::wf: return weighted_focal(g, logits, target, gamma, weights);
  }
  throw ConfigError("unknown loss kind");
}

}  // namespace dseg
