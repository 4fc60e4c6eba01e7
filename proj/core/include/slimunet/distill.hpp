#pragma once

#include <map>
#include <string>
#include <vector>

#include "slimunet/backbone.hpp"

namespace slimunet {

struct DistillLossWeights {
  double lambda_out_kd = 1.0;
  double lambda_feat_kd = 1.0;
};

struct LossBreakdown {
  double task = 0.0;
  double out_kd = 0.0;
  double feat_kd = 0.0;
  double total = 0.0;
  std::map<TapKey, double> per_tap;
};

/// Mean squared error between the sampled noise and the student's prediction.
template <class T>
Var<T> task_loss(const Tensor<T>& eps, const Var<T>& eps_student);

/// Mean squared error against the teacher's prediction. Symmetric.
template <class T>
Var<T> out_kd_loss(const Var<T>& eps_teacher, const Var<T>& eps_student);

template <class T>
struct FeatureLoss {
  Var<T> total;  // sum of per-tap means over shared keys
  std::map<TapKey, double> per_tap;
  std::vector<TapKey> teacher_only;
  std::vector<TapKey> student_only;

  std::size_t shared() const { return per_tap.size(); }
  /// e.g. "12 shared taps, 3 teacher-only, 0 student-only".
  std::string report() const;
};

/// Feature-level loss over keys present in both registries. A shape
/// mismatch at a shared key throws DimensionError naming the key.
template <class T>
FeatureLoss<T> feat_kd_loss(const FeatureTapRegistry<T>& teacher_taps, const FeatureTapRegistry<T>& student_taps);

template <class T>
struct DistillObjective {
  Var<T> total;  // differentiable w.r.t. student parameters
  LossBreakdown breakdown;
  FeatureLoss<T> features;
};

/// task + lambda_out out_kd + lambda_feat feat_kd. Terms with zero weight
/// are still reported but contribute no gradient.
template <class T>
DistillObjective<T> total_loss(const Tensor<T>& eps, const Var<T>& eps_teacher, const Var<T>& eps_student,
                               const FeatureTapRegistry<T>& teacher_taps, const FeatureTapRegistry<T>& student_taps,
                               const DistillLossWeights& weights);

}  // namespace slimunet
