#include "slimunet/distill.hpp"

#include "slimunet/error.hpp"
#include "slimunet/ops.hpp"

namespace slimunet {

template <class T>
Var<T> task_loss(const Tensor<T>& eps, const Var<T>& eps_student) {
  return ops::mse(Var<T>(eps), eps_student);
}

template <class T>
Var<T> out_kd_loss(const Var<T>& eps_teacher, const Var<T>& eps_student) {
  return ops::mse(eps_teacher, eps_student);
}

template <class T>
std::string FeatureLoss<T>::report() const {
  return std::to_string(shared()) + " shared taps, " + std::to_string(teacher_only.size()) + " teacher-only, " +
         std::to_string(student_only.size()) + " student-only";
}

template <class T>
FeatureLoss<T> feat_kd_loss(const FeatureTapRegistry<T>& teacher_taps, const FeatureTapRegistry<T>& student_taps) {
  FeatureLoss<T> out;
  std::vector<Var<T>> terms;
  for (const auto& [key, tv] : teacher_taps) {
    auto it = student_taps.find(key);
    if (it == student_taps.end()) {
      out.teacher_only.push_back(key);
      continue;
    }
    if (tv.shape() != it->second.shape()) {
      throw DimensionError("feature tap '" + key + "': teacher " + shape_str(tv.shape()) + " vs student " +
                           shape_str(it->second.shape()));
    }
    Var<T> term = ops::mse(tv, it->second);
    out.per_tap[key] = static_cast<double>(term.item());
    terms.push_back(std::move(term));
  }
  for (const auto& [key, _] : student_taps) {
    if (!teacher_taps.count(key)) out.student_only.push_back(key);
  }
  if (terms.empty()) {
    out.total = Var<T>(Tensor<T>(Shape{1}));
  } else {
    out.total = ops::weighted_sum(terms, std::vector<T>(terms.size(), T(1)));
  }
  return out;
}

template <class T>
DistillObjective<T> total_loss(const Tensor<T>& eps, const Var<T>& eps_teacher, const Var<T>& eps_student,
                               const FeatureTapRegistry<T>& teacher_taps, const FeatureTapRegistry<T>& student_taps,
                               const DistillLossWeights& w) {
  if (w.lambda_out_kd < 0.0 || w.lambda_feat_kd < 0.0) throw RangeError("loss weights must be >= 0");
  DistillObjective<T> obj;
  Var<T> task = task_loss(eps, eps_student);
  Var<T> out = out_kd_loss(eps_teacher, eps_student);
  obj.features = feat_kd_loss(teacher_taps, student_taps);

  auto& b = obj.breakdown;
  b.task = static_cast<double>(task.item());
  b.out_kd = static_cast<double>(out.item());
  b.feat_kd = 0.0;
  for (const auto& [_, v] : obj.features.per_tap) b.feat_kd += v;
  b.per_tap = obj.features.per_tap;
  b.total = b.task + w.lambda_out_kd * b.out_kd + w.lambda_feat_kd * b.feat_kd;

  std::vector<Var<T>> terms{task};
  std::vector<T> weights{T(1)};
  if (w.lambda_out_kd != 0.0) {
    terms.push_back(out);
    weights.push_back(static_cast<T>(w.lambda_out_kd));
  }
  if (w.lambda_feat_kd != 0.0 && obj.features.shared() > 0) {
    terms.push_back(obj.features.total);
    weights.push_back(static_cast<T>(w.lambda_feat_kd));
  }
  obj.total = ops::weighted_sum(terms, weights);
  return obj;
}

#define SLIMUNET_INSTANTIATE_DISTILL(T)                                                                            \
  template Var<T> task_loss(const Tensor<T>&, const Var<T>&);                                                      \
  template Var<T> out_kd_loss(const Var<T>&, const Var<T>&);                                                       \
  template struct FeatureLoss<T>;                                                                                  \
  template FeatureLoss<T> feat_kd_loss(const FeatureTapRegistry<T>&, const FeatureTapRegistry<T>&);                \
  template DistillObjective<T> total_loss(const Tensor<T>&, const Var<T>&, const Var<T>&,                          \
                                          const FeatureTapRegistry<T>&, const FeatureTapRegistry<T>&,              \
                                          const DistillLossWeights&);

SLIMUNET_INSTANTIATE_DISTILL(float)
SLIMUNET_INSTANTIATE_DISTILL(double)

}  // namespace slimunet
