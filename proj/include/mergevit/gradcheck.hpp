#pragma once

#include <functional>
#include <string>

#include "mergevit/tensor.hpp"

namespace mergevit {

// Central-difference gradient verification. `loss` must be a pure function of
// the current contents of `param` (typically a lambda closing over the model);
// `analytic` is the gradient under test. Returns the max over coordinates of
//   |analytic - numeric| / max(1, |analytic|, |numeric|).
// h defaults to 1e-3, intended for 64-bit mode.
template <typename T>
T check_gradient(const std::function<T()>& loss, Tensor<T>& param, const Tensor<T>& analytic,
                 T h = T(1e-3)) {
  if (param.shape != analytic.shape)
    throw ShapeError("check_gradient: param " + shape_str(param.shape) + " vs grad " +
                     shape_str(analytic.shape));
  T worst = 0;
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const T saved = param.data[i];
    param.data[i] = saved + h;
    const T fp = loss();
    param.data[i] = saved - h;
    const T fm = loss();
    param.data[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("check_gradient: loss non-finite at perturbed point");
    const T numeric = (fp - fm) / (2 * h);
    const T a = analytic.data[i];
    const T err = std::abs(a - numeric) / std::max(T(1), std::max(std::abs(a), std::abs(numeric)));
    worst = std::max(worst, err);
  }
  return worst;
}

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

}  // namespace mergevit
