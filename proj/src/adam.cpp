// SPDX-License-Identifier: Apache-2.0

#include "veinatn/adam.hpp"

#include <cmath>
#include <string>

namespace veinatn {

template <typename T>
AdamState<T>::AdamState(const std::vector<Shape>& shapes, AdamHyper hyper) : hyper_(hyper), shapes_(shapes) {
  if (!(hyper.lr > 0) || !(hyper.beta1 >= 0 && hyper.beta1 < 1) || !(hyper.beta2 >= 0 && hyper.beta2 < 1) ||
      !(hyper.epsilon > 0)) {
    throw ConfigError("adam: invalid hyperparameters");
  }
  for (const Shape& s : shapes_) {
    m_.emplace_back(shape_numel(s), 0.0);
    v_.emplace_back(shape_numel(s), 0.0);
  }
}

template <typename T>
void AdamState<T>::step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads,
                        const std::vector<bool>& trainable) {
  if (params.size() != shapes_.size() || grads.size() != shapes_.size()) {
    throw ShapeError("adam: expected " + std::to_string(shapes_.size()) + " parameters");
  }
  if (!trainable.empty() && trainable.size() != shapes_.size()) throw ShapeError("adam: trainable mask size");
  for (std::size_t i = 0; i < shapes_.size(); ++i) {
    if (params[i].shape() != shapes_[i] || grads[i].shape() != shapes_[i]) {
      throw ShapeError("adam: parameter " + std::to_string(i) + " shape " + shape_to_string(params[i].shape()) +
                       " does not match state " + shape_to_string(shapes_[i]));
    }
  }
  ++t_;
  const double b1 = hyper_.beta1, b2 = hyper_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < shapes_.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    auto p = params[i].data();
    const auto g = grads[i].data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      p[j] = static_cast<T>(p[j] - hyper_.lr * mhat / (std::sqrt(vhat) + hyper_.epsilon));
    }
  }
}

template class AdamState<float>;
template class AdamState<double>;

}  // namespace veinatn
