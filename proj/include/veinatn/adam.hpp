// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "veinatn/tensor.hpp"

namespace veinatn {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Moment buffers mirror the parameter shapes.
template <typename T>
class AdamState {
 public:
  AdamState(const std::vector<Shape>& shapes, AdamHyper hyper);

  // Applies one update in place. Parameters with trainable[i] == false keep
  // their value and moments (an empty mask trains everything).
  void step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads,
            const std::vector<bool>& trainable = {});

  std::int64_t steps() const noexcept { return t_; }
  const AdamHyper& hyper() const noexcept { return hyper_; }
  const std::vector<std::vector<double>>& first_moment() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moment() const noexcept { return v_; }

 private:
  AdamHyper hyper_;
  std::vector<Shape> shapes_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

extern template class AdamState<float>;
extern template class AdamState<double>;

}  // namespace veinatn
