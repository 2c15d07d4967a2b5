// SPDX-License-Identifier: Apache-2.0
// Finite-difference cases for every differentiable operator and for the
// composed network. Each loss is sum(out * R) with a random constant R so
// that no gradient vanishes by symmetry.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "support.hpp"
#include "veinatn/model.hpp"
#include "veinatn/ops.hpp"

namespace veinatn::testing {

struct GradCase {
  std::string name;
  ScalarGraph graph;
  std::vector<Tensor<double>> inputs;
};

inline Var<double> weighted_sum(Tape<double>& tape, Var<double> out, std::uint64_t seed) {
  return sum(mul(out, tape.constant(random_tensor(out.shape(), seed, 0.5, 1.5))));
}

// Values spread apart so that central differences never cross a ReLU kink
// or change a max-pool winner.
inline Tensor<double> spread_tensor(Shape shape, std::uint64_t seed) {
  Tensor<double> t(std::move(shape));
  std::vector<std::size_t> idx(t.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  const double n = static_cast<double>(t.size());
  for (std::size_t i = 0; i < idx.size(); ++i) t[idx[i]] = -1.0 + 2.0 * (static_cast<double>(i) + 0.5) / n;
  return t;
}

inline std::vector<GradCase> op_grad_cases(std::uint64_t seed) {
  auto s = [&](std::uint64_t k) { return derive_seed(seed, {k}); };
  const std::uint64_t w = s(99);
  std::vector<GradCase> cases;

  cases.push_back({"add",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) { return weighted_sum(t, add(v[0], v[1]), w); },
                   {random_tensor({2, 3}, s(1)), random_tensor({2, 3}, s(2))}});
  cases.push_back({"mul",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) { return weighted_sum(t, mul(v[0], v[1]), w); },
                   {random_tensor({2, 3}, s(1)), random_tensor({2, 3}, s(2))}});
  cases.push_back({"scale",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, scale(v[0], -2.5), w);
                   },
                   {random_tensor({4}, s(1))}});
  cases.push_back({"conv2d",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, conv2d(v[0], v[1], v[2], 1, 1), w);
                   },
                   {random_tensor({1, 2, 5, 5}, s(1)), random_tensor({3, 2, 3, 3}, s(2)), random_tensor({3}, s(3))}});
  cases.push_back({"conv2d_stride2",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, conv2d(v[0], v[1], v[2], 2, 0), w);
                   },
                   {random_tensor({2, 2, 5, 5}, s(1)), random_tensor({2, 2, 3, 3}, s(2)), random_tensor({2}, s(3))}});
  cases.push_back({"group_norm",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, group_norm(v[0], 2, v[1], v[2], 1e-5), w);
                   },
                   {random_tensor({2, 4, 3, 3}, s(1)), random_tensor({4}, s(2), 0.5, 1.5), random_tensor({4}, s(3))}});
  cases.push_back({"relu",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) { return weighted_sum(t, relu(v[0]), w); },
                   {spread_tensor({3, 4}, s(1))}});
  cases.push_back({"max_pool2d",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, max_pool2d(v[0], 2, 2), w);
                   },
                   {spread_tensor({1, 2, 4, 5}, s(1))}});
  cases.push_back({"adaptive_avg_pool",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, adaptive_avg_pool(v[0], 3, 2), w);
                   },
                   {random_tensor({1, 2, 7, 5}, s(1))}});
  cases.push_back({"to_tokens",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) { return weighted_sum(t, to_tokens(v[0]), w); },
                   {random_tensor({1, 3, 2, 2}, s(1))}});
  cases.push_back({"gather_rows",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, gather_rows(v[0], {2, 0, 3, 1}), w);
                   },
                   {random_tensor({4, 3}, s(1))}});
  cases.push_back({"linear",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, linear(v[0], v[1], v[2]), w);
                   },
                   {random_tensor({3, 4}, s(1)), random_tensor({4, 5}, s(2)), random_tensor({5}, s(3))}});
  cases.push_back({"layer_norm",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, layer_norm(v[0], v[1], v[2], 1e-5), w);
                   },
                   {random_tensor({3, 6}, s(1)), random_tensor({6}, s(2), 0.5, 1.5), random_tensor({6}, s(3))}});
  cases.push_back({"softmax",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) { return weighted_sum(t, softmax(v[0]), w); },
                   {random_tensor({3, 5}, s(1), -2.0, 2.0)}});
  cases.push_back({"scaled_dot_attention",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, scaled_dot_attention(v[0], v[1], v[2]), w);
                   },
                   {random_tensor({3, 4}, s(1)), random_tensor({3, 4}, s(2)), random_tensor({3, 2}, s(3))}});
  cases.push_back({"slice_cols",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, slice_cols(v[0], 1, 3), w);
                   },
                   {random_tensor({2, 4}, s(1))}});
  cases.push_back({"concat_cols",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) {
                     return weighted_sum(t, concat_cols<double>({v[0], v[1]}), w);
                   },
                   {random_tensor({2, 3}, s(1)), random_tensor({2, 2}, s(2))}});
  cases.push_back({"mean_rows",
                   [w](Tape<double>& t, const std::vector<Var<double>>& v) { return weighted_sum(t, mean_rows(v[0]), w); },
                   {random_tensor({4, 3}, s(1))}});
  for (LossMode mode : {LossMode::kBinaryPerClass, LossMode::kCategorical}) {
    Tensor<double> target(Shape{2, 4});
    target[1] = 1.0;
    target[4 + 3] = 1.0;
    cases.push_back({std::string("cross_entropy_") + std::string(loss_mode_name(mode)),
                     [target, mode](Tape<double>&, const std::vector<Var<double>>& v) {
                       return cross_entropy_loss(softmax(v[0]), target, mode);
                     },
                     {random_tensor({2, 4}, s(1), -2.0, 2.0)}});
  }
  {
    const int heads = 2;
    cases.push_back({"multi_head_attention",
                     [w, heads](Tape<double>& t, const std::vector<Var<double>>& v) {
                       const AttentionWeights<double> aw{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
                       return weighted_sum(t, multi_head_attention(v[0], aw, heads), w);
                     },
                     {random_tensor({3, 8}, s(1)), random_tensor({8, 4}, s(2)), random_tensor({4}, s(3)),
                      random_tensor({8, 4}, s(4)), random_tensor({4}, s(5)), random_tensor({8, 6}, s(6)),
                      random_tensor({6}, s(7)), random_tensor({6, 5}, s(8)), random_tensor({5}, s(9))}});
  }
  return cases;
}

// Small network used for end-to-end checks: full architecture, reduced
// input size and class count.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.num_classes = 5;
  c.input_size = 64;
  return c;
}

// Loss of the composed network for one input and target.
inline double network_loss(const ModelConfig& config, const ParamSet<double>& params, const Tensor<double>& input,
                           const Tensor<double>& target) {
  Tape<double> tape;
  const auto g = build_forward(tape, config, params, input, false);
  return cross_entropy_loss(g.probs, target, config.loss_mode).value().item();
}

// End-to-end check of the composed network on `num_params` randomly chosen
// scalar parameters (at least one per tensor kind is likely at 10).
inline GradCheckResult network_gradcheck(std::uint64_t seed, std::size_t num_params = 10, double step = 1e-4,
                                         double floor = 1e-3) {
  const ModelConfig config = gradcheck_model_config();
  ParamSet<double> params = init_model(config, seed).cast<double>();
  // Non-zero biases and betas so every parameter carries gradient signal.
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names[i];
    if (name.ends_with("bias") || name.ends_with("beta") || name.ends_with(".bq") || name.ends_with(".bk") ||
        name.ends_with(".bv") || name.ends_with(".bo")) {
      params.tensors[i] = random_tensor(params.tensors[i].shape(), derive_seed(seed, {10, i}), -0.1, 0.1);
    }
  }
  const auto size = static_cast<std::size_t>(config.input_size);
  const Tensor<double> input = random_tensor({1, 3, size, size}, derive_seed(seed, {1}), 0.0, 1.0);
  Tensor<double> target(Shape{1, static_cast<std::size_t>(config.num_classes)});
  target[derive_seed(seed, {2}) % static_cast<std::uint64_t>(config.num_classes)] = 1.0;

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    const auto g = build_forward(tape, config, params, input, true);
    tape.backward(cross_entropy_loss(g.probs, target, config.loss_mode));
    for (const auto& v : g.params) analytic.push_back(tape.grad(v));
  }
  // Scale: largest analytic gradient magnitude over all parameters.
  double scale = 0.0;
  for (const auto& a : analytic)
    for (double v : a.data()) scale = std::max(scale, std::abs(v));
  auto central = [&](std::size_t t, std::size_t j, double h) {
    const double x0 = params.tensors[t][j];
    params.tensors[t][j] = x0 + h;
    const double fp = network_loss(config, params, input, target);
    params.tensors[t][j] = x0 - h;
    const double fm = network_loss(config, params, input, target);
    params.tensors[t][j] = x0;
    return (fp - fm) / (2.0 * h);
  };
  Rng rng(derive_seed(seed, {3}));
  GradCheckResult r;
  while (r.checked < num_params && r.skipped < 10 * num_params) {
    const std::size_t t = rng.below(params.size());
    const std::size_t j = rng.below(params.tensors[t].size());
    const double numeric = central(t, j, step);
    // Smooth points agree at h and h/2 up to O(h^2); a larger gap means the
    // step straddles a ReLU or max-pool switch, where no derivative exists.
    const double half = central(t, j, step / 2);
    if (std::abs(numeric - half) > 1e-6 * std::max({std::abs(numeric), std::abs(half), floor * scale})) {
      ++r.skipped;
      continue;
    }
    r.max_rel_error = std::max(r.max_rel_error, grad_rel_error(analytic[t][j], numeric, scale, floor));
    ++r.checked;
  }
  return r;
}

}  // namespace veinatn::testing
