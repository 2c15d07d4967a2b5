// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "veinatn/autodiff.hpp"
#include "veinatn/keyvalue.hpp"
#include "veinatn/ops.hpp"

namespace veinatn {

inline constexpr int kMaxConvBlocks = 5;

// VeinAtnNet architecture hyperparameters.
struct ModelConfig {
  int num_conv_blocks = 3;
  int filters = 32;
  std::vector<int> kernel_sizes{7, 5, 3};
  int groupnorm_groups = 8;
  int pool_grid = 7;
  int num_heads = 4;
  int qk_dim = 64;  // total over heads
  int v_dim = 64;   // total over heads
  int num_classes = 300;
  LossMode loss_mode = LossMode::kBinaryPerClass;
  int input_size = 224;
  int in_channels = 3;
  // Adds the attention input to its output before layer norm.
  bool attention_residual = false;

  // Default kernel list for a depth: 7, 5, 3, then 3s.
  static std::vector<int> default_kernels(int blocks);

  // Throws ConfigError on any inconsistency.
  void validate() const;

  // Spatial extent of the feature map after `blocks` conv blocks.
  int spatial_after(int blocks) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

KeyValueText model_config_to_text(const ModelConfig& config);
// Keys absent from `text` keep their default values.
ModelConfig model_config_from_text(const KeyValueText& text);

std::string_view loss_mode_name(LossMode mode);
LossMode parse_loss_mode(std::string_view name);

// Named parameter tensors in architecture order.
template <typename T>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  std::size_t size() const noexcept { return tensors.size(); }
  std::size_t index_of(std::string_view name) const;
  bool contains(std::string_view name) const;
  const Tensor<T>& at(std::string_view name) const { return tensors[index_of(name)]; }
  Tensor<T>& at(std::string_view name) { return tensors[index_of(name)]; }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

using ModelParams = ParamSet<float>;

struct Model {
  ModelConfig config;
  ModelParams params;
};

// Parameter names and shapes, a pure function of the config.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

// Closed-form parameter count from the layout.
std::size_t count_params(const ModelConfig& config);
std::size_t count_params(const ModelParams& params);

bool is_classifier_param(std::string_view name);

// He-normal conv/linear weights, zero biases and betas, unit gammas.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

// Replaces the classifier with a freshly initialized one for
// `new_num_classes` outputs; every other tensor is kept.
Model reshape_head(const Model& model, int new_num_classes, std::uint64_t seed);

// Throws if the parameter names or shapes do not match the config.
template <typename T>
void check_params(const ModelConfig& config, const ParamSet<T>& params);

struct LayerShape {
  std::string layer;
  Shape shape;
};

struct ForwardOptions {
  // Permutes the token sequence before attention and restores the order
  // after it.
  const std::vector<std::size_t>* token_permutation = nullptr;
  std::vector<LayerShape>* shape_log = nullptr;
};

template <typename T>
struct ForwardGraph {
  Var<T> probs;                 // [1, num_classes]
  std::vector<Var<T>> params;   // leaves, parameter order
};

// Records the full network on `tape` for one [1,C,S,S] input.
template <typename T>
ForwardGraph<T> build_forward(Tape<T>& tape, const ModelConfig& config, const ParamSet<T>& params,
                              const Tensor<T>& input, bool requires_grad, const ForwardOptions& options = {});

// Class probabilities [num_classes] for one input.
template <typename T>
Tensor<T> predict(const ModelConfig& config, const ParamSet<T>& params, const Tensor<T>& input,
                  const ForwardOptions& options = {});

}  // namespace veinatn
