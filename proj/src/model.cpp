// SPDX-License-Identifier: Apache-2.0

#include "veinatn/model.hpp"

#include <cmath>
#include <numeric>

#include "veinatn/rng.hpp"

namespace veinatn {
namespace {

constexpr double kGroupNormEps = 1e-5;
constexpr double kLayerNormEps = 1e-5;

std::string block_prefix(int b) { return "block" + std::to_string(b + 1); }

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::uint64_t name_hash(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return h;
}

// He-normal for weights (fan-in from the shape), constants otherwise.
Tensor<float> init_tensor(const std::string& name, const Shape& shape, std::uint64_t seed) {
  Tensor<float> t(shape);
  const bool is_gamma = name.ends_with(".gamma");
  const bool is_weight = name.ends_with(".weight") || name.ends_with(".wq") || name.ends_with(".wk") ||
                         name.ends_with(".wv") || name.ends_with(".wo");
  if (is_gamma) {
    for (float& v : t.data()) v = 1.0f;
  } else if (is_weight) {
    // conv [F,C,k,k]: fan-in C*k*k; linear [Din,Dout]: fan-in Din.
    const std::size_t fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Rng rng(derive_seed(seed, {name_hash(name)}));
    for (float& v : t.data()) v = static_cast<float>(rng.normal(0.0, stddev));
  }
  return t;
}

}  // namespace

std::vector<int> ModelConfig::default_kernels(int blocks) {
  std::vector<int> k{7, 5, 3};
  k.resize(static_cast<std::size_t>(std::max(blocks, 0)), 3);
  return k;
}

int ModelConfig::spatial_after(int blocks) const {
  int s = input_size;
  for (int b = 0; b < blocks; ++b) s /= 2;
  return s;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (num_conv_blocks < 1 || num_conv_blocks > kMaxConvBlocks) fail("blocks must be in 1..5");
  if (static_cast<int>(kernel_sizes.size()) != num_conv_blocks) fail("kernel_sizes must list one size per block");
  for (int k : kernel_sizes) {
    if (k < 1 || k % 2 == 0) fail("kernel sizes must be odd and positive for same padding");
  }
  if (filters < 1 || groupnorm_groups < 1 || filters % groupnorm_groups != 0) {
    fail("filters must be divisible by groupnorm_groups");
  }
  if (num_heads < 1 || qk_dim < num_heads || v_dim < num_heads || qk_dim % num_heads != 0 ||
      v_dim % num_heads != 0) {
    fail("qk_dim and v_dim must be positive multiples of heads");
  }
  if (num_classes < 1) fail("num_classes must be positive");
  if (in_channels < 1) fail("in_channels must be positive");
  if (pool_grid < 1) fail("pool_grid must be positive");
  if (input_size < 2) fail("input_size too small");
  for (int b = 0; b < num_conv_blocks; ++b) {
    if (spatial_after(b) < 2) fail("input_size too small for " + std::to_string(num_conv_blocks) + " blocks");
  }
  if (spatial_after(num_conv_blocks) < pool_grid) {
    fail("feature map " + std::to_string(spatial_after(num_conv_blocks)) + " smaller than pool_grid " +
         std::to_string(pool_grid));
  }
}

std::string_view loss_mode_name(LossMode mode) {
  return mode == LossMode::kBinaryPerClass ? "binary" : "categorical";
}

LossMode parse_loss_mode(std::string_view name) {
  if (name == "binary" || name == "paper" || name == "paper-formula") return LossMode::kBinaryPerClass;
  if (name == "categorical") return LossMode::kCategorical;
  throw ConfigError("unknown loss_mode '" + std::string(name) + "' (expected binary or categorical)");
}

KeyValueText model_config_to_text(const ModelConfig& c) {
  KeyValueText kv;
  kv.set("blocks", std::to_string(c.num_conv_blocks));
  kv.set("filters", std::to_string(c.filters));
  kv.set("kernel_sizes", join_ints(c.kernel_sizes));
  kv.set("groups", std::to_string(c.groupnorm_groups));
  kv.set("pool_grid", std::to_string(c.pool_grid));
  kv.set("heads", std::to_string(c.num_heads));
  kv.set("qk_dim", std::to_string(c.qk_dim));
  kv.set("v_dim", std::to_string(c.v_dim));
  kv.set("num_classes", std::to_string(c.num_classes));
  kv.set("loss_mode", std::string(loss_mode_name(c.loss_mode)));
  kv.set("input_size", std::to_string(c.input_size));
  kv.set("in_channels", std::to_string(c.in_channels));
  kv.set("attention_residual", c.attention_residual ? "1" : "0");
  return kv;
}

ModelConfig model_config_from_text(const KeyValueText& kv) {
  ModelConfig c;
  c.num_conv_blocks = static_cast<int>(kv.get_int("blocks", c.num_conv_blocks));
  if (auto ks = kv.get("kernel_sizes")) {
    c.kernel_sizes.clear();
    for (long k : parse_int_list(*ks, "kernel_sizes")) c.kernel_sizes.push_back(static_cast<int>(k));
  } else {
    c.kernel_sizes = ModelConfig::default_kernels(c.num_conv_blocks);
  }
  c.filters = static_cast<int>(kv.get_int("filters", c.filters));
  c.groupnorm_groups = static_cast<int>(kv.get_int("groups", c.groupnorm_groups));
  c.pool_grid = static_cast<int>(kv.get_int("pool_grid", c.pool_grid));
  c.num_heads = static_cast<int>(kv.get_int("heads", c.num_heads));
  c.qk_dim = static_cast<int>(kv.get_int("qk_dim", c.qk_dim));
  c.v_dim = static_cast<int>(kv.get_int("v_dim", c.v_dim));
  c.num_classes = static_cast<int>(kv.get_int("num_classes", c.num_classes));
  if (auto lm = kv.get("loss_mode")) c.loss_mode = parse_loss_mode(*lm);
  c.input_size = static_cast<int>(kv.get_int("input_size", c.input_size));
  c.in_channels = static_cast<int>(kv.get_int("in_channels", c.in_channels));
  c.attention_residual = kv.get_int("attention_residual", 0) != 0;
  c.validate();
  return c;
}

template <typename T>
std::size_t ParamSet<T>::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
bool ParamSet<T>::contains(std::string_view name) const {
  for (const auto& n : names) {
    if (n == name) return true;
  }
  return false;
}

template struct ParamSet<float>;
template struct ParamSet<double>;

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  c.validate();
  const auto f = static_cast<std::size_t>(c.filters);
  const auto qk = static_cast<std::size_t>(c.qk_dim), vd = static_cast<std::size_t>(c.v_dim);
  std::vector<std::pair<std::string, Shape>> out;
  std::size_t in = static_cast<std::size_t>(c.in_channels);
  for (int b = 0; b < c.num_conv_blocks; ++b) {
    const auto k = static_cast<std::size_t>(c.kernel_sizes[static_cast<std::size_t>(b)]);
    const std::string p = block_prefix(b);
    out.emplace_back(p + ".conv.weight", Shape{f, in, k, k});
    out.emplace_back(p + ".conv.bias", Shape{f});
    out.emplace_back(p + ".norm.gamma", Shape{f});
    out.emplace_back(p + ".norm.beta", Shape{f});
    in = f;
  }
  out.emplace_back("attn.wq", Shape{f, qk});
  out.emplace_back("attn.bq", Shape{qk});
  out.emplace_back("attn.wk", Shape{f, qk});
  out.emplace_back("attn.bk", Shape{qk});
  out.emplace_back("attn.wv", Shape{f, vd});
  out.emplace_back("attn.bv", Shape{vd});
  out.emplace_back("attn.wo", Shape{vd, f});
  out.emplace_back("attn.bo", Shape{f});
  out.emplace_back("norm.gamma", Shape{f});
  out.emplace_back("norm.beta", Shape{f});
  out.emplace_back("fc.weight", Shape{f, static_cast<std::size_t>(c.num_classes)});
  out.emplace_back("fc.bias", Shape{static_cast<std::size_t>(c.num_classes)});
  return out;
}

std::size_t count_params(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_layout(config)) n += shape_numel(shape);
  return n;
}

std::size_t count_params(const ModelParams& params) {
  std::size_t n = 0;
  for (const auto& t : params.tensors) n += t.size();
  return n;
}

bool is_classifier_param(std::string_view name) { return name.starts_with("fc."); }

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p;
  for (auto& [name, shape] : parameter_layout(config)) {
    p.tensors.push_back(init_tensor(name, shape, seed));
    p.names.push_back(std::move(name));
  }
  return p;
}

Model reshape_head(const Model& model, int new_num_classes, std::uint64_t seed) {
  if (new_num_classes < 1) throw ConfigError("reshape_head: class count must be positive");
  Model out = model;
  out.config.num_classes = new_num_classes;
  for (const auto& [name, shape] : parameter_layout(out.config)) {
    if (is_classifier_param(name)) out.params.at(name) = init_tensor(name, shape, seed);
  }
  return out;
}

template <typename T>
void check_params(const ModelConfig& config, const ParamSet<T>& params) {
  const auto layout = parameter_layout(config);
  if (layout.size() != params.size() || params.names.size() != params.tensors.size()) {
    throw ConfigError("parameter set has " + std::to_string(params.size()) + " tensors, config expects " +
                      std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (params.names[i] != layout[i].first || params.tensors[i].shape() != layout[i].second) {
      throw ShapeError("parameter '" + params.names[i] + "' " + shape_to_string(params.tensors[i].shape()) +
                       " does not match config entry '" + layout[i].first + "' " +
                       shape_to_string(layout[i].second));
    }
  }
}

template <typename T>
ForwardGraph<T> build_forward(Tape<T>& tape, const ModelConfig& config, const ParamSet<T>& params,
                              const Tensor<T>& input, bool requires_grad, const ForwardOptions& options) {
  check_params(config, params);
  const auto s = static_cast<std::size_t>(config.input_size);
  const Shape expected{1, static_cast<std::size_t>(config.in_channels), s, s};
  if (input.shape() != expected) {
    throw ShapeError("network input " + shape_to_string(input.shape()) + ", expected " + shape_to_string(expected));
  }
  ForwardGraph<T> g;
  for (const auto& t : params.tensors) g.params.push_back(tape.leaf(t, requires_grad));
  auto param = [&](std::string_view name) { return g.params[params.index_of(name)]; };
  auto log = [&](std::string layer, Var<T> v) {
    if (options.shape_log) options.shape_log->push_back({std::move(layer), v.shape()});
  };

  Var<T> x = tape.constant(input);
  log("input", x);
  for (int b = 0; b < config.num_conv_blocks; ++b) {
    const std::string p = block_prefix(b);
    const int pad = config.kernel_sizes[static_cast<std::size_t>(b)] / 2;
    x = conv2d(x, param(p + ".conv.weight"), param(p + ".conv.bias"), 1, pad);
    log(p + ".conv", x);
    x = group_norm(x, config.groupnorm_groups, param(p + ".norm.gamma"), param(p + ".norm.beta"),
                   static_cast<T>(kGroupNormEps));
    x = relu(x);
    x = max_pool2d(x, 2, 2);
    log(p + ".pool", x);
  }
  x = adaptive_avg_pool(x, config.pool_grid, config.pool_grid);
  log("group_avg_pool", x);
  Var<T> tokens = to_tokens(x);
  log("tokens", tokens);

  std::vector<std::size_t> inverse;
  if (options.token_permutation) {
    const auto& perm = *options.token_permutation;
    if (perm.size() != tokens.dim(0)) throw ShapeError("token permutation length mismatch");
    inverse.assign(perm.size(), 0);
    for (std::size_t i = 0; i < perm.size(); ++i) inverse.at(perm[i]) = i;
    tokens = gather_rows(tokens, perm);
  }
  const AttentionWeights<T> w{param("attn.wq"), param("attn.bq"), param("attn.wk"), param("attn.bk"),
                              param("attn.wv"), param("attn.bv"), param("attn.wo"), param("attn.bo")};
  Var<T> attended = multi_head_attention(tokens, w, config.num_heads);
  if (config.attention_residual) attended = add(attended, tokens);
  if (options.token_permutation) attended = gather_rows(attended, inverse);
  log("attention", attended);

  Var<T> normed = layer_norm(attended, param("norm.gamma"), param("norm.beta"), static_cast<T>(kLayerNormEps));
  Var<T> pooled = mean_rows(normed);
  Var<T> logits = linear(pooled, param("fc.weight"), param("fc.bias"));
  log("fc", logits);
  g.probs = softmax(logits);
  return g;
}

template <typename T>
Tensor<T> predict(const ModelConfig& config, const ParamSet<T>& params, const Tensor<T>& input,
                  const ForwardOptions& options) {
  Tape<T> tape;
  const auto g = build_forward(tape, config, params, input, false, options);
  const Tensor<T>& p = g.probs.value();
  return p.reshaped(Shape{p.size()});
}

template void check_params(const ModelConfig&, const ParamSet<float>&);
template void check_params(const ModelConfig&, const ParamSet<double>&);
template ForwardGraph<float> build_forward(Tape<float>&, const ModelConfig&, const ParamSet<float>&,
                                           const Tensor<float>&, bool, const ForwardOptions&);
template ForwardGraph<double> build_forward(Tape<double>&, const ModelConfig&, const ParamSet<double>&,
                                            const Tensor<double>&, bool, const ForwardOptions&);
template Tensor<float> predict(const ModelConfig&, const ParamSet<float>&, const Tensor<float>&,
                               const ForwardOptions&);
template Tensor<double> predict(const ModelConfig&, const ParamSet<double>&, const Tensor<double>&,
                                const ForwardOptions&);

}  // namespace veinatn
