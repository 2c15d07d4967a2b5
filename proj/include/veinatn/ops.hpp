// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "veinatn/autodiff.hpp"

// Differentiable operators recorded on a Tape. All operators are
// instantiated for float (training) and double (gradient checking).
namespace veinatn {

enum class LossMode {
  // -(1/N) sum_n sum_k [T log Y + (1 - T) log(1 - Y)]
  kBinaryPerClass,
  // -(1/N) sum_n sum_k T log Y
  kCategorical,
};

inline constexpr double kLossClampEps = 1e-7;

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

// Elementwise product of equal shapes.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> a, T factor);

// Sum of all elements, rank-0 result.
template <typename T>
Var<T> sum(Var<T> a);

// Cross-correlation (no kernel flip). input [N,C,H,W], kernel [F,C,kH,kW],
// bias [F] -> [N,F,(H+2p-kH)/s+1,(W+2p-kW)/s+1]. Zero padding.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, int stride, int padding);

// x [N,C,H,W]; statistics per (sample, group of C/groups channels); affine
// per channel.
template <typename T>
Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, T eps);

// max(x, 0); derivative at 0 is 0.
template <typename T>
Var<T> relu(Var<T> x);

// Windowed maximum over [N,C,H,W]. The gradient goes to the first maximal
// element of each window in row-major order.
template <typename T>
Var<T> max_pool2d(Var<T> x, int kernel, int stride);

// Output cell (i,j) averages rows floor(i*H/outH) .. floor((i+1)*H/outH)-1
// and the analogous column range.
template <typename T>
Var<T> adaptive_avg_pool(Var<T> x, int out_h, int out_w);

// [1,C,H,W] -> [H*W, C]: one token per spatial position, row-major.
template <typename T>
Var<T> to_tokens(Var<T> x);

// out[i] = x[order[i]] for a rank-2 x.
template <typename T>
Var<T> gather_rows(Var<T> x, const std::vector<std::size_t>& order);

// x [..., Din] * weight [Din, Dout] + bias [Dout].
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);

// Normalizes each position over the last axis, then gamma/beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps);

// Softmax over the last axis (max-subtracted).
template <typename T>
Var<T> softmax(Var<T> x);

// softmax(Q K^T / sqrt(dk)) V for Q,K [L,dk] and V [L,dv].
template <typename T>
Var<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v);

// Columns [begin, end) of a rank-2 tensor.
template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end);

// Concatenates rank-2 tensors with equal row count along columns.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);

// Mean over rows of [L,D] -> [1,D].
template <typename T>
Var<T> mean_rows(Var<T> x);

// Probabilities Y and targets T, both [N,K]. Y is clamped to
// [kLossClampEps, 1 - kLossClampEps] before the logarithms. In strict mode
// every row of T must be one-hot.
template <typename T>
Var<T> cross_entropy_loss(Var<T> probs, const Tensor<T>& targets, LossMode mode, bool strict = true);

// Weights of one multi-head attention block. Projections map the model
// width D to qk_dim (queries/keys) and v_dim (values); the output weight
// maps the concatenated heads back to out_dim.
template <typename T>
struct AttentionWeights {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

// [H_1, ..., H_h] W with H_i = attention(x Wq_i, x Wk_i, x Wv_i).
template <typename T>
Var<T> multi_head_attention(Var<T> x, const AttentionWeights<T>& w, int num_heads);

}  // namespace veinatn
