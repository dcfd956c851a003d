#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "s4mt/tensor.hpp"

// Differentiable primitives. Every op records itself on the current Tape when
// any input requires grad (and recording is enabled). Reductions accumulate in
// float64; storage stays float32.
namespace s4mt {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
// x[..., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);

// a[..., k] x b[k, n] -> [..., n]; with transpose_b, b is [n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
// a[g, m, k] x b[g, k, n] -> [g, m, n]; with transpose_b, b is [g, n, k].
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
// x[..., in] * w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);

// Key-padding and causal masking for scores laid out [batch * heads, q, k].
// Query row q sits at absolute position query_offset + q. A row with every
// key masked yields all-zero weights.
struct AttentionMask {
  std::size_t heads = 1;
  std::vector<std::size_t> key_lengths;  // one per batch entry; empty = all valid
  bool causal = false;
  std::size_t query_offset = 0;
};
Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);

Tensor gelu(const Tensor& x);  // tanh approximation
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Splits the last axis into value/gate halves: value * sigmoid(gate).
Tensor glu(const Tensor& x);

// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& x, float p, std::mt19937_64& rng, bool training);

// Rows of table[V, d] gathered by ids; the output shape is id_shape + [d].
// Rows equal to padding_idx receive no gradient.
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, Shape id_shape,
                 std::int32_t padding_idx = -1);

// Time-axis helpers for [batch, time, features] tensors.
Tensor concat_time(const Tensor& a, const Tensor& b);
Tensor slice_time(const Tensor& x, std::size_t start, std::size_t length);
// Reverses the first lengths[b] steps of each sequence; the tail stays put.
Tensor reverse_time(const Tensor& x, std::span<const std::size_t> lengths);

// Row i becomes [a[i, :a_lengths[i]], b[i, :], zero padding]; [B, Ta + Tb, d].
Tensor pack_concat(const Tensor& a, std::span<const std::size_t> a_lengths, const Tensor& b);
// Row i becomes x[i, offsets[i] : offsets[i] + length].
Tensor gather_segment(const Tensor& x, std::span<const std::size_t> offsets, std::size_t length);
// Keeps the given leading-axis rows, in order (no gradient).
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);

// [b, t, h * dh] <-> [b * h, t, dh]
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x, std::size_t heads);

// Causal convolution along time, per channel:
//   y[b, t, h] = sum_{i <= t} k[i, h] * u[b, t - i, h]
// u is [L, H] or [B, L, H]; k is [L, H].
Tensor fft_causal_conv(const Tensor& u, const Tensor& k);

// Mean over unmasked rows of -log softmax(logits)[target]. logits is
// [..., V]; targets and mask have one entry per row. No unmasked rows -> 0.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask);

// Solves m * y = rhs. m is [n, n] or [g, n, n]; rhs is [n, k] or [g, n, k].
Tensor solve(const Tensor& m, const Tensor& rhs);

}  // namespace s4mt
