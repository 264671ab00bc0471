// Copyright 2026 The mixcal Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mixcal/autodiff/tensor.hpp"

namespace mixcal::ad {

// Matrix product of [m x k] and [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// x · wᵀ for x [n x in] and w [out x in]; the weight layout of a linear layer.
Tensor linear(const Tensor& x, const Tensor& w);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor square(const Tensor& a);
// tanh approximation of GELU.
Tensor gelu(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// x [.. x m] + b [m], broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& b);
// Row r of x multiplied by g[r]; g has one entry per row.
Tensor scale_rows(const Tensor& x, const Tensor& g);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Sum along the last dimension; result has one entry per row.
Tensor sum_rows(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
// Scalar view of one element.
Tensor select(const Tensor& a, std::size_t index);

// Along the last dimension, max-subtracted.
Tensor softmax(const Tensor& v);
Tensor log_softmax(const Tensor& v);
// Normalizes each row to zero mean and unit (biased) variance, then applies
// gain and bias of length equal to the row width.
Tensor layer_norm(const Tensor& v, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// -log softmax(logits)[label] for a single logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t label);
// Mean cross-entropy over the rows of logits [n x C].
Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> labels);

// out[i] = x[index[i]] (rows).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// Inverse of gather_rows: [n_rows x m] zero matrix with x's rows added at index.
Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t n_rows);
// out[i] = x[rows[i], cols[i]], shape [len].
Tensor gather_elements(const Tensor& x, std::span<const std::size_t> rows,
                       std::span<const std::size_t> cols);

// Single-head causal self-attention over consecutive row segments. Each
// segment is an independent sequence; row t attends to rows <= t of its own
// segment with weights softmax(scale · q_t · k_j).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const std::size_t> segment_lengths, double scale);

// Mean of x's entries (one per row) within each consecutive segment.
Tensor segment_mean(const Tensor& x, std::span<const std::size_t> segment_lengths);

// Indices of the k largest entries of each row, largest first. Ties go to
// the lower index.
std::vector<std::size_t> topk_rows(const Tensor& x, std::size_t k);
// Row-wise argmax with ties to the lower index.
std::vector<std::size_t> argmax_rows(const Tensor& x);

}  // namespace mixcal::ad
