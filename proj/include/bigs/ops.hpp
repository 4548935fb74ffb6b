// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bigs/autograd.hpp"
#include "bigs/rng.hpp"
#include "bigs/tensor.hpp"

namespace bigs {

// Differentiable ops over rank-2 tensors. Sequence-aware ops take
// `seq_len`: the rows of x are read as rows/seq_len consecutive sequences.

Var matmul(Var a, Var b);     // [m x k] . [k x n]
Var matmul_nt(Var a, Var b);  // [m x k] . [n x k]^T
Var add(Var a, Var b);
Var add_row(Var x, Var bias);  // bias [d] broadcast over rows
Var mul(Var a, Var b);         // elementwise
Var scale(Var x, double s);
Var sum(Var x);

/// Exact GELU: x * Phi(x), Phi the standard normal CDF (erf form).
Var gelu(Var x);

Var layer_norm(Var x, Var gain, Var bias, double eps);

/// Reverses row order inside each length-seq_len sequence.
Var flip(Var x, std::size_t seq_len);

Var gather_rows(Var table, std::span<const std::int32_t> ids);

/// Inverted dropout; identity when p == 0.
Var dropout(Var x, double p, Rng& rng);

/// Exact multi-head softmax attention, per sequence, no masking.
/// q, k, v: [(B*L) x d]; head h uses columns [h*d/H, (h+1)*d/H).
Var attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t n_heads);

/// Softmax attention probabilities for one sequence and one head (L x L),
/// used by analysis probes.
Tensor attention_probs(const Tensor& q, const Tensor& k, std::size_t n_heads, std::size_t head);

/// Mean cross-entropy over rows whose label is >= 0. Returns 0 when no row
/// is labeled.
Var masked_cross_entropy(Var logits, std::span<const std::int32_t> labels);

// Plain (non-tape) helpers.
double gelu_value(double x);
double gelu_derivative(double x);
Tensor matmul(const Tensor& a, const Tensor& b);
std::vector<double> softmax_row(std::span<const double> logits);

}  // namespace bigs
