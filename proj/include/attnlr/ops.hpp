#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "attnlr/tensor.hpp"

namespace attnlr::nn::ops {

// a[m×k] · b[k×n]
Var matmul(Tape& t, Var a, Var b);
// a[m×k] · b[n×k]ᵀ
Var matmul_nt(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
// Adds a length-cols bias to every row.
Var add_bias(Tape& t, Var a, Var bias);
Var scale(Tape& t, Var a, double s);
// tanh approximation
Var gelu(Tape& t, Var a);
// Normalizes each row, then applies per-column gamma/beta.
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps);
Var embedding(Tape& t, Var table, std::span<const int> ids);
Var softmax_rows(Tape& t, Var a);
Var sum(Tape& t, Var a);
Var sum_squares(Tape& t, Var a);

// Token-major activations: row b·n + p, column h·d + c.
struct HeadLayout {
  std::size_t batch = 1;
  std::size_t heads = 1;
  std::size_t n = 1;
  std::size_t d = 1;
  std::size_t width() const { return heads * d; }
  std::size_t score_rows() const { return batch * heads * n; }
};

// s · Σ a_i b_i with a fixed summation order, shared by the exact and the
// partial score paths so that both produce identical bits.
double scaled_dot(const double* a, const double* b, std::size_t d, double s);

// Scores block (b, h) occupies rows (b·H + h)·n .. +n of an [B·H·n × n]
// tensor; entry (i, j) = q_i · k_j / √d.
Var head_scores(Tape& t, Var q, Var k, const HeadLayout& layout);
// probs [B·H·n × n], v [B·n × f] -> [B·n × f], heads concatenated.
Var attend(Tape& t, Var probs, Var v, const HeadLayout& layout);

struct Target {
  std::size_t row;
  int token;
};
// Mean negative log-likelihood over target rows; 0 when there are none.
Var masked_cross_entropy(Tape& t, Var logits, std::span<const Target> targets);

}  // namespace attnlr::nn::ops
