#pragma once

#include <vector>

#include "falcon/mask.hpp"
#include "falcon/tensor.hpp"

namespace falcon {

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar s);

Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Row-stacking concat; every input must share the trailing width.
Tensor concat_rows(const std::vector<Tensor>& parts);
// Feature-axis concat of two (rows x c) tensors -> (rows x c1+c2).
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);
Tensor slice_cols(const Tensor& x, int64_t start, int64_t len);
// Row gather; backward scatter-adds into the table. Also the embedding lookup.
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
// x (rows x in) @ w (in x out) + b(out); pass undefined b for no bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Numerically stabilized by max-subtraction along `axis` (negative axis
// counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);

// Normalizes the last axis; eps = 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets);
// Mean over rows of sum_j p_j * log(p_j / q_j); both arguments are
// probability rows, floored at 1e-12 before the log.
Tensor kl_divergence(const Tensor& p, const Tensor& q);
// Mean elementwise smooth-L1: 0.5*d^2 for |d| < 1, |d| - 0.5 otherwise.
Tensor smooth_l1(const Tensor& pred, const Tensor& target);

struct LstmState {
  Tensor h;
  Tensor c;
};

// Single LSTM step. x (1 x in), h/c (1 x hidden), w_ih (in x 4*hidden),
// w_hh (hidden x 4*hidden), b (4*hidden). Gate order: input, forget, cell,
// output.
LstmState lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                    const Tensor& w_ih, const Tensor& w_hh, const Tensor& b);

// Masked multi-head self-attention over already-projected q/k/v (seq x
// hidden). Scores are scaled by 1/sqrt(hidden/n_heads); the softmax at row i
// runs over exactly the columns the mask allows, so rows with identical
// visibility produce bit-identical outputs regardless of what follows them.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int64_t n_heads, const BoolMatrix& mask);

}  // namespace falcon
