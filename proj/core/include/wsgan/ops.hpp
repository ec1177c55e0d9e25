#pragma once

#include <vector>

#include "wsgan/autodiff.hpp"

namespace wsgan {

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, Scalar c);
Var mul_scalar(const Var& a, Scalar c);
Var neg(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, Scalar slope);
Var tanh_op(const Var& a);
Var sigmoid(const Var& a);
Var exp_op(const Var& a);
/// log(max(a, floor)); gradient is zero where the floor is active.
Var log_clamped(const Var& a, Scalar floor = 1e-7);
Var pow_scalar(const Var& a, Scalar e);
Var sqrt_op(const Var& a);
Var square(const Var& a);
/// max(a, c) elementwise against a scalar.
Var clamp_min(const Var& a, Scalar c);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---- broadcast with a scalar node [1] ----
Var mul_scalarvar(const Var& a, const Var& s);
Var reciprocal(const Var& s);

// ---- column-vector broadcast over rows of a [R,C] matrix ----
Var rowsum(const Var& x);                     // [R,C] -> [R,1]
Var div_colvec(const Var& x, const Var& v);   // x[r,c] / v[r]
Var mul_colvec(const Var& x, const Var& v);

// ---- reductions ----
Var sum_all(const Var& a);   // -> [1]
Var mean_all(const Var& a);  // -> [1]
Var mse(const Var& a, const Var& b);  // mean squared error -> [1]

// ---- matrix ----
Var matmul(const Var& a, const Var& b);                    // [m,k]x[k,n]
Var linear(const Var& x, const Var& w, const Var& b);      // x[B,i], w[o,i], b[o] (b may be undefined)
Var transpose(const Var& x);                               // [m,n] -> [n,m]
Var bmm(const Var& a, const Var& b);                       // [B,m,k]x[B,k,n]
Var transpose12(const Var& x);                             // [B,m,n] -> [B,n,m]

// ---- softmax family (rank-2, rowwise) ----
Var softmax_rows(const Var& x);
Var logsumexp_rows(const Var& x);  // [R,C] -> [R,1]
/// Rows scaled to unit L2 norm; rows must be nonzero.
Var l2_normalize_rows(const Var& x);

// ---- shape ----
Var reshape(const Var& x, Shape shape);
Var concat_rows(const std::vector<Var>& xs);
Var slice_rows(const Var& x, int begin, int end);
Var gather_rows(const Var& x, std::vector<int> idx);

// ---- conv / nn ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int out_pad);
/// Training mode uses batch statistics and updates the running buffers in
/// place; eval mode normalizes with the running buffers.
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor running_mean,
                Tensor running_var, bool training, Scalar momentum = 0.1, Scalar eps = 1e-5);
Var global_avg_pool(const Var& x);  // [B,C,H,W] -> [B,C]

}  // namespace wsgan
