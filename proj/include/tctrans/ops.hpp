#pragma once

#include "tctrans/tensor.hpp"

namespace tct {

// Differentiable tensor operations. All run single-threaded with a fixed
// row-major summation order so results are reproducible bit-for-bit.

// Elementwise, same shape.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// Multiply by a constant (not a graph node).
template <typename T> Tensor<T> scale(const Tensor<T>& a, T c);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
// max(0, x); same kernel as relu, named for its use in hinge losses.
template <typename T> Tensor<T> hinge(const Tensor<T>& x) { return relu(x); }
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);

// x[..., D] + v[D], broadcast across leading dims (bias add).
template <typename T> Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v);

// a[..., M, K] @ b[..., K, N]; leading dims must match, or b may be rank-2
// and is then shared across a's leading dims.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose_last2(const Tensor<T>& x);

template <typename T> Tensor<T> softmax_lastdim(const Tensor<T>& x);

// Fused row-softmax(scale * q @ k^T) for q,k of shape [M, d]. Keeps only the
// probability matrix alive for backward, not the raw scores.
template <typename T> Tensor<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, T scale);

// Per-row standardization over the last dim, then affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps);

// NCHW group normalization; C must be divisible by groups.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps);

// input [B,Cin,H,W], weight [Cout,Cin,k,k] (k odd), bias [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding);

template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b);

// Single-sample view of a batched NCHW tensor, and its inverse.
template <typename T> Tensor<T> slice_batch(const Tensor<T>& x, int index);
template <typename T> Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> upsample2x_nearest(const Tensor<T>& x);

template <typename T> Tensor<T> mean_all(const Tensor<T>& x);
template <typename T> Tensor<T> sum_all(const Tensor<T>& x);

// Copying reshape; total element count must be preserved.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape);

// [1,C,h,w] -> [h*w, C] row-major over the spatial grid, and its inverse.
template <typename T> Tensor<T> nchw_to_tokens(const Tensor<T>& x);
template <typename T> Tensor<T> tokens_to_nchw(const Tensor<T>& t, int h, int w);

#define TCT_EXTERN_OPS(T)                                                        \
  extern template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);             \
  extern template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);             \
  extern template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);             \
  extern template Tensor<T> scale(const Tensor<T>&, T);                          \
  extern template Tensor<T> relu(const Tensor<T>&);                              \
  extern template Tensor<T> abs(const Tensor<T>&);                               \
  extern template Tensor<T> sqrt(const Tensor<T>&);                              \
  extern template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);      \
  extern template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);          \
  extern template Tensor<T> transpose_last2(const Tensor<T>&);                   \
  extern template Tensor<T> softmax_lastdim(const Tensor<T>&);                   \
  extern template Tensor<T> attention_probs(const Tensor<T>&, const Tensor<T>&, T); \
  extern template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,      \
                                       const Tensor<T>&, T);                     \
  extern template Tensor<T> group_norm(const Tensor<T>&, int, const Tensor<T>&, \
                                       const Tensor<T>&, T);                     \
  extern template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,          \
                                   const Tensor<T>&, int, int);                  \
  extern template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&); \
  extern template Tensor<T> concat_lastdim(const Tensor<T>&, const Tensor<T>&);  \
  extern template Tensor<T> slice_batch(const Tensor<T>&, int);                  \
  extern template Tensor<T> concat_batch(const Tensor<T>&, const Tensor<T>&);    \
  extern template Tensor<T> upsample2x_nearest(const Tensor<T>&);                \
  extern template Tensor<T> mean_all(const Tensor<T>&);                          \
  extern template Tensor<T> sum_all(const Tensor<T>&);                           \
  extern template Tensor<T> reshape(const Tensor<T>&, std::vector<int>);         \
  extern template Tensor<T> nchw_to_tokens(const Tensor<T>&);                    \
  extern template Tensor<T> tokens_to_nchw(const Tensor<T>&, int, int);

TCT_EXTERN_OPS(float)
TCT_EXTERN_OPS(double)
#undef TCT_EXTERN_OPS

}  // namespace tct
