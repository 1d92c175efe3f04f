#pragma once

#include "bmod/nn/tape.hpp"

namespace bmod::nn {

// Differentiable tensor operations recorded on a Tape. Image tensors use
// [batch, channels, height, width]; token tensors use [batch, tokens, features].
// Explicitly instantiated for float and double.

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> tanh(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
// 1 - x
template <typename T>
Var<T> one_minus(const Var<T>& x);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int count);
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor);

// [B, C, H, W] <-> [B, H*W, C]
template <typename T>
Var<T> to_tokens(const Var<T>& x);
template <typename T>
Var<T> from_tokens(const Var<T>& x, int height, int width);

// x: [..., in], weight: [in, out], bias: [out]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// x: [B, N, C] plus rows: [N, C], broadcast over the batch.
template <typename T>
Var<T> add_rows(const Var<T>& x, const Var<T>& rows);

// Normalizes over the last axis, then applies per-feature gain and offset.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& offset, T eps = T(1e-5));

// Batched matmul over [B, n, k] x [B, k, m] with optional transposes of
// either operand's last two axes.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_a, bool transpose_b);

template <typename T>
Var<T> softmax_last(const Var<T>& x);

// w: [B, N, S]; divides each slot column by its sum over the N positions.
template <typename T>
Var<T> normalize_over_positions(const Var<T>& w, T eps);

// Builds [B, S, dim] initial slots. When `background` is valid, slot 0 is the
// background vector and the rest are mean + exp(log_std) * noise; otherwise
// every slot is sampled. noise: [B, S_sampled, dim].
template <typename T>
Var<T> slot_init(const Var<T>& background, const Var<T>& mean, const Var<T>& log_std,
                 const Var<T>& noise);

}  // namespace bmod::nn
