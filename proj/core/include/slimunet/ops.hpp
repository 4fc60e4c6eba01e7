#pragma once

// Differentiable tensor operations used by the denoiser. Layouts are NCHW for
// feature maps and [rows, features] for token sequences.

#include <optional>
#include <vector>

#include "slimunet/autograd.hpp"

namespace slimunet::ops {

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T s);

/// x[B,C,...] + e[B,C], broadcast over trailing spatial dims.
template <class T> Var<T> add_per_channel(const Var<T>& x, const Var<T>& e);

/// 2-D convolution, square kernel taken from w[Cout,Cin,k,k]; bias optional.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* bias, int stride, int pad);

/// y = x W^T + b over the last dimension of x. w is [out, in].
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* bias);

/// Group normalization of x[B,C,...] with per-channel affine parameters.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps);

/// Layer normalization over the last dimension.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

template <class T> Var<T> silu(const Var<T>& x);
template <class T> Var<T> gelu(const Var<T>& x);

/// Splits the last dim into halves (a, g) and returns a * gelu(g).
template <class T> Var<T> geglu(const Var<T>& x);

/// Multi-head scaled dot-product attention. q is [batch*Lq, C]; k and v are
/// [batch*Lk, C]. Heads split C into equal contiguous slices.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int batch, int heads);

/// [B,C,H,W] -> [B*H*W, C]
template <class T> Var<T> to_tokens(const Var<T>& x);
/// [B*H*W, C] -> [B,C,H,W]
template <class T> Var<T> from_tokens(const Var<T>& x, std::int64_t batch, std::int64_t height, std::int64_t width);

template <class T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> upsample_nearest2x(const Var<T>& x);

/// Mean over all elements of (a - b)^2, as a one-element variable.
template <class T> Var<T> mse(const Var<T>& a, const Var<T>& b);

/// sum_i w_i * terms_i for one-element variables.
template <class T> Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights);

}  // namespace slimunet::ops
