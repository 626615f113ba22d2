#pragma once

#include <cstddef>
#include <vector>

#include "dod/tensor.hpp"

// Differentiable primitives. Every op records its backward rule on the thread's
// active tape when at least one input requires grad; otherwise it is a plain forward.

namespace dod {

// Elementwise, operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor silu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);

/// x: (G*R, C, ...), bias: (G, C). Row n of x receives bias[n / R].
Tensor add_group_bias(const Tensor& x, const Tensor& bias);

// Reductions to a shape-{1} tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// (N,C,H,W) -> (N,C,2H,2W).
Tensor upsample_nearest2x(const Tensor& x);
/// (N,C,H,W) -> (N,C,H/2,W/2), mean over 2x2 windows.
Tensor avg_pool2x(const Tensor& x);

/// y = x W + b over the last axis. x: (..., in), w: (in, out), b: (out) or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Cross-correlation. x: (N,Cin,H,W), w: (Cout,Cin,k,k), b: (Cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding);

/// Cross-correlation along the last axis, stride 1. x: (N,Cin,L), w: (Cout,Cin,k).
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t padding);

/// softmax(q k^T / sqrt(d)) v, softmax over keys. q: (N,nq,d), k: (N,nk,d), v: (N,nk,dv).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Softmax weights of attention(q, k, v), shape (N,nq,nk). Not differentiable.
Tensor attention_weights(const Tensor& q, const Tensor& k);

/// Normalizes along `axis` to zero mean / unit variance, then applies gamma/beta
/// (shape (x.dim(axis)) each, or undefined for no affine).
Tensor layer_norm(const Tensor& x, std::size_t axis, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

}  // namespace dod
