#pragma once

#include "swinseg/tensor.hpp"

namespace swinseg::ops {

// Elementwise arithmetic. Shapes must match or be broadcastable
// (numpy-style, right-aligned). Backward reduces over broadcast axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double negative_slope = 0.01);

// Reductions (double accumulation, fixed order).
Tensor sum(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean(const Tensor& a);

// Element permutations / selections. All are exact bijections where the
// shapes allow it; backward rules are the inverse mappings.
Tensor reshape(const Tensor& a, std::vector<int64_t> shape);  // one extent may be -1
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor roll(const Tensor& a, const std::vector<int64_t>& shifts);
Tensor pad(const Tensor& a, const std::vector<int64_t>& lo, const std::vector<int64_t>& hi);
Tensor slice(const Tensor& a, const std::vector<int64_t>& lo, const std::vector<int64_t>& hi);
/// Gathers rows of a (R, C) table; backward scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, std::vector<int64_t> indices);

/// Batched matrix product: a (..., m, k) x b (..., k, n) -> (..., m, n),
/// batch extents broadcastable.
Tensor matmul(const Tensor& a, const Tensor& b);
/// y = x . w^T + b with w (out, in) and optional bias (out).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

Tensor softmax(const Tensor& a, int axis);
/// Normalizes over the trailing extent; gamma/beta have that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// x (N, C, H, W, D); statistics per (instance, channel) over spatial extents.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Cross-correlation: x (N, Cin, H, W, D), w (Cout, Cin, kh, kw, kd),
/// optional bias (Cout). Output extent = floor((in + 2p - k)/s) + 1.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
/// Adjoint of conv3d: x (N, Cin, H, W, D), w (Cin, Cout, kh, kw, kd).
/// Output extent = (in - 1)*s + k - 2p.
Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                        int padding = 0);

}  // namespace swinseg::ops
