#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "swinseg/model.hpp"
#include "swinseg/tensor.hpp"
#include "swinseg/windowing.hpp"

namespace swinseg::verify {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

// Reference kernels: plain double-precision loops, deliberately independent
// of the ops:: implementations they validate.

/// Dense multi-head self-attention over t tokens of width c. qkv_w is
/// (3c, c) row-major, proj_w (c, c). Optional additive mask (t*t) and
/// per-head bias (heads*t*t).
std::vector<double> reference_attention(const std::vector<double>& tokens, int64_t t, int64_t c,
                                        int64_t heads, const std::vector<double>& qkv_w,
                                        const std::vector<double>& qkv_b,
                                        const std::vector<double>& proj_w,
                                        const std::vector<double>& proj_b,
                                        const std::vector<double>& mask = {},
                                        const std::vector<double>& bias = {});

std::vector<double> reference_layer_norm(const std::vector<double>& x, int64_t rows,
                                         int64_t width, const std::vector<double>& gamma,
                                         const std::vector<double>& beta, double eps = 1e-5);

/// Naive cross-correlation, x (N,Cin,H,W,D) / w (Cout,Cin,kh,kw,kd).
std::vector<double> reference_conv3d(const std::vector<double>& x,
                                     const std::vector<int64_t>& x_shape,
                                     const std::vector<double>& w,
                                     const std::vector<int64_t>& w_shape,
                                     const std::vector<double>& bias, int64_t stride,
                                     int64_t padding);

/// Naive transposed convolution, w (Cin,Cout,kh,kw,kd).
std::vector<double> reference_conv_transpose3d(const std::vector<double>& x,
                                               const std::vector<int64_t>& x_shape,
                                               const std::vector<double>& w,
                                               const std::vector<int64_t>& w_shape,
                                               const std::vector<double>& bias, int64_t stride,
                                               int64_t padding);

/// Exhaustive pairwise Hausdorff over boundary voxels.
std::optional<double> reference_hausdorff(std::span<const uint8_t> pred,
                                          std::span<const uint8_t> gt,
                                          const std::array<int64_t, 3>& shape,
                                          const std::array<double, 3>& spacing,
                                          double percentile);

// Oracle cases (each returns a pass/fail with detail).

/// Grid = one window, no shift, bias off: window attention vs dense
/// reference attention over all tokens (float32 pipeline, < 1e-5 abs).
CheckResult wmsa_oracle_case(int64_t m, int64_t heads, int64_t width, uint64_t seed);

/// Shifted-window pipeline (cyclic shift + mask) vs explicit region-gather
/// attention on the unshifted grid, padded grids included. shift_override
/// deliberately breaks the block's shift for fault-injection tests; the
/// oracle always gathers with the demanded floor(m/2) shift.
CheckResult swmsa_oracle_case(const win::Extents& grid, int64_t m, int64_t heads, int64_t width,
                              uint64_t seed, int64_t shift_override = -1);

// Suites behind `swinseg verify`.
std::vector<CheckResult> gradcheck_suite();
std::vector<CheckResult> oracle_suite();
std::vector<CheckResult> roundtrip_suite();
/// which: gradcheck | oracles | roundtrip | all
std::vector<CheckResult> run_suites(const std::string& which);

}  // namespace swinseg::verify
