#pragma once

#include <array>

#include "swinseg/tensor.hpp"

namespace swinseg::win {

/// Additive mask magnitude: large enough to zero attention after softmax
/// while keeping gradients finite.
constexpr double kMaskValue = 1e9;

using Extents = std::array<int64_t, 3>;

struct PadRecord {
    Extents original{};
    Extents padded{};
    bool any() const { return original != padded; }
};

/// Zero-pads a (H, W, D, C) token grid so each spatial extent is a multiple
/// of m. Padding goes on the high side.
Tensor pad_to_window_multiple(const Tensor& tokens, int64_t m, PadRecord& rec);
/// Inverse crop back to rec.original.
Tensor crop_from_pad(const Tensor& tokens, const PadRecord& rec);

/// Tokens regrouped as (num_windows, m^3, C) with window provenance.
struct WindowSet {
    Tensor windows;
    Extents grid{};  // grid the windows came from (extents multiples of m)
    int64_t m = 0;
};

WindowSet window_partition(const Tensor& tokens, int64_t m);
Tensor window_reverse(const WindowSet& ws);

/// Torus roll of the spatial axes: forward shifts by -s (window alignment),
/// inverse by +s. inverse(forward(x)) == x bit-exactly.
Tensor cyclic_shift(const Tensor& tokens, int64_t s, bool inverse = false);

/// Region ids on the (padded) grid: per axis the 3-way segmentation
/// [0, E-m), [E-m, E-s), [E-s, E), combined across axes; tokens beyond the
/// real extents share one extra pad region so real tokens never attend
/// across the real/pad boundary.
std::vector<int32_t> region_labels(const Extents& padded, int64_t m, int64_t s,
                                   const Extents& real);

/// Per-window additive attention mask (num_windows, 1, m^3, m^3) with entries
/// 0 (same pre-shift region) or -kMaskValue. s == 0 yields all zeros.
Tensor compute_shift_mask(const Extents& padded, int64_t m, int64_t s, const Extents& real,
                          DType dt = DType::f32);

}  // namespace swinseg::win
