#pragma once

#include <array>
#include <optional>
#include <span>

#include "swinseg/tensor.hpp"

namespace swinseg::metrics {

/// Soft Dice loss: probs and target are (J, voxels...) with identical
/// shapes. Per class j the dice term is (2*sum(GY) + eps)/(sum(G^2) +
/// sum(Y^2) + eps); loss = 1 - mean over classes. eps=0 reproduces the bare
/// formula (and divides by zero on classes empty in both). Differentiable in
/// probs.
Tensor soft_dice_loss(const Tensor& probs, const Tensor& target, double eps = 1e-5);

/// 2|P^G| / (|P|+|G|); both masks empty -> 1.
double dice_score(std::span<const uint8_t> pred, std::span<const uint8_t> gt);

/// Symmetric Hausdorff distance between mask boundaries in mm.
/// Boundary: foreground voxel with a six-connected background neighbour or
/// on the volume edge. Directed distance = percentile (nearest-rank) of each
/// boundary voxel's min distance to the other boundary; result is the max of
/// the two directions. Empty masks -> nullopt (callers skip + count).
std::optional<double> hausdorff_distance(std::span<const uint8_t> pred,
                                         std::span<const uint8_t> gt,
                                         const std::array<int64_t, 3>& shape,
                                         const std::array<double, 3>& spacing,
                                         double percentile = 95.0);

/// Boundary voxel coordinates under the definition above.
std::vector<std::array<int64_t, 3>> boundary_voxels(std::span<const uint8_t> mask,
                                                    const std::array<int64_t, 3>& shape);

/// Nearest-rank percentile of a sample (sorted copy; p in (0, 100]).
double percentile_nearest_rank(std::vector<double> values, double p);

}  // namespace swinseg::metrics
