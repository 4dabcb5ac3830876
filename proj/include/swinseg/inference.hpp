#pragma once

#include <functional>
#include <memory>

#include "swinseg/model.hpp"
#include "swinseg/tensor.hpp"
#include "swinseg/volume.hpp"

namespace swinseg::infer {

enum class Blend { uniform, gaussian };
Blend blend_from_name(const std::string& name);
const char* blend_name(Blend b);

struct SlidingWindowPlan {
    std::array<int64_t, 3> roi{128, 128, 128};
    double overlap = 0.7;
    Blend blend = Blend::uniform;
    std::array<int64_t, 3> extents{};  // volume extents the plan covers
    std::array<int64_t, 3> step{};
    std::vector<std::array<int64_t, 3>> origins;  // lexicographic order
};

/// Tile origins at multiples of step = max(1, floor(roi*(1-overlap))), the
/// final origin per axis clamped so the tile fits. Every voxel is covered.
SlidingWindowPlan plan_tiles(const std::array<int64_t, 3>& extents,
                             const std::array<int64_t, 3>& roi, double overlap,
                             Blend blend = Blend::uniform);

/// Maps a (S, roi) tile to (out, roi) probabilities.
using TileFn = std::function<Tensor(const Tensor&)>;

/// Whole-volume inference: zero-pads (centered) up to roi where needed, runs
/// tile_probs per tile, accumulates blend-weighted probabilities, normalizes
/// by the accumulated weight and crops back. Deterministic tile order.
Tensor sliding_window_infer(const Tensor& volume, const TileFn& tile_probs,
                            const std::array<int64_t, 3>& roi, double overlap,
                            Blend blend = Blend::uniform);

/// forward + sigmoid tile function for a model.
TileFn model_tile_fn(std::shared_ptr<const nn::SwinUnetr> model);

struct EnsembleMember {
    std::string path;  // canonical identity (members are sorted by it)
    std::shared_ptr<const nn::SwinUnetr> model;
};

/// Mean of per-member sliding-window probability volumes. Members with
/// identical parameter bytes are evaluated once and weighted by multiplicity,
/// so duplicate checkpoints reproduce the single-model output exactly.
Tensor ensemble_infer(const Tensor& volume, std::vector<EnsembleMember> members,
                      const std::array<int64_t, 3>& roi, double overlap,
                      Blend blend = Blend::uniform);

/// Threshold each channel, then resolve to discrete labels with precedence
/// ET -> 4, TC -> 1, WT -> 2.
data::SegmentationMask fuse_labels(const Tensor& probs, double threshold = 0.5,
                                   const std::array<double, 3>& spacing = {1.0, 1.0, 1.0});

}  // namespace swinseg::infer
