#pragma once

#include <array>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace swinseg::data {

using Extents = std::array<int64_t, 3>;

/// Multi-channel 3D image, channel-major then row-major (H, W, D) storage.
struct Volume {
    int64_t channels = 0;
    Extents shape{};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<float> values;
    std::vector<std::string> channel_names;

    int64_t voxels() const { return shape[0] * shape[1] * shape[2]; }
    float* channel(int64_t c) { return values.data() + c * voxels(); }
    const float* channel(int64_t c) const { return values.data() + c * voxels(); }
};

/// Ground-truth segmentation: either a discrete label map {0,1,2,4} or three
/// binary channels in the fixed order (ET, WT, TC).
struct SegmentationMask {
    bool channel_form = false;
    Extents shape{};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<uint8_t> values;  // (H,W,D) or (3,H,W,D)

    int64_t voxels() const { return shape[0] * shape[1] * shape[2]; }
    uint8_t* channel(int64_t c) { return values.data() + c * voxels(); }
    const uint8_t* channel(int64_t c) const { return values.data() + c * voxels(); }
};

// SVOL v1 container: u32-LE length prefix, UTF-8 JSON header, then raw
// little-endian payload.
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);
void save_mask(const SegmentationMask& m, const std::string& path);
SegmentationMask load_mask(const std::string& path);

struct ManifestCase {
    std::string id, image, mask;
};

struct DatasetManifest {
    std::vector<ManifestCase> cases;
    std::map<std::string, int> folds;

    std::vector<std::string> train_ids(int fold) const;
    std::vector<std::string> val_ids(int fold) const;
    const ManifestCase& case_by_id(const std::string& id) const;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);

/// Deterministic k-fold assignment: seeded shuffle, fold i = i-th contiguous
/// chunk; remainder cases go to the lowest-index folds.
void split_folds(DatasetManifest& manifest, int k, uint64_t seed);

/// Per channel: mean/std over non-zero voxels only, applied to non-zero
/// voxels only (population std). All-zero channels pass through unchanged.
Volume normalize_nonzero(const Volume& v);

struct AugmentationConfig {
    double flip_prob = 0.5;
    double intensity_shift = 0.1;   // additive, uniform in (-shift, +shift)
    double scale_low = 0.9, scale_high = 1.1;
};

/// Identical random crop of image and mask; zero-pads (centered) first when
/// an extent is smaller than the crop.
std::pair<Volume, SegmentationMask> random_crop(const Volume& v, const SegmentationMask& m,
                                                const Extents& crop, std::mt19937_64& rng);

/// Fixed order: per-axis mirror flips (image and mask together), then
/// per-channel intensity shift, then per-channel intensity scale.
std::pair<Volume, SegmentationMask> augment(const Volume& v, const SegmentationMask& m,
                                            const AugmentationConfig& cfg, std::mt19937_64& rng);

struct ChannelizeResult {
    SegmentationMask mask;          // channel form
    int64_t nesting_violations = 0; // only set by channels_to_labels
};

/// WT = {1,2,4}, TC = {1,4}, ET = {4}; channels ordered (ET, WT, TC).
SegmentationMask labels_to_channels(const SegmentationMask& discrete);
/// Inverse map; nesting violations resolved by precedence ET > TC > WT and
/// counted in the result.
ChannelizeResult channels_to_labels(const SegmentationMask& channels);

}  // namespace swinseg::data
