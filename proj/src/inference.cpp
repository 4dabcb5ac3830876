#include "swinseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "swinseg/ops.hpp"

namespace swinseg::infer {

Blend blend_from_name(const std::string& name) {
    if (name == "uniform") return Blend::uniform;
    if (name == "gaussian") return Blend::gaussian;
    throw std::invalid_argument("unknown blend mode '" + name + "'");
}

const char* blend_name(Blend b) { return b == Blend::uniform ? "uniform" : "gaussian"; }

SlidingWindowPlan plan_tiles(const std::array<int64_t, 3>& extents,
                             const std::array<int64_t, 3>& roi, double overlap, Blend blend) {
    if (overlap < 0.0 || overlap >= 0.999)
        throw std::invalid_argument("overlap must be in [0, 0.999), got " +
                                    std::to_string(overlap));
    SlidingWindowPlan plan;
    plan.roi = roi;
    plan.overlap = overlap;
    plan.blend = blend;
    plan.extents = extents;
    std::array<std::vector<int64_t>, 3> axis_origins;
    for (int a = 0; a < 3; ++a) {
        if (roi[a] < 1 || roi[a] > extents[a])
            throw std::invalid_argument("roi does not fit volume extents");
        plan.step[a] = std::max<int64_t>(
            1, static_cast<int64_t>(std::floor(static_cast<double>(roi[a]) * (1.0 - overlap))));
        const int64_t last = extents[a] - roi[a];
        for (int64_t o = 0;; o += plan.step[a]) {
            if (o >= last) {
                axis_origins[a].push_back(last);
                break;
            }
            axis_origins[a].push_back(o);
        }
    }
    for (int64_t i : axis_origins[0])
        for (int64_t j : axis_origins[1])
            for (int64_t k : axis_origins[2]) plan.origins.push_back({i, j, k});
    return plan;
}

namespace {

std::vector<double> axis_gaussian(int64_t n) {
    // center (n-1)/2, sigma n/8
    std::vector<double> w(static_cast<size_t>(n));
    const double c = static_cast<double>(n - 1) / 2.0;
    const double sigma = static_cast<double>(n) / 8.0;
    for (int64_t i = 0; i < n; ++i) {
        const double z = (static_cast<double>(i) - c) / sigma;
        w[static_cast<size_t>(i)] = std::exp(-0.5 * z * z);
    }
    return w;
}

}  // namespace

Tensor sliding_window_infer(const Tensor& volume, const TileFn& tile_probs,
                            const std::array<int64_t, 3>& roi, double overlap, Blend blend) {
    if (volume.rank() != 4)
        throw std::invalid_argument("sliding_window_infer: expected (S, H, W, D)");
    const std::array<int64_t, 3> orig{volume.shape()[1], volume.shape()[2], volume.shape()[3]};
    std::array<int64_t, 3> padded{std::max(orig[0], roi[0]), std::max(orig[1], roi[1]),
                                  std::max(orig[2], roi[2])};
    Tensor vol = volume;
    std::array<int64_t, 3> pad_lo{};
    if (padded != orig) {
        for (int a = 0; a < 3; ++a) pad_lo[a] = (padded[a] - orig[a]) / 2;
        vol = ops::pad(volume, {0, pad_lo[0], pad_lo[1], pad_lo[2]},
                       {0, padded[0] - orig[0] - pad_lo[0], padded[1] - orig[1] - pad_lo[1],
                        padded[2] - orig[2] - pad_lo[2]});
    }
    SlidingWindowPlan plan = plan_tiles(padded, roi, overlap, blend);

    std::vector<double> tile_weight;  // (roi) blend weights
    const int64_t tile_voxels = roi[0] * roi[1] * roi[2];
    tile_weight.assign(static_cast<size_t>(tile_voxels), 1.0);
    if (blend == Blend::gaussian) {
        const auto wh = axis_gaussian(roi[0]), ww = axis_gaussian(roi[1]),
                   wd = axis_gaussian(roi[2]);
        int64_t p = 0;
        for (int64_t i = 0; i < roi[0]; ++i)
            for (int64_t j = 0; j < roi[1]; ++j)
                for (int64_t k = 0; k < roi[2]; ++k, ++p)
                    tile_weight[p] = wh[i] * ww[j] * wd[k];
    }

    int64_t out_channels = -1;
    std::vector<double> acc;     // (C, padded)
    std::vector<double> weight;  // (padded)
    const int64_t voxels = padded[0] * padded[1] * padded[2];
    weight.assign(static_cast<size_t>(voxels), 0.0);

    for (const auto& origin : plan.origins) {
        Tensor tile = ops::slice(vol, {0, origin[0], origin[1], origin[2]},
                                 {volume.shape()[0], origin[0] + roi[0], origin[1] + roi[1],
                                  origin[2] + roi[2]});
        Tensor probs;
        {
            NoGrad ng;
            probs = tile_probs(tile);
        }
        if (probs.rank() != 4 || probs.shape()[1] != roi[0] || probs.shape()[2] != roi[1] ||
            probs.shape()[3] != roi[2])
            throw std::runtime_error("tile output shape " + shape_str(probs.shape()) +
                                     " does not match roi");
        if (!probs.all_finite())
            throw NumericError("non-finite tile output at origin [" + std::to_string(origin[0]) +
                               ", " + std::to_string(origin[1]) + ", " +
                               std::to_string(origin[2]) + "]");
        if (out_channels < 0) {
            out_channels = probs.shape()[0];
            acc.assign(static_cast<size_t>(out_channels * voxels), 0.0);
        } else if (probs.shape()[0] != out_channels) {
            throw std::runtime_error("tile output channel count changed between tiles");
        }
        dispatch(probs.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pp = probs.data<T>();
            for (int64_t c = 0; c < out_channels; ++c)
                for (int64_t i = 0; i < roi[0]; ++i)
                    for (int64_t j = 0; j < roi[1]; ++j) {
                        const T* src = pp + ((c * roi[0] + i) * roi[1] + j) * roi[2];
                        const double* tw = tile_weight.data() + (i * roi[1] + j) * roi[2];
                        double* dst = acc.data() + c * voxels +
                                      ((origin[0] + i) * padded[1] + origin[1] + j) * padded[2] +
                                      origin[2];
                        for (int64_t k = 0; k < roi[2]; ++k)
                            dst[k] += tw[k] * static_cast<double>(src[k]);
                    }
            for (int64_t i = 0; i < roi[0]; ++i)
                for (int64_t j = 0; j < roi[1]; ++j) {
                    const double* tw = tile_weight.data() + (i * roi[1] + j) * roi[2];
                    double* dst = weight.data() +
                                  ((origin[0] + i) * padded[1] + origin[1] + j) * padded[2] +
                                  origin[2];
                    for (int64_t k = 0; k < roi[2]; ++k) dst[k] += tw[k];
                }
        });
    }

    Tensor out = Tensor::uninit({out_channels, orig[0], orig[1], orig[2]}, volume.dtype());
    dispatch(volume.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        int64_t p = 0;
        for (int64_t c = 0; c < out_channels; ++c)
            for (int64_t i = 0; i < orig[0]; ++i)
                for (int64_t j = 0; j < orig[1]; ++j)
                    for (int64_t k = 0; k < orig[2]; ++k, ++p) {
                        const int64_t src = ((i + pad_lo[0]) * padded[1] + j + pad_lo[1]) *
                                                padded[2] +
                                            k + pad_lo[2];
                        po[p] = static_cast<T>(acc[c * voxels + src] / weight[src]);
                    }
    });
    return out;
}

TileFn model_tile_fn(std::shared_ptr<const nn::SwinUnetr> model) {
    return [model](const Tensor& tile) { return ops::sigmoid(model->forward(tile)); };
}

Tensor ensemble_infer(const Tensor& volume, std::vector<EnsembleMember> members,
                      const std::array<int64_t, 3>& roi, double overlap, Blend blend) {
    if (members.empty()) throw std::invalid_argument("ensemble_infer: no members");
    std::sort(members.begin(), members.end(),
              [](const EnsembleMember& a, const EnsembleMember& b) { return a.path < b.path; });

    // group members whose parameters are bit-identical; each distinct model
    // runs once and is weighted by its multiplicity
    auto same_params = [](const nn::SwinUnetr& a, const nn::SwinUnetr& b) {
        const auto& pa = a.parameters();
        const auto& pb = b.parameters();
        if (pa.size() != pb.size()) return false;
        for (size_t i = 0; i < pa.size(); ++i)
            if (pa[i].name != pb[i].name || !pa[i].tensor.same_bits(pb[i].tensor)) return false;
        return true;
    };
    std::vector<std::pair<const EnsembleMember*, int64_t>> groups;
    for (const auto& m : members) {
        bool merged = false;
        for (auto& [rep, count] : groups)
            if (same_params(*rep->model, *m.model)) {
                ++count;
                merged = true;
                break;
            }
        if (!merged) groups.emplace_back(&m, 1);
    }

    Tensor first = sliding_window_infer(volume, model_tile_fn(groups[0].first->model), roi,
                                        overlap, blend);
    if (groups.size() == 1) return first;  // includes the N-duplicates case

    const double n = static_cast<double>(members.size());
    Tensor out = ops::scale(first, static_cast<double>(groups[0].second) / n);
    for (size_t gi = 1; gi < groups.size(); ++gi) {
        Tensor probs = sliding_window_infer(volume, model_tile_fn(groups[gi].first->model), roi,
                                            overlap, blend);
        for (int a = 0; a < 4; ++a)
            if (probs.shape()[a] != out.shape()[a])
                throw std::runtime_error("ensemble member output shape disagreement: " +
                                         shape_str(probs.shape()) + " vs " +
                                         shape_str(out.shape()));
        out = ops::add(out, ops::scale(probs, static_cast<double>(groups[gi].second) / n));
    }
    return out;
}

data::SegmentationMask fuse_labels(const Tensor& probs, double threshold,
                                   const std::array<double, 3>& spacing) {
    if (probs.rank() != 4 || probs.shape()[0] != 3)
        throw std::invalid_argument("fuse_labels: expected (3, H, W, D) probabilities");
    data::SegmentationMask mask;
    mask.channel_form = false;
    mask.shape = {probs.shape()[1], probs.shape()[2], probs.shape()[3]};
    mask.spacing = spacing;
    const int64_t n = mask.voxels();
    mask.values.resize(static_cast<size_t>(n));
    dispatch(probs.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* et = probs.data<T>();
        const T* wt = et + n;
        const T* tc = wt + n;
        const T thr = static_cast<T>(threshold);
        for (int64_t i = 0; i < n; ++i) {
            uint8_t label = 0;
            if (et[i] > thr) label = 4;
            else if (tc[i] > thr) label = 1;
            else if (wt[i] > thr) label = 2;
            mask.values[static_cast<size_t>(i)] = label;
        }
    });
    return mask;
}

}  // namespace swinseg::infer
