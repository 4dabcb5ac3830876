#include "swinseg/loss_metrics.hpp"

#include <algorithm>
#include <cmath>

#include "swinseg/ops.hpp"

namespace swinseg::metrics {

Tensor soft_dice_loss(const Tensor& probs, const Tensor& target, double eps) {
    if (probs.shape() != target.shape())
        throw std::invalid_argument("soft_dice_loss: shape mismatch " + shape_str(probs.shape()) +
                                    " vs " + shape_str(target.shape()));
    if (probs.rank() < 1) throw std::invalid_argument("soft_dice_loss: rank >= 1 required");
    const int64_t classes = probs.shape()[0];
    Tensor y = ops::reshape(probs, {classes, -1});
    Tensor g = ops::reshape(target, {classes, -1});
    Tensor inter = ops::sum_axis(ops::mul(g, y), 1);
    Tensor denom = ops::add(ops::sum_axis(ops::mul(g, g), 1), ops::sum_axis(ops::mul(y, y), 1));
    Tensor dice = ops::div(ops::add_scalar(ops::scale(inter, 2.0), eps),
                           ops::add_scalar(denom, eps));
    return ops::add_scalar(ops::scale(ops::sum(dice), -1.0 / static_cast<double>(classes)), 1.0);
}

double dice_score(std::span<const uint8_t> pred, std::span<const uint8_t> gt) {
    if (pred.size() != gt.size())
        throw std::invalid_argument("dice_score: mask sizes differ");
    int64_t p = 0, g = 0, both = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] != 0, b = gt[i] != 0;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::array<int64_t, 3>> boundary_voxels(std::span<const uint8_t> mask,
                                                    const std::array<int64_t, 3>& shape) {
    const int64_t h = shape[0], w = shape[1], d = shape[2];
    if (static_cast<int64_t>(mask.size()) != h * w * d)
        throw std::invalid_argument("boundary_voxels: mask size does not match shape");
    auto at = [&](int64_t i, int64_t j, int64_t k) { return mask[(i * w + j) * d + k] != 0; };
    std::vector<std::array<int64_t, 3>> out;
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
            for (int64_t k = 0; k < d; ++k) {
                if (!at(i, j, k)) continue;
                const bool edge = i == 0 || i == h - 1 || j == 0 || j == w - 1 || k == 0 ||
                                  k == d - 1;
                if (edge || !at(i - 1, j, k) || !at(i + 1, j, k) || !at(i, j - 1, k) ||
                    !at(i, j + 1, k) || !at(i, j, k - 1) || !at(i, j, k + 1))
                    out.push_back({i, j, k});
            }
    return out;
}

double percentile_nearest_rank(std::vector<double> values, double p) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const auto n = static_cast<int64_t>(values.size());
    int64_t rank = static_cast<int64_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
    rank = std::clamp<int64_t>(rank, 1, n);
    return values[rank - 1];
}

namespace {

struct KdTree3 {
    // median-split over an index array; axis cycles with depth
    explicit KdTree3(std::vector<std::array<double, 3>> pts) : pts_(std::move(pts)) {
        idx_.resize(pts_.size());
        for (size_t i = 0; i < idx_.size(); ++i) idx_[i] = i;
        build(0, static_cast<int64_t>(idx_.size()), 0);
    }

    double min_sqdist(const std::array<double, 3>& q) const {
        double best = std::numeric_limits<double>::infinity();
        search(q, 0, static_cast<int64_t>(idx_.size()), 0, best);
        return best;
    }

private:
    void build(int64_t lo, int64_t hi, int axis) {
        if (hi - lo <= 1) return;
        const int64_t mid = (lo + hi) / 2;
        std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                         [&](size_t a, size_t b) { return pts_[a][axis] < pts_[b][axis]; });
        build(lo, mid, (axis + 1) % 3);
        build(mid + 1, hi, (axis + 1) % 3);
    }

    static double sqdist(const std::array<double, 3>& a, const std::array<double, 3>& b) {
        const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
        return dx * dx + dy * dy + dz * dz;
    }

    void search(const std::array<double, 3>& q, int64_t lo, int64_t hi, int axis,
                double& best) const {
        if (hi <= lo) return;
        const int64_t mid = (lo + hi) / 2;
        const auto& p = pts_[idx_[mid]];
        best = std::min(best, sqdist(q, p));
        const double diff = q[axis] - p[axis];
        const int next = (axis + 1) % 3;
        if (diff < 0) {
            search(q, lo, mid, next, best);
            if (diff * diff < best) search(q, mid + 1, hi, next, best);
        } else {
            search(q, mid + 1, hi, next, best);
            if (diff * diff < best) search(q, lo, mid, next, best);
        }
    }

    std::vector<std::array<double, 3>> pts_;
    std::vector<size_t> idx_;
};

std::vector<std::array<double, 3>> scaled_points(const std::vector<std::array<int64_t, 3>>& v,
                                                 const std::array<double, 3>& spacing) {
    std::vector<std::array<double, 3>> out(v.size());
    for (size_t i = 0; i < v.size(); ++i)
        out[i] = {static_cast<double>(v[i][0]) * spacing[0],
                  static_cast<double>(v[i][1]) * spacing[1],
                  static_cast<double>(v[i][2]) * spacing[2]};
    return out;
}

double directed_distance(const std::vector<std::array<double, 3>>& from, const KdTree3& to_tree,
                         double percentile) {
    std::vector<double> dists(from.size());
    for (size_t i = 0; i < from.size(); ++i) dists[i] = std::sqrt(to_tree.min_sqdist(from[i]));
    return percentile_nearest_rank(std::move(dists), percentile);
}

}  // namespace

std::optional<double> hausdorff_distance(std::span<const uint8_t> pred,
                                         std::span<const uint8_t> gt,
                                         const std::array<int64_t, 3>& shape,
                                         const std::array<double, 3>& spacing,
                                         double percentile) {
    if (percentile <= 0.0 || percentile > 100.0)
        throw std::invalid_argument("hausdorff_distance: percentile must be in (0, 100]");
    const auto pb = boundary_voxels(pred, shape);
    const auto gb = boundary_voxels(gt, shape);
    if (pb.empty() || gb.empty()) return std::nullopt;
    const auto pp = scaled_points(pb, spacing);
    const auto gp = scaled_points(gb, spacing);
    KdTree3 ptree(pp), gtree(gp);
    const double d_pg = directed_distance(pp, gtree, percentile);
    const double d_gp = directed_distance(gp, ptree, percentile);
    return std::max(d_pg, d_gp);
}

}  // namespace swinseg::metrics
