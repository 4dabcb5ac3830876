#include "swinseg/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <sstream>

#include "swinseg/checkpoint.hpp"
#include "swinseg/gradcheck.hpp"
#include "swinseg/inference.hpp"
#include "swinseg/loss_metrics.hpp"
#include "swinseg/ops.hpp"
#include "swinseg/trainer.hpp"
#include "swinseg/volume.hpp"

namespace swinseg::verify {

namespace fs = std::filesystem;

std::vector<double> reference_layer_norm(const std::vector<double>& x, int64_t rows,
                                         int64_t width, const std::vector<double>& gamma,
                                         const std::vector<double>& beta, double eps) {
    std::vector<double> y(x.size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = x.data() + r * width;
        double* dst = y.data() + r * width;
        double mean = 0.0;
        for (int64_t j = 0; j < width; ++j) mean += src[j];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (int64_t j = 0; j < width; ++j) var += (src[j] - mean) * (src[j] - mean);
        var /= static_cast<double>(width);
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < width; ++j)
            dst[j] = (src[j] - mean) * rstd * gamma[j] + beta[j];
    }
    return y;
}

std::vector<double> reference_attention(const std::vector<double>& tokens, int64_t t, int64_t c,
                                        int64_t heads, const std::vector<double>& qkv_w,
                                        const std::vector<double>& qkv_b,
                                        const std::vector<double>& proj_w,
                                        const std::vector<double>& proj_b,
                                        const std::vector<double>& mask,
                                        const std::vector<double>& bias) {
    const int64_t dh = c / heads;
    std::vector<double> q(t * c), k(t * c), v(t * c);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t o = 0; o < 3 * c; ++o) {
            double acc = qkv_b[o];
            for (int64_t j = 0; j < c; ++j) acc += qkv_w[o * c + j] * tokens[i * c + j];
            if (o < c) q[i * c + o] = acc;
            else if (o < 2 * c) k[i * c + (o - c)] = acc;
            else v[i * c + (o - 2 * c)] = acc;
        }
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> ctx(t * c, 0.0);
    std::vector<double> logits(t);
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < t; ++i) {
            for (int64_t j = 0; j < t; ++j) {
                double acc = 0.0;
                for (int64_t d = 0; d < dh; ++d)
                    acc += q[i * c + h * dh + d] * k[j * c + h * dh + d];
                acc *= scl;
                if (!bias.empty()) acc += bias[(h * t + i) * t + j];
                if (!mask.empty()) acc += mask[i * t + j];
                logits[j] = acc;
            }
            double mx = *std::max_element(logits.begin(), logits.end());
            double denom = 0.0;
            for (int64_t j = 0; j < t; ++j) {
                logits[j] = std::exp(logits[j] - mx);
                denom += logits[j];
            }
            for (int64_t j = 0; j < t; ++j) {
                const double p = logits[j] / denom;
                for (int64_t d = 0; d < dh; ++d)
                    ctx[i * c + h * dh + d] += p * v[j * c + h * dh + d];
            }
        }
    }
    std::vector<double> out(t * c);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t o = 0; o < c; ++o) {
            double acc = proj_b[o];
            for (int64_t j = 0; j < c; ++j) acc += proj_w[o * c + j] * ctx[i * c + j];
            out[i * c + o] = acc;
        }
    return out;
}

std::vector<double> reference_conv3d(const std::vector<double>& x,
                                     const std::vector<int64_t>& xs,
                                     const std::vector<double>& w,
                                     const std::vector<int64_t>& ws,
                                     const std::vector<double>& bias, int64_t stride,
                                     int64_t padding) {
    const int64_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3], d = xs[4];
    const int64_t cout = ws[0], kh = ws[2], kw = ws[3], kd = ws[4];
    const int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const int64_t ow = (wd + 2 * padding - kw) / stride + 1;
    const int64_t od = (d + 2 * padding - kd) / stride + 1;
    std::vector<double> out(n * cout * oh * ow * od, 0.0);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t i = 0; i < oh; ++i)
                for (int64_t j = 0; j < ow; ++j)
                    for (int64_t l = 0; l < od; ++l) {
                        double acc = bias.empty() ? 0.0 : bias[co];
                        for (int64_t ci = 0; ci < cin; ++ci)
                            for (int64_t a = 0; a < kh; ++a)
                                for (int64_t bb = 0; bb < kw; ++bb)
                                    for (int64_t cc = 0; cc < kd; ++cc) {
                                        const int64_t ih = i * stride - padding + a;
                                        const int64_t iw = j * stride - padding + bb;
                                        const int64_t id = l * stride - padding + cc;
                                        if (ih < 0 || ih >= h || iw < 0 || iw >= wd || id < 0 ||
                                            id >= d)
                                            continue;
                                        acc += x[(((b * cin + ci) * h + ih) * wd + iw) * d + id] *
                                               w[(((co * cin + ci) * kh + a) * kw + bb) * kd + cc];
                                    }
                        out[(((b * cout + co) * oh + i) * ow + j) * od + l] = acc;
                    }
    return out;
}

std::vector<double> reference_conv_transpose3d(const std::vector<double>& x,
                                               const std::vector<int64_t>& xs,
                                               const std::vector<double>& w,
                                               const std::vector<int64_t>& ws,
                                               const std::vector<double>& bias, int64_t stride,
                                               int64_t padding) {
    const int64_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3], d = xs[4];
    const int64_t cout = ws[1], kh = ws[2], kw = ws[3], kd = ws[4];
    const int64_t oh = (h - 1) * stride + kh - 2 * padding;
    const int64_t ow = (wd - 1) * stride + kw - 2 * padding;
    const int64_t od = (d - 1) * stride + kd - 2 * padding;
    std::vector<double> out(n * cout * oh * ow * od, 0.0);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < wd; ++j)
                    for (int64_t l = 0; l < d; ++l) {
                        const double xv = x[(((b * cin + ci) * h + i) * wd + j) * d + l];
                        for (int64_t co = 0; co < cout; ++co)
                            for (int64_t a = 0; a < kh; ++a)
                                for (int64_t bb = 0; bb < kw; ++bb)
                                    for (int64_t cc = 0; cc < kd; ++cc) {
                                        const int64_t o1 = i * stride + a - padding;
                                        const int64_t o2 = j * stride + bb - padding;
                                        const int64_t o3 = l * stride + cc - padding;
                                        if (o1 < 0 || o1 >= oh || o2 < 0 || o2 >= ow || o3 < 0 ||
                                            o3 >= od)
                                            continue;
                                        out[(((b * cout + co) * oh + o1) * ow + o2) * od + o3] +=
                                            xv *
                                            w[(((ci * cout + co) * kh + a) * kw + bb) * kd + cc];
                                    }
                    }
    if (!bias.empty())
        for (int64_t b = 0; b < n; ++b)
            for (int64_t co = 0; co < cout; ++co)
                for (int64_t sp = 0; sp < oh * ow * od; ++sp)
                    out[(b * cout + co) * oh * ow * od + sp] += bias[co];
    return out;
}

std::optional<double> reference_hausdorff(std::span<const uint8_t> pred,
                                          std::span<const uint8_t> gt,
                                          const std::array<int64_t, 3>& shape,
                                          const std::array<double, 3>& spacing,
                                          double percentile) {
    // own boundary extraction: foreground with a 6-neighbour background or on
    // the volume edge
    auto boundary = [&](std::span<const uint8_t> m) {
        std::vector<std::array<double, 3>> pts;
        const int64_t h = shape[0], w = shape[1], d = shape[2];
        auto at = [&](int64_t i, int64_t j, int64_t k) {
            if (i < 0 || i >= h || j < 0 || j >= w || k < 0 || k >= d) return false;
            return m[(i * w + j) * d + k] != 0;
        };
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
                for (int64_t k = 0; k < d; ++k) {
                    if (!at(i, j, k)) continue;
                    if (!at(i - 1, j, k) || !at(i + 1, j, k) || !at(i, j - 1, k) ||
                        !at(i, j + 1, k) || !at(i, j, k - 1) || !at(i, j, k + 1))
                        pts.push_back({static_cast<double>(i) * spacing[0],
                                       static_cast<double>(j) * spacing[1],
                                       static_cast<double>(k) * spacing[2]});
                }
        return pts;
    };
    const auto pa = boundary(pred), pb = boundary(gt);
    if (pa.empty() || pb.empty()) return std::nullopt;
    auto directed = [&](const std::vector<std::array<double, 3>>& from,
                        const std::vector<std::array<double, 3>>& to) {
        std::vector<double> mins(from.size());
        for (size_t i = 0; i < from.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& b : to) {
                const double dx = from[i][0] - b[0], dy = from[i][1] - b[1],
                             dz = from[i][2] - b[2];
                best = std::min(best, dx * dx + dy * dy + dz * dz);
            }
            mins[i] = std::sqrt(best);
        }
        return metrics::percentile_nearest_rank(std::move(mins), percentile);
    };
    return std::max(directed(pa, pb), directed(pb, pa));
}

namespace {

std::vector<double> tensor_doubles(const Tensor& t) {
    std::vector<double> out(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) out[static_cast<size_t>(i)] = t.at(i);
    return out;
}

double max_abs_diff(const Tensor& t, const std::vector<double>& ref) {
    double m = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i)
        m = std::max(m, std::abs(t.at(i) - ref[static_cast<size_t>(i)]));
    return m;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

CheckResult make_result(const std::string& name, bool passed, const std::string& detail) {
    return {name, passed, detail};
}

int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

nn::SwinBlockP random_block(const win::Extents& grid, int64_t m, int64_t heads, int64_t width,
                            int64_t shift, std::mt19937_64& rng) {
    nn::SwinBlockP blk;
    blk.heads = heads;
    blk.m = m;
    blk.shift = shift;
    blk.grid = grid;
    blk.ln1.gamma = Tensor::rand_uniform({width}, 0.5, 1.5, rng);
    blk.ln1.beta = Tensor::rand_uniform({width}, -0.5, 0.5, rng);
    blk.qkv.w = Tensor::rand_uniform({3 * width, width}, -0.5, 0.5, rng);
    blk.qkv.b = Tensor::rand_uniform({3 * width}, -0.2, 0.2, rng);
    blk.proj.w = Tensor::rand_uniform({width, width}, -0.5, 0.5, rng);
    blk.proj.b = Tensor::rand_uniform({width}, -0.2, 0.2, rng);
    if (shift > 0) {
        const win::Extents padded{round_up(grid[0], m), round_up(grid[1], m),
                                  round_up(grid[2], m)};
        blk.mask = win::compute_shift_mask(padded, m, shift, grid, DType::f32);
    }
    return blk;
}

}  // namespace

CheckResult wmsa_oracle_case(int64_t m, int64_t heads, int64_t width, uint64_t seed) {
    const std::string name = "wmsa_dense_oracle_m" + std::to_string(m) + "_seed" +
                             std::to_string(seed);
    auto rng = derived_rng(seed, {0x776d7361, static_cast<uint64_t>(m)});
    const win::Extents grid{m, m, m};
    Tensor tokens = Tensor::rand_uniform({m, m, m, width}, -1.0, 1.0, rng);
    nn::SwinBlockP blk = random_block(grid, m, heads, width, 0, rng);

    Tensor out;
    {
        NoGrad ng;
        out = nn::attention_pipeline(tokens, blk);
    }
    const int64_t t = m * m * m;
    auto normed = reference_layer_norm(tensor_doubles(tokens), t, width,
                                       tensor_doubles(blk.ln1.gamma),
                                       tensor_doubles(blk.ln1.beta));
    auto ref = reference_attention(normed, t, width, heads, tensor_doubles(blk.qkv.w),
                                   tensor_doubles(blk.qkv.b), tensor_doubles(blk.proj.w),
                                   tensor_doubles(blk.proj.b));
    const double diff = max_abs_diff(out, ref);
    return make_result(name, diff < 1e-5, "max abs diff " + fmt(diff));
}

CheckResult swmsa_oracle_case(const win::Extents& grid, int64_t m, int64_t heads, int64_t width,
                              uint64_t seed, int64_t shift_override) {
    const int64_t s_demanded = m / 2;
    const int64_t s_block = shift_override >= 0 ? shift_override : s_demanded;
    std::string name = "swmsa_gather_oracle_grid" + std::to_string(grid[0]) +
                       std::to_string(grid[1]) + std::to_string(grid[2]) + "_m" +
                       std::to_string(m) + "_seed" + std::to_string(seed);
    if (shift_override >= 0) name += "_injected_shift" + std::to_string(shift_override);

    auto rng = derived_rng(seed, {0x73776d7361, static_cast<uint64_t>(m)});
    Tensor tokens = Tensor::rand_uniform({grid[0], grid[1], grid[2], width}, -1.0, 1.0, rng);
    nn::SwinBlockP blk = random_block(grid, m, heads, width, s_block, rng);

    Tensor out;
    {
        NoGrad ng;
        out = nn::attention_pipeline(tokens, blk);
    }

    // oracle: layer norm, zero-pad, then per shifted window attend within
    // each pre-shift region separately, gathering straight from the
    // unshifted grid
    const win::Extents e{round_up(grid[0], m), round_up(grid[1], m), round_up(grid[2], m)};
    const int64_t real_tokens = grid[0] * grid[1] * grid[2];
    auto normed = reference_layer_norm(tensor_doubles(tokens), real_tokens, width,
                                       tensor_doubles(blk.ln1.gamma),
                                       tensor_doubles(blk.ln1.beta));
    std::vector<double> padded_grid(e[0] * e[1] * e[2] * width, 0.0);
    for (int64_t i = 0; i < grid[0]; ++i)
        for (int64_t j = 0; j < grid[1]; ++j)
            for (int64_t k = 0; k < grid[2]; ++k)
                std::copy_n(normed.data() + ((i * grid[1] + j) * grid[2] + k) * width, width,
                            padded_grid.data() + ((i * e[1] + j) * e[2] + k) * width);

    auto segment = [&](int64_t x, int64_t extent) -> int {
        if (x < extent - m) return 0;
        if (x < extent - s_demanded) return 1;
        return 2;
    };
    auto label = [&](int64_t i, int64_t j, int64_t k) -> int {
        if (i >= grid[0] || j >= grid[1] || k >= grid[2]) return 27;
        return (segment(i, e[0]) * 3 + segment(j, e[1])) * 3 + segment(k, e[2]);
    };

    std::vector<double> result(padded_grid.size(), 0.0);
    const auto qkv_w = tensor_doubles(blk.qkv.w), qkv_b = tensor_doubles(blk.qkv.b);
    const auto proj_w = tensor_doubles(blk.proj.w), proj_b = tensor_doubles(blk.proj.b);
    for (int64_t wi = 0; wi < e[0] / m; ++wi)
        for (int64_t wj = 0; wj < e[1] / m; ++wj)
            for (int64_t wk = 0; wk < e[2] / m; ++wk) {
                // original coordinates of this shifted window's tokens
                std::vector<std::array<int64_t, 3>> orig;
                for (int64_t a = 0; a < m; ++a)
                    for (int64_t b = 0; b < m; ++b)
                        for (int64_t c = 0; c < m; ++c)
                            orig.push_back({(wi * m + a + s_demanded) % e[0],
                                            (wj * m + b + s_demanded) % e[1],
                                            (wk * m + c + s_demanded) % e[2]});
                std::map<int, std::vector<size_t>> groups;
                for (size_t idx = 0; idx < orig.size(); ++idx)
                    groups[label(orig[idx][0], orig[idx][1], orig[idx][2])].push_back(idx);
                for (const auto& [lab, members] : groups) {
                    std::vector<double> sub(members.size() * width);
                    for (size_t r = 0; r < members.size(); ++r) {
                        const auto& p = orig[members[r]];
                        std::copy_n(padded_grid.data() + ((p[0] * e[1] + p[1]) * e[2] + p[2]) * width,
                                    width, sub.data() + r * width);
                    }
                    auto attn = reference_attention(sub, static_cast<int64_t>(members.size()),
                                                    width, heads, qkv_w, qkv_b, proj_w, proj_b);
                    for (size_t r = 0; r < members.size(); ++r) {
                        const auto& p = orig[members[r]];
                        std::copy_n(attn.data() + r * width, width,
                                    result.data() + ((p[0] * e[1] + p[1]) * e[2] + p[2]) * width);
                    }
                }
            }

    double diff = 0.0;
    for (int64_t i = 0; i < grid[0]; ++i)
        for (int64_t j = 0; j < grid[1]; ++j)
            for (int64_t k = 0; k < grid[2]; ++k)
                for (int64_t c = 0; c < width; ++c) {
                    const double got =
                        out.at({i, j, k, c});
                    const double want = result[((i * e[1] + j) * e[2] + k) * width + c];
                    diff = std::max(diff, std::abs(got - want));
                }
    return make_result(name, diff < 1e-5, "max abs diff " + fmt(diff));
}

// ---------------------------------------------------------------- suites --

namespace {

CheckResult fd_case(const std::string& name, const ScalarFn& f, const Tensor& x,
                    double tol = 1e-4, double eps = 1e-4, int64_t max_coords = -1) {
    try {
        const double err = finite_difference_check(f, x, eps, max_coords, 17);
        return make_result(name, err < tol, "max rel err " + fmt(err));
    } catch (const std::exception& e) {
        return make_result(name, false, e.what());
    }
}

Tensor rnd(std::vector<int64_t> shape, std::mt19937_64& rng, DType dt = DType::f64,
           double lo = -1.0, double hi = 1.0) {
    return Tensor::rand_uniform(std::move(shape), lo, hi, rng, dt);
}

}  // namespace

std::vector<CheckResult> gradcheck_suite() {
    std::vector<CheckResult> out;
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        auto rng = derived_rng(seed, {0x67726164});
        const std::string tag = "_s" + std::to_string(seed);

        {
            Tensor b = rnd({4, 2}, rng);
            out.push_back(fd_case("matmul_lhs" + tag,
                                  [&](const Tensor& x) {
                                      Tensor y = ops::matmul(x, b);
                                      return ops::sum(ops::mul(y, y));
                                  },
                                  rnd({3, 4}, rng)));
            Tensor a = rnd({2, 3, 4}, rng);
            out.push_back(fd_case("matmul_rhs_batched" + tag,
                                  [&](const Tensor& x) {
                                      Tensor y = ops::matmul(a, x);
                                      return ops::sum(ops::mul(y, y));
                                  },
                                  rnd({4, 2}, rng)));
        }
        {
            Tensor w = rnd({5}, rng);
            out.push_back(fd_case("softmax" + tag,
                                  [&](const Tensor& x) {
                                      return ops::sum(ops::mul(ops::softmax(x, 0), w));
                                  },
                                  rnd({5}, rng)));
        }
        {
            Tensor g = rnd({4}, rng, DType::f64, 0.5, 1.5), b = rnd({4}, rng);
            Tensor w = rnd({3, 4}, rng);
            Tensor x0 = rnd({3, 4}, rng);
            out.push_back(fd_case("layer_norm_x" + tag,
                                  [&](const Tensor& x) {
                                      return ops::sum(ops::mul(ops::layer_norm(x, g, b), w));
                                  },
                                  x0));
            out.push_back(fd_case("layer_norm_gamma" + tag,
                                  [&](const Tensor& gg) {
                                      return ops::sum(ops::mul(ops::layer_norm(x0, gg, b), w));
                                  },
                                  g));
        }
        {
            Tensor g = rnd({2}, rng, DType::f64, 0.5, 1.5), b = rnd({2}, rng);
            Tensor w = rnd({1, 2, 3, 3, 3}, rng);
            out.push_back(fd_case("instance_norm" + tag,
                                  [&](const Tensor& x) {
                                      return ops::sum(ops::mul(ops::instance_norm(x, g, b), w));
                                  },
                                  rnd({1, 2, 3, 3, 3}, rng)));
        }
        {
            Tensor x0 = rnd({1, 2, 4, 4, 4}, rng);
            Tensor w0 = rnd({3, 2, 3, 3, 3}, rng, DType::f64, -0.5, 0.5);
            Tensor b0 = rnd({3}, rng);
            Tensor ww = rnd({1, 3, 4, 4, 4}, rng);
            auto head = [&](const Tensor& y) { return ops::sum(ops::mul(y, ww)); };
            out.push_back(fd_case("conv3d_x" + tag,
                                  [&](const Tensor& x) { return head(ops::conv3d(x, w0, b0, 1, 1)); },
                                  x0));
            out.push_back(fd_case("conv3d_w" + tag,
                                  [&](const Tensor& w) { return head(ops::conv3d(x0, w, b0, 1, 1)); },
                                  w0));
            out.push_back(fd_case("conv3d_bias" + tag,
                                  [&](const Tensor& b) { return head(ops::conv3d(x0, w0, b, 1, 1)); },
                                  b0));
        }
        {
            Tensor x0 = rnd({1, 2, 3, 3, 3}, rng);
            Tensor w0 = rnd({2, 3, 2, 2, 2}, rng, DType::f64, -0.5, 0.5);
            Tensor b0 = rnd({3}, rng);
            Tensor ww = rnd({1, 3, 6, 6, 6}, rng);
            auto head = [&](const Tensor& y) { return ops::sum(ops::mul(y, ww)); };
            out.push_back(fd_case(
                "conv_transpose3d_x" + tag,
                [&](const Tensor& x) { return head(ops::conv_transpose3d(x, w0, b0, 2)); }, x0));
            out.push_back(fd_case(
                "conv_transpose3d_w" + tag,
                [&](const Tensor& w) { return head(ops::conv_transpose3d(x0, w, b0, 2)); }, w0));
        }
        {
            Tensor w = rnd({2, 5}, rng);
            auto head = [&](const Tensor& y) { return ops::sum(ops::mul(y, w)); };
            out.push_back(fd_case("gelu" + tag,
                                  [&](const Tensor& x) { return head(ops::gelu(x)); },
                                  rnd({2, 5}, rng)));
            out.push_back(fd_case("sigmoid" + tag,
                                  [&](const Tensor& x) { return head(ops::sigmoid(x)); },
                                  rnd({2, 5}, rng)));
            out.push_back(fd_case("leaky_relu" + tag,
                                  [&](const Tensor& x) { return head(ops::leaky_relu(x)); },
                                  rnd({2, 5}, rng)));
        }
        {
            Tensor b = rnd({2, 4}, rng, DType::f64, 0.5, 1.5);
            Tensor w = rnd({3, 2, 4}, rng);
            auto head = [&](const Tensor& y) { return ops::sum(ops::mul(y, w)); };
            out.push_back(fd_case("add_broadcast" + tag,
                                  [&](const Tensor& x) { return head(ops::add(x, b)); },
                                  rnd({3, 1, 4}, rng)));
            out.push_back(fd_case("mul_broadcast" + tag,
                                  [&](const Tensor& x) { return head(ops::mul(x, b)); },
                                  rnd({3, 1, 4}, rng)));
            out.push_back(fd_case("div_broadcast" + tag,
                                  [&](const Tensor& x) { return head(ops::div(x, b)); },
                                  rnd({3, 1, 4}, rng)));
        }
        {
            Tensor w = rnd({24}, rng);
            out.push_back(fd_case("reshape_permute_roll" + tag,
                                  [&](const Tensor& x) {
                                      Tensor y = ops::permute(x, {2, 0, 1});
                                      y = ops::roll(y, {1, 2, 3});
                                      y = ops::reshape(y, {24});
                                      return ops::sum(ops::mul(y, w));
                                  },
                                  rnd({2, 3, 4}, rng)));
            Tensor w2 = rnd({4, 5, 6}, rng);
            out.push_back(fd_case("pad_slice" + tag,
                                  [&](const Tensor& x) {
                                      Tensor y = ops::pad(x, {1, 0, 2}, {1, 2, 0});
                                      y = ops::slice(y, {0, 0, 0}, {4, 5, 6});
                                      return ops::sum(ops::mul(y, w2));
                                  },
                                  rnd({2, 3, 4}, rng)));
            Tensor other = rnd({2, 2}, rng);
            Tensor w3 = rnd({5, 2}, rng);
            out.push_back(fd_case("concat" + tag,
                                  [&](const Tensor& x) {
                                      Tensor y = ops::concat({x, other, x}, 0);
                                      // x used twice: fan-out accumulation
                                      Tensor yy = ops::slice(y, {0, 0}, {5, 2});
                                      return ops::sum(ops::mul(yy, w3));
                                  },
                                  rnd({2, 2}, rng)));
        }
        {
            Tensor w = rnd({4, 3}, rng);
            out.push_back(fd_case("embedding_rows" + tag,
                                  [&](const Tensor& table) {
                                      Tensor y = ops::embedding_rows(table, {0, 2, 2, 4});
                                      return ops::sum(ops::mul(y, w));
                                  },
                                  rnd({5, 3}, rng)));
        }
        {
            Tensor x0 = rnd({4, 3}, rng), w0 = rnd({5, 3}, rng), b0 = rnd({5}, rng);
            Tensor ww = rnd({4, 5}, rng);
            auto head = [&](const Tensor& y) { return ops::sum(ops::mul(y, ww)); };
            out.push_back(fd_case("linear_x" + tag,
                                  [&](const Tensor& x) { return head(ops::linear(x, w0, b0)); },
                                  x0));
            out.push_back(fd_case("linear_w" + tag,
                                  [&](const Tensor& w) { return head(ops::linear(x0, w, b0)); },
                                  w0));
        }
        {
            Tensor w = rnd({3}, rng);
            out.push_back(fd_case("sum_axis" + tag,
                                  [&](const Tensor& x) {
                                      return ops::sum(ops::mul(ops::sum_axis(x, 1), w));
                                  },
                                  rnd({3, 4}, rng)));
        }
        {
            auto grng = derived_rng(seed, {0x64696365});
            Tensor g = Tensor::zeros({2, 27}, DType::f64);
            for (int64_t i = 0; i < g.numel(); ++i)
                g.set(i, std::uniform_int_distribution<int>(0, 1)(grng));
            out.push_back(fd_case("soft_dice_loss" + tag,
                                  [&](const Tensor& x) {
                                      return metrics::soft_dice_loss(ops::sigmoid(x), g);
                                  },
                                  rnd({2, 27}, rng)));
        }
        {
            auto brng = derived_rng(seed, {0x626c6b});
            const win::Extents grid{4, 4, 4};
            nn::SwinBlockP blk;
            const int64_t width = 4;
            blk.heads = 2;
            blk.m = 2;
            blk.shift = 1;
            blk.grid = grid;
            blk.ln1.gamma = rnd({width}, brng, DType::f64, 0.5, 1.5);
            blk.ln1.beta = rnd({width}, brng);
            blk.qkv.w = rnd({3 * width, width}, brng, DType::f64, -0.5, 0.5);
            blk.qkv.b = rnd({3 * width}, brng);
            blk.proj.w = rnd({width, width}, brng, DType::f64, -0.5, 0.5);
            blk.proj.b = rnd({width}, brng);
            blk.bias_table = rnd({27, 2}, brng, DType::f64, -0.3, 0.3);
            blk.rel_index.resize(64);
            {
                // same construction as the model uses
                int64_t p = 0;
                std::vector<std::array<int64_t, 3>> cc;
                for (int64_t a = 0; a < 2; ++a)
                    for (int64_t b = 0; b < 2; ++b)
                        for (int64_t c = 0; c < 2; ++c) cc.push_back({a, b, c});
                for (int64_t i = 0; i < 8; ++i)
                    for (int64_t j = 0; j < 8; ++j, ++p)
                        blk.rel_index[p] = ((cc[i][0] - cc[j][0] + 1) * 3 +
                                            (cc[i][1] - cc[j][1] + 1)) * 3 +
                                           (cc[i][2] - cc[j][2] + 1);
            }
            blk.mask = win::compute_shift_mask(grid, 2, 1, grid, DType::f64);
            Tensor w = rnd({4, 4, 4, width}, brng);
            out.push_back(fd_case("attention_pipeline" + tag,
                                  [&](const Tensor& x) {
                                      return ops::sum(ops::mul(nn::attention_pipeline(x, blk), w));
                                  },
                                  rnd({4, 4, 4, width}, brng)));
        }
    }

    // end-to-end tiny model in float64: input gradient through every layer
    {
        nn::ModelConfig cfg = train::tiny_model_config({16, 16, 16}, DType::f64);
        nn::SwinUnetr model(cfg, 3);
        auto [vol, mask] = train::make_toy_case(16, 11);
        Tensor g = Tensor::zeros({3, 16, 16, 16}, DType::f64);
        {
            data::SegmentationMask ch = data::labels_to_channels(mask);
            for (size_t i = 0; i < ch.values.size(); ++i)
                g.set(static_cast<int64_t>(i), ch.values[i]);
        }
        auto xrng = derived_rng(5, {0x656e6432});
        Tensor x0 = Tensor::rand_uniform({4, 16, 16, 16}, -1.0, 1.0, xrng, DType::f64);
        out.push_back(fd_case(
            "end_to_end_tiny_f64_input",
            [&](const Tensor& x) {
                return metrics::soft_dice_loss(ops::sigmoid(model.forward(x)), g);
            },
            x0, 1e-4, 1e-4, /*max_coords=*/8));

        // spot-check parameter gradients against central differences
        Tape::active().reset();
        for (auto& p : model.parameters()) p.tensor.zero_grad();
        Tensor loss = metrics::soft_dice_loss(ops::sigmoid(model.forward(x0)), g);
        Tape::active().backward(loss);
        Tape::active().reset();
        auto eval_loss = [&] {
            NoGrad ng;
            return metrics::soft_dice_loss(ops::sigmoid(model.forward(x0)), g).item();
        };
        const double eps = 1e-4;
        double max_rel = 0.0;
        for (const char* pname :
             {"encoder.stage0.block1.attn.qkv.weight", "encoder.stage1.merge.reduction.weight",
              "decoder.bottleneck.conv2.weight", "decoder.head.weight"}) {
            Tensor pt = model.param(pname);
            Tensor analytic = pt.grad();
            auto prng = derived_rng(29, {std::hash<std::string>{}(pname)});
            for (int probe = 0; probe < 3; ++probe) {
                const int64_t i =
                    std::uniform_int_distribution<int64_t>(0, pt.numel() - 1)(prng);
                const double v = pt.at(i);
                pt.set(i, v + eps);
                const double fp = eval_loss();
                pt.set(i, v - eps);
                const double fm = eval_loss();
                pt.set(i, v);
                const double numeric = (fp - fm) / (2 * eps);
                const double a = analytic.at(i);
                max_rel = std::max(max_rel, std::abs(a - numeric) /
                                                std::max({std::abs(a), std::abs(numeric), 1e-8}));
            }
        }
        out.push_back(make_result("end_to_end_tiny_f64_params", max_rel < 1e-4,
                                  "max rel err " + fmt(max_rel)));
    }
    return out;
}

std::vector<CheckResult> oracle_suite() {
    std::vector<CheckResult> out;

    for (int64_t m : {2, 3, 4})
        for (uint64_t seed : {1u, 2u})
            out.push_back(wmsa_oracle_case(m, 2, 8, seed));

    out.push_back(swmsa_oracle_case({4, 4, 4}, 2, 2, 8, 1));
    out.push_back(swmsa_oracle_case({5, 5, 5}, 2, 2, 8, 2));   // padded to 6^3
    out.push_back(swmsa_oracle_case({6, 6, 6}, 3, 2, 8, 3));
    out.push_back(swmsa_oracle_case({5, 6, 4}, 4, 4, 8, 4));   // asymmetric, padded

    {
        auto rng = derived_rng(21, {0x636f6e76});
        Tensor x = Tensor::rand_uniform({2, 3, 5, 4, 6}, -1.0, 1.0, rng, DType::f64);
        Tensor w = Tensor::rand_uniform({4, 3, 3, 3, 3}, -0.5, 0.5, rng, DType::f64);
        Tensor b = Tensor::rand_uniform({4}, -0.2, 0.2, rng, DType::f64);
        Tensor y = ops::conv3d(x, w, b, 2, 1);
        auto ref = reference_conv3d(tensor_doubles(x), x.shape(), tensor_doubles(w), w.shape(),
                                    tensor_doubles(b), 2, 1);
        const double diff = max_abs_diff(y, ref);
        out.push_back(make_result("conv3d_vs_reference", diff < 1e-10,
                                  "max abs diff " + fmt(diff)));
    }
    {
        auto rng = derived_rng(22, {0x7463});
        Tensor x = Tensor::rand_uniform({1, 3, 3, 4, 5}, -1.0, 1.0, rng, DType::f64);
        Tensor w = Tensor::rand_uniform({3, 2, 2, 2, 2}, -0.5, 0.5, rng, DType::f64);
        Tensor b = Tensor::rand_uniform({2}, -0.2, 0.2, rng, DType::f64);
        Tensor y = ops::conv_transpose3d(x, w, b, 2);
        auto ref = reference_conv_transpose3d(tensor_doubles(x), x.shape(), tensor_doubles(w),
                                              w.shape(), tensor_doubles(b), 2, 0);
        const double diff = max_abs_diff(y, ref);
        out.push_back(make_result("conv_transpose3d_vs_explicit_adjoint", diff < 1e-10,
                                  "max abs diff " + fmt(diff)));
    }
    {
        // <conv(x), y> == <x, conv^T(y)>
        auto rng = derived_rng(23, {0x61646a});
        Tensor x = Tensor::rand_uniform({1, 2, 6, 6, 6}, -1.0, 1.0, rng);
        Tensor w = Tensor::rand_uniform({3, 2, 2, 2, 2}, -0.5, 0.5, rng);
        Tensor y = Tensor::rand_uniform({1, 3, 3, 3, 3}, -1.0, 1.0, rng);
        NoGrad ng;
        Tensor cx = ops::conv3d(x, w, Tensor(), 2, 0);
        Tensor cty = ops::conv_transpose3d(y, w, Tensor(), 2, 0);
        const double lhs = ops::sum(ops::mul(cx, y)).item();
        const double rhs = ops::sum(ops::mul(x, cty)).item();
        const double rel = std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-8});
        out.push_back(make_result("conv_adjoint_inner_product", rel < 1e-5,
                                  "rel diff " + fmt(rel)));
    }
    {
        // patch embedding: gather+linear route vs strided convolution route
        nn::ModelConfig cfg = train::tiny_model_config({8, 8, 8});
        nn::SwinUnetr model(cfg, 5);
        auto rng = derived_rng(24, {0x7065});
        Tensor x = Tensor::rand_uniform({4, 8, 8, 8}, -1.0, 1.0, rng);
        NoGrad ng;
        Tensor a = model.patch_embed(x);
        Tensor w = ops::reshape(model.param("encoder.patch_embed.weight").detach(),
                                {cfg.embed_dim, cfg.in_channels, 2, 2, 2});
        Tensor conv = ops::conv3d(ops::reshape(x, {1, 4, 8, 8, 8}), w,
                                  model.param("encoder.patch_embed.bias").detach(), 2, 0);
        Tensor b = ops::permute(ops::reshape(conv, {cfg.embed_dim, 4, 4, 4}), {1, 2, 3, 0});
        double diff = 0.0;
        for (int64_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
        out.push_back(make_result("patch_embed_dual_route", diff < 1e-5,
                                  "max abs diff " + fmt(diff)));
    }
    {
        // grid 4^3, M=4, s=2: the single window splits into 8 octant groups
        Tensor mask = win::compute_shift_mask({4, 4, 4}, 4, 2, {4, 4, 4});
        bool ok = mask.shape() == std::vector<int64_t>{1, 1, 64, 64};
        auto octant = [](int64_t p) {
            const int64_t a = p / 16, b = (p / 4) % 4, c = p % 4;
            return (a >= 2) * 4 + (b >= 2) * 2 + (c >= 2);
        };
        for (int64_t i = 0; ok && i < 64; ++i)
            for (int64_t j = 0; ok && j < 64; ++j) {
                const bool same = octant(i) == octant(j);
                const double v = mask.at(i * 64 + j);
                if (same != (v == 0.0) || (!same && v != -win::kMaskValue)) ok = false;
            }
        out.push_back(make_result("shift_mask_octants_4x4x4", ok,
                                  ok ? "8 octant groups" : "wrong zero pattern"));
    }
    {
        NoGrad ng;
        Tensor s1 = ops::softmax(Tensor::from_f32({3}, {0, 0, 0}), 0);
        Tensor s2 = ops::softmax(Tensor::from_f32({2}, {1000, 0}), 0);
        bool ok = std::abs(s1.at(int64_t{0}) - 1.0 / 3) < 1e-6 &&
                  std::abs(s2.at(int64_t{0}) - 1.0) < 1e-12 && std::abs(s2.at(int64_t{1})) < 1e-12;
        auto rng = derived_rng(31, {0x736d});
        Tensor x = Tensor::rand_uniform({4, 7}, -3.0, 3.0, rng);
        Tensor sx = ops::softmax(x, 1);
        Tensor sshift = ops::softmax(ops::add_scalar(x, 5.0), 1);
        for (int64_t r = 0; r < 4; ++r) {
            double row = 0.0;
            for (int64_t j = 0; j < 7; ++j) {
                row += sx.at(r * 7 + j);
                if (std::abs(sx.at(r * 7 + j) - sshift.at(r * 7 + j)) > 1e-6) ok = false;
            }
            if (std::abs(row - 1.0) > 1e-6) ok = false;
        }
        out.push_back(make_result("softmax_examples", ok, "stability + row sums + shift"));
    }
    {
        NoGrad ng;
        Tensor g = Tensor::from_f64({1, 2}, {1, 0});
        Tensor y = Tensor::from_f64({1, 2}, {0.5, 0.5});
        const double v = metrics::soft_dice_loss(y, g, 0.0).item();
        Tensor same = Tensor::from_f64({2, 4}, {1, 0, 1, 0, 0, 1, 0, 1});
        const double l0 = metrics::soft_dice_loss(same, same).item();
        Tensor inv = Tensor::from_f64({2, 4}, {0, 1, 0, 1, 1, 0, 1, 0});
        const double l1 = metrics::soft_dice_loss(inv, same).item();
        const bool ok = std::abs(v - 1.0 / 3) < 1e-12 && std::abs(l0) <= 1e-5 &&
                        std::abs(l1 - 1.0) <= 1e-5;
        out.push_back(make_result("soft_dice_hand_values", ok,
                                  "1/3 case " + fmt(v) + ", Y=G " + fmt(l0) + ", disjoint " +
                                      fmt(l1)));
    }
    {
        bool ok = true;
        std::string detail;
        for (uint64_t seed = 1; seed <= 4 && ok; ++seed) {
            auto rng = derived_rng(seed, {0x6864});
            const std::array<int64_t, 3> shape{6, 6, 6};
            std::vector<uint8_t> a(216), b(216);
            std::uniform_int_distribution<int> bit(0, 4);
            for (auto& v : a) v = bit(rng) == 0;
            for (auto& v : b) v = bit(rng) == 0;
            const std::array<double, 3> spacing{1.0, 0.7, 1.3};
            for (double pct : {100.0, 95.0}) {
                auto got = metrics::hausdorff_distance(a, b, shape, spacing, pct);
                auto want = reference_hausdorff(a, b, shape, spacing, pct);
                if (got.has_value() != want.has_value() ||
                    (got && *got != *want)) {
                    ok = false;
                    detail = "mismatch at seed " + std::to_string(seed);
                }
            }
        }
        out.push_back(make_result("hausdorff_vs_exhaustive", ok,
                                  ok ? "exact match (p95 and p100)" : detail));
    }
    {
        auto plan = infer::plan_tiles({240, 240, 240}, {128, 128, 128}, 0.7);
        const std::vector<int64_t> want{0, 38, 76, 112};
        bool ok = plan.step == std::array<int64_t, 3>{38, 38, 38} &&
                  plan.origins.size() == 64;
        std::vector<int64_t> axis;
        for (size_t i = 0; i < 4 && ok; ++i) axis.push_back(plan.origins[i][2]);
        ok = ok && axis == want;
        out.push_back(make_result("sliding_plan_240_128_0.7", ok, "origins {0,38,76,112}"));
    }
    {
        // constant-output tiles blend to the same constant; single tile is exact
        auto rng = derived_rng(41, {0x7377});
        Tensor vol = Tensor::rand_uniform({4, 10, 10, 10}, -1.0, 1.0, rng);
        infer::TileFn constant = [](const Tensor& tile) {
            return Tensor::full({3, tile.shape()[1], tile.shape()[2], tile.shape()[3]}, 0.37f);
        };
        Tensor probs = infer::sliding_window_infer(vol, constant, {4, 4, 4}, 0.7);
        bool ok = true;
        for (int64_t i = 0; i < probs.numel(); ++i)
            if (std::abs(probs.at(i) - 0.37f) > 1e-7) ok = false;
        out.push_back(make_result("sliding_constant_blend", ok, "constant preserved"));
    }
    {
        auto schedule_ok = [] {
            train::TrainConfig cfg;
            cfg.lr_max = 8e-4;
            cfg.warmup_fraction = 0.05;
            auto s = train::LrSchedule::make(cfg, 1000);
            const int64_t tw = s.warmup_steps;
            const double mid = s.at(tw + (1000 - tw) / 2);
            return std::abs(s.at(tw) - 8e-4) < 1e-15 && s.at(1000) < 1e-18 &&
                   std::abs(mid - 4e-4) < 1e-12 &&
                   std::abs(s.at(tw) - s.at(tw - 1) - 8e-4 / tw) < 1e-9;
        };
        out.push_back(make_result("lr_schedule_values", schedule_ok(),
                                  "warmup end, cosine midpoint, endpoint"));
    }
    return out;
}

std::vector<CheckResult> roundtrip_suite() {
    std::vector<CheckResult> out;
    auto rng = derived_rng(51, {0x7274});

    {
        Tensor x = Tensor::rand_uniform({8, 8, 8, 5}, -1.0, 1.0, rng);
        auto ws = win::window_partition(x, 4);
        bool ok = ws.windows.shape() == std::vector<int64_t>{8, 64, 5} &&
                  win::window_reverse(ws).same_bits(x);
        out.push_back(make_result("window_partition_reverse_bitexact", ok, "8^3 grid, M=4"));
    }
    {
        Tensor x = Tensor::rand_uniform({7, 7, 7, 3}, -1.0, 1.0, rng);
        Tensor y = win::cyclic_shift(win::cyclic_shift(x, 3), 3, true);
        out.push_back(make_result("cyclic_shift_inverse_bitexact", y.same_bits(x), "s=3 on 7^3"));
    }
    {
        Tensor x = Tensor::rand_uniform({4, 4, 4}, -1.0, 1.0, rng);
        Tensor y = ops::roll(ops::roll(x, {1, 2, 3}), {-1, -2, -3});
        Tensor p = ops::permute(ops::permute(x, {2, 0, 1}), {1, 2, 0});
        Tensor r = ops::reshape(ops::reshape(x, {8, 8}), {4, 4, 4});
        out.push_back(make_result("roll_permute_reshape_bijections",
                                  y.same_bits(x) && p.same_bits(x) && r.same_bits(x),
                                  "inverse pairs bit-exact"));
    }
    const fs::path tmp = fs::temp_directory_path() / "swinseg_verify";
    fs::create_directories(tmp);
    {
        data::Volume v;
        v.channels = 4;
        v.shape = {8, 8, 8};
        v.spacing = {1.0, 1.0, 1.0};
        v.channel_names = {"T1", "T1c", "T2", "FLAIR"};
        v.values.resize(4 * 512);
        std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
        for (auto& x : v.values) x = dist(rng);
        const std::string path = (tmp / "vol.svol").string();
        data::save_volume(v, path);
        data::Volume r = data::load_volume(path);
        const bool ok = r.values == v.values && r.shape == v.shape && r.channels == v.channels &&
                        r.spacing == v.spacing && r.channel_names == v.channel_names;
        out.push_back(make_result("svol_volume_roundtrip_bitexact", ok, path));
    }
    {
        data::SegmentationMask m;
        m.channel_form = false;
        m.shape = {6, 6, 6};
        m.values.resize(216);
        const uint8_t labels[4] = {0, 1, 2, 4};
        std::uniform_int_distribution<int> pick(0, 3);
        for (auto& x : m.values) x = labels[pick(rng)];
        const std::string path = (tmp / "mask.svol").string();
        data::save_mask(m, path);
        data::SegmentationMask r = data::load_mask(path);
        bool ok = r.values == m.values && !r.channel_form;
        data::SegmentationMask ch = data::labels_to_channels(m);
        auto back = data::channels_to_labels(ch);
        ok = ok && back.mask.values == m.values && back.nesting_violations == 0;
        out.push_back(make_result("mask_and_label_channel_roundtrip", ok, path));
    }
    {
        nn::ModelConfig cfg = train::tiny_model_config({16, 16, 16});
        nn::SwinUnetr model(cfg, 9);
        train::Checkpoint ckpt;
        ckpt.model_config = cfg;
        ckpt.train_config = nlohmann::json{{"note", "roundtrip"}};
        ckpt.step = 123;
        ckpt.rng_state = "derived(seed=9)";
        for (const auto& p : model.parameters())
            ckpt.blobs.emplace_back("param/" + p.name, p.tensor.detach());
        const std::string path = (tmp / "model.ckpt").string();
        train::save_checkpoint(ckpt, path);
        train::Checkpoint r = train::load_checkpoint(path);
        bool ok = r.step == 123 && r.blobs.size() == ckpt.blobs.size();
        for (size_t i = 0; ok && i < r.blobs.size(); ++i)
            ok = r.blobs[i].first == ckpt.blobs[i].first &&
                 r.blobs[i].second.same_bits(ckpt.blobs[i].second);

        nn::SwinUnetr restored(r.model_config, 777);
        restored.load_parameter_values(r.blobs_with_prefix("param/"));
        Tensor x = Tensor::rand_uniform({4, 16, 16, 16}, -1.0, 1.0, rng);
        NoGrad ng;
        ok = ok && restored.forward(x).same_bits(model.forward(x));
        out.push_back(make_result("sckpt_roundtrip_bitexact", ok,
                                  "blobs and restored forward bit-identical"));
    }
    return out;
}

std::vector<CheckResult> run_suites(const std::string& which) {
    std::vector<CheckResult> out;
    auto extend = [&](std::vector<CheckResult> v) {
        out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
    };
    if (which == "gradcheck" || which == "all") extend(gradcheck_suite());
    if (which == "oracles" || which == "all") extend(oracle_suite());
    if (which == "roundtrip" || which == "all") extend(roundtrip_suite());
    if (out.empty() && which != "gradcheck" && which != "oracles" && which != "roundtrip" &&
        which != "all")
        throw std::invalid_argument("unknown suite '" + which +
                                    "' (expected gradcheck, oracles, roundtrip or all)");
    return out;
}

}  // namespace swinseg::verify
