#include <cmath>

#include "ops_internal.hpp"
#include "swinseg/ops.hpp"

namespace swinseg::ops {

using detail::mark_output;
using detail::should_record;

Tensor softmax(const Tensor& a, int axis) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw std::invalid_argument("softmax: axis out of range for shape " +
                                    shape_str(a.shape()));
    const int64_t extent = a.shape()[axis];
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
    const int64_t slices = outer * inner;

    Tensor out = Tensor::uninit(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
#pragma omp parallel for schedule(static) if (slices > 64)
        for (int64_t sid = 0; sid < slices; ++sid) {
            const int64_t o = sid / inner, i = sid % inner;
            const T* src = pa + (o * extent) * inner + i;
            T* dst = po + (o * extent) * inner + i;
            T mx = src[0];
            for (int64_t j = 1; j < extent; ++j) mx = std::max(mx, src[j * inner]);
            double denom = 0.0;
            for (int64_t j = 0; j < extent; ++j) {
                const T e = std::exp(src[j * inner] - mx);
                dst[j * inner] = e;
                denom += static_cast<double>(e);
            }
            const T inv = static_cast<T>(1.0 / denom);
            for (int64_t j = 0; j < extent; ++j) dst[j * inner] *= inv;
        }
    });
    check_finite(out, "softmax");
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi, extent, inner, slices] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                const T* y = oi->values<T>();
                T* ga = ai->grad_values<T>();
#pragma omp parallel for schedule(static) if (slices > 64)
                for (int64_t sid = 0; sid < slices; ++sid) {
                    const int64_t o = sid / inner, i = sid % inner;
                    const int64_t base = (o * extent) * inner + i;
                    double dot = 0.0;
                    for (int64_t j = 0; j < extent; ++j)
                        dot += static_cast<double>(go[base + j * inner]) *
                               static_cast<double>(y[base + j * inner]);
                    for (int64_t j = 0; j < extent; ++j) {
                        const int64_t p = base + j * inner;
                        ga[p] += static_cast<T>(static_cast<double>(y[p]) *
                                                (static_cast<double>(go[p]) - dot));
                    }
                }
            });
        });
    }
    return out;
}

namespace {

// Shared row-normalization core for layer_norm (affine per column) and
// instance_norm (affine per row channel).
struct NormStats {
    std::vector<double> mean, rstd;
};

template <class T>
void norm_forward(const T* x, T* y, int64_t rows, int64_t width, const T* gamma, const T* beta,
                  bool affine_per_row, int64_t channels, double eps, NormStats& stats) {
#pragma omp parallel for schedule(static) if (rows > 4)
    for (int64_t row = 0; row < rows; ++row) {
        const T* src = x + row * width;
        T* dst = y + row * width;
        double s = 0.0;
        for (int64_t j = 0; j < width; ++j) s += static_cast<double>(src[j]);
        const double mean = s / static_cast<double>(width);
        double sq = 0.0;
        for (int64_t j = 0; j < width; ++j) {
            const double d = static_cast<double>(src[j]) - mean;
            sq += d * d;
        }
        const double rstd = 1.0 / std::sqrt(sq / static_cast<double>(width) + eps);
        stats.mean[row] = mean;
        stats.rstd[row] = rstd;
        if (affine_per_row) {
            const double g = static_cast<double>(gamma[row % channels]);
            const double b = static_cast<double>(beta[row % channels]);
            for (int64_t j = 0; j < width; ++j)
                dst[j] = static_cast<T>((static_cast<double>(src[j]) - mean) * rstd * g + b);
        } else {
            for (int64_t j = 0; j < width; ++j)
                dst[j] = static_cast<T>((static_cast<double>(src[j]) - mean) * rstd *
                                            static_cast<double>(gamma[j]) +
                                        static_cast<double>(beta[j]));
        }
    }
}

// dgamma/dbeta accumulate across rows, so this runs serially.
template <class T>
void norm_backward(const T* x, const T* go, T* gx, T* ggamma, T* gbeta, int64_t rows,
                   int64_t width, const T* gamma, bool affine_per_row, int64_t channels,
                   const NormStats& stats) {
    const double invw = 1.0 / static_cast<double>(width);
    for (int64_t row = 0; row < rows; ++row) {
        const T* src = x + row * width;
        const T* g = go + row * width;
        const double mean = stats.mean[row], rstd = stats.rstd[row];
        const int64_t c = row % channels;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t j = 0; j < width; ++j) {
            const double xhat = (static_cast<double>(src[j]) - mean) * rstd;
            const double gam =
                static_cast<double>(affine_per_row ? gamma[c] : gamma[j]);
            const double dyg = static_cast<double>(g[j]) * gam;
            s1 += dyg;
            s2 += dyg * xhat;
        }
        for (int64_t j = 0; j < width; ++j) {
            const double xhat = (static_cast<double>(src[j]) - mean) * rstd;
            const double gam =
                static_cast<double>(affine_per_row ? gamma[c] : gamma[j]);
            const double dyg = static_cast<double>(g[j]) * gam;
            if (gx) gx[row * width + j] += static_cast<T>(rstd * (dyg - s1 * invw - xhat * s2 * invw));
            if (ggamma) {
                const int64_t a = affine_per_row ? c : j;
                ggamma[a] += static_cast<T>(static_cast<double>(g[j]) * xhat);
                gbeta[a] += g[j];
            }
        }
    }
}

Tensor norm_op(const char* name, const Tensor& x, const Tensor& gamma, const Tensor& beta,
               double eps, int64_t rows, int64_t width, bool affine_per_row, int64_t channels) {
    detail::require_same_dtype(x, gamma, name);
    detail::require_same_dtype(x, beta, name);
    if (gamma.numel() != channels || beta.numel() != channels)
        throw std::invalid_argument(std::string(name) + ": gamma/beta must have extent " +
                                    std::to_string(channels) + ", got " +
                                    shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    Tensor out = Tensor::uninit(x.shape(), x.dtype());
    auto stats = std::make_shared<NormStats>();
    stats->mean.resize(static_cast<size_t>(rows));
    stats->rstd.resize(static_cast<size_t>(rows));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        norm_forward<T>(x.data<T>(), out.data<T>(), rows, width, gamma.data<T>(), beta.data<T>(),
                        affine_per_row, channels, eps, *stats);
    });
    check_finite(out, name);
    if (should_record({&x, &gamma, &beta})) {
        mark_output(out);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        Tape::active().record([xi, gi, bi, oi, stats, rows, width, affine_per_row, channels] {
            if (!oi->has_grad()) return;
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                T* gx = nullptr;
                T* ggamma = nullptr;
                T* gbeta = nullptr;
                if (xi->needs_grad) {
                    xi->ensure_grad();
                    gx = xi->grad_values<T>();
                }
                if (gi->needs_grad || bi->needs_grad) {
                    gi->ensure_grad();
                    bi->ensure_grad();
                    ggamma = gi->grad_values<T>();
                    gbeta = bi->grad_values<T>();
                }
                norm_backward<T>(xi->values<T>(), oi->grad_values<T>(), gx, ggamma, gbeta, rows,
                                 width, gi->values<T>(), affine_per_row, channels, *stats);
            });
        });
    }
    return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1 required");
    const int64_t width = x.shape().back();
    return norm_op("layer_norm", x, gamma, beta, eps, x.numel() / width, width,
                   /*affine_per_row=*/false, width);
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() != 5)
        throw std::invalid_argument("instance_norm: expected (N, C, H, W, D), got " +
                                    shape_str(x.shape()));
    const int64_t n = x.shape()[0], c = x.shape()[1];
    const int64_t spatial = x.numel() / (n * c);
    return norm_op("instance_norm", x, gamma, beta, eps, n * c, spatial,
                   /*affine_per_row=*/true, c);
}

}  // namespace swinseg::ops
