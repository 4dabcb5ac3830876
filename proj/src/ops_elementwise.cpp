#include <cmath>

#include "ops_internal.hpp"
#include "swinseg/ops.hpp"

namespace swinseg::ops {

using detail::BcastPlan;
using detail::bcast_walk;
using detail::make_bcast_plan;
using detail::mark_output;
using detail::should_record;

namespace {

enum class BinOp { add, sub, mul, div };

template <class T>
T apply(BinOp op, T x, T y) {
    switch (op) {
        case BinOp::add: return x + y;
        case BinOp::sub: return x - y;
        case BinOp::mul: return x * y;
        case BinOp::div: return x / y;
    }
    return T{};
}

Tensor binary(BinOp op, const char* name, const Tensor& a, const Tensor& b) {
    detail::require_same_dtype(a, b, name);
    BcastPlan plan = make_bcast_plan(a.shape(), b.shape(), name);
    Tensor out = Tensor::uninit(plan.out_shape, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        if (plan.same_shape) {
            const int64_t n = out.numel();
#pragma omp parallel for schedule(static) if (n > (1 << 16))
            for (int64_t i = 0; i < n; ++i) po[i] = apply(op, pa[i], pb[i]);
        } else {
            detail::bcast_walk_parallel(plan, [&](int64_t io, int64_t ia, int64_t ib) {
                po[io] = apply(op, pa[ia], pb[ib]);
            });
        }
    });
    check_finite(out, name);
    if (should_record({&a, &b})) {
        mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([op, plan, ai, bi, oi] {
            if (!oi->has_grad()) return;
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                const T* pa = ai->values<T>();
                const T* pb = bi->values<T>();
                T* ga = nullptr;
                T* gb = nullptr;
                if (ai->needs_grad) {
                    ai->ensure_grad();
                    ga = ai->grad_values<T>();
                }
                if (bi->needs_grad) {
                    bi->ensure_grad();
                    gb = bi->grad_values<T>();
                }
                bcast_walk(plan, [&](int64_t io, int64_t ia, int64_t ib) {
                    const T g = go[io];
                    switch (op) {
                        case BinOp::add:
                            if (ga) ga[ia] += g;
                            if (gb) gb[ib] += g;
                            break;
                        case BinOp::sub:
                            if (ga) ga[ia] += g;
                            if (gb) gb[ib] -= g;
                            break;
                        case BinOp::mul:
                            if (ga) ga[ia] += g * pb[ib];
                            if (gb) gb[ib] += g * pa[ia];
                            break;
                        case BinOp::div: {
                            const T inv = T(1) / pb[ib];
                            if (ga) ga[ia] += g * inv;
                            if (gb) gb[ib] -= g * pa[ia] * inv * inv;
                            break;
                        }
                    }
                });
            });
        });
    }
    return out;
}

// Unary map with derivative expressed from (x, y); functors are generic so
// each dtype runs in its own precision.
template <class FwdF, class BwdF>
Tensor unary(const char* name, const Tensor& a, FwdF fwd, BwdF dfdx) {
    Tensor out = Tensor::uninit(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (n > (1 << 16))
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    });
    check_finite(out, name);
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi, dfdx] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                const T* px = ai->values<T>();
                const T* py = oi->values<T>();
                T* ga = ai->grad_values<T>();
                const int64_t n = ai->numel();
#pragma omp parallel for schedule(static) if (n > (1 << 16))
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * dfdx(px[i], py[i]);
            });
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinOp::add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinOp::sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinOp::mul, "mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinOp::div, "div", a, b); }

Tensor scale(const Tensor& a, double s) {
    return unary(
        "scale", a, [s](auto x) { return static_cast<decltype(x)>(s) * x; },
        [s](auto x, auto) { return static_cast<decltype(x)>(s); });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary(
        "add_scalar", a, [c](auto x) { return x + static_cast<decltype(x)>(c); },
        [](auto x, auto) { return static_cast<decltype(x)>(1); });
}

Tensor gelu(const Tensor& a) {
    return unary(
        "gelu", a,
        [](auto x) {
            using T = decltype(x);
            return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
        },
        [](auto x, auto) {
            using T = decltype(x);
            return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244))) +
                   x * T(0.3989422804014326779) * std::exp(T(-0.5) * x * x);
        });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        "sigmoid", a,
        [](auto x) {
            using T = decltype(x);
            return T(1) / (T(1) + std::exp(-x));
        },
        [](auto, auto y) {
            using T = decltype(y);
            return y * (T(1) - y);
        });
}

Tensor leaky_relu(const Tensor& a, double negative_slope) {
    return unary(
        "leaky_relu", a,
        [negative_slope](auto x) {
            using T = decltype(x);
            return x > T(0) ? x : static_cast<T>(negative_slope) * x;
        },
        [negative_slope](auto x, auto) {
            using T = decltype(x);
            return x > T(0) ? T(1) : static_cast<T>(negative_slope);
        });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* p = a.data<T>();
        for (int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(p[i]);
    });
    Tensor out = Tensor::full({}, acc, a.dtype());
    check_finite(out, "sum");
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T g = oi->grad_values<T>()[0];
                T* ga = ai->grad_values<T>();
                for (int64_t i = 0; i < ai->numel(); ++i) ga[i] += g;
            });
        });
    }
    return out;
}

Tensor sum_axis(const Tensor& a, int axis) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw std::invalid_argument("sum_axis: axis out of range for shape " +
                                    shape_str(a.shape()));
    std::vector<int64_t> out_shape;
    for (int i = 0; i < r; ++i)
        if (i != axis) out_shape.push_back(a.shape()[i]);
    const int64_t extent = a.shape()[axis];
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];

    Tensor out = Tensor::uninit(out_shape, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* p = a.data<T>();
        T* po = out.data<T>();
        std::vector<double> acc(static_cast<size_t>(inner));
        for (int64_t o = 0; o < outer; ++o) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int64_t k = 0; k < extent; ++k) {
                const T* row = p + (o * extent + k) * inner;
                for (int64_t i = 0; i < inner; ++i) acc[i] += static_cast<double>(row[i]);
            }
            for (int64_t i = 0; i < inner; ++i) po[o * inner + i] = static_cast<T>(acc[i]);
        }
    });
    check_finite(out, "sum_axis");
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi, axis_extent = extent, inner, outer] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                T* ga = ai->grad_values<T>();
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t k = 0; k < axis_extent; ++k) {
                        T* row = ga + (o * axis_extent + k) * inner;
                        const T* grow = go + o * inner;
                        for (int64_t i = 0; i < inner; ++i) row[i] += grow[i];
                    }
            });
        });
    }
    return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

}  // namespace swinseg::ops
