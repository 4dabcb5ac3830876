#include <algorithm>

#include "ops_internal.hpp"
#include "swinseg/ops.hpp"

namespace swinseg::ops {

using detail::BcastPlan;
using detail::bcast_walk;
using detail::gemm;
using detail::make_bcast_plan;
using detail::mark_output;
using detail::should_record;

Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_same_dtype(a, b, "matmul");
    if (a.rank() < 2 || b.rank() < 2)
        throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int64_t m = a.shape()[a.rank() - 2];
    const int64_t k = a.shape()[a.rank() - 1];
    const int64_t k2 = b.shape()[b.rank() - 2];
    const int64_t n = b.shape()[b.rank() - 1];
    if (k != k2)
        throw std::invalid_argument("matmul: inner extents differ: " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    std::vector<int64_t> batch_a(a.shape().begin(), a.shape().end() - 2);
    std::vector<int64_t> batch_b(b.shape().begin(), b.shape().end() - 2);
    BcastPlan plan = make_bcast_plan(batch_a, batch_b, "matmul");
    std::vector<int64_t> out_shape = plan.out_shape;
    out_shape.push_back(m);
    out_shape.push_back(n);

    Tensor out = Tensor::uninit(out_shape, a.dtype());
    const int64_t mk = m * k, kn = k * n, mn = m * n;
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        // batches write disjoint outputs; per-batch GEMMs are small enough
        // that OpenBLAS stays single-threaded inside the parallel region
        detail::bcast_walk_parallel(plan, [&](int64_t io, int64_t ia, int64_t ib) {
            gemm<T>(false, false, m, n, k, T(1), pa + ia * mk, k, pb + ib * kn, n, T(0),
                    po + io * mn, n);
        });
    });
    check_finite(out, "matmul");
    if (should_record({&a, &b})) {
        mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([ai, bi, oi, plan, m, n, k, mk, kn, mn] {
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
                // dA = dC . B^T, dB = A^T . dC. Without batch broadcasting
                // the accumulation targets are disjoint and the loop can run
                // in parallel; otherwise keep the fixed serial order.
                const bool no_broadcast =
                    std::none_of(plan.sa.begin(), plan.sa.end(), [](int64_t s) { return s == 0; }) &&
                    std::none_of(plan.sb.begin(), plan.sb.end(), [](int64_t s) { return s == 0; });
                auto body = [&](int64_t io, int64_t ia, int64_t ib) {
                    if (ga)
                        gemm<T>(false, true, m, k, n, T(1), go + io * mn, n, pb + ib * kn, n, T(1),
                                ga + ia * mk, k);
                    if (gb)
                        gemm<T>(true, false, k, n, m, T(1), pa + ia * mk, k, go + io * mn, n, T(1),
                                gb + ib * kn, n);
                };
                if (no_broadcast) detail::bcast_walk_parallel(plan, body);
                else bcast_walk(plan, body);
            });
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_same_dtype(x, w, "linear");
    if (w.rank() != 2) throw std::invalid_argument("linear: weight must be (out, in)");
    if (x.rank() < 1 || x.shape().back() != w.shape()[1])
        throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                    " does not match weight " + shape_str(w.shape()));
    const int64_t in = w.shape()[1], out_features = w.shape()[0];
    const int64_t rows = x.numel() / in;
    const bool has_bias = b.defined();
    if (has_bias && (b.rank() != 1 || b.shape()[0] != out_features))
        throw std::invalid_argument("linear: bias must have extent " +
                                    std::to_string(out_features));

    std::vector<int64_t> out_shape(x.shape().begin(), x.shape().end() - 1);
    out_shape.push_back(out_features);
    Tensor y = Tensor::uninit(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pw = w.data<T>();
        T* py = y.data<T>();
        gemm<T>(false, true, rows, out_features, in, T(1), px, in, pw, in, T(0), py, out_features);
        if (has_bias) {
            const T* pb = b.data<T>();
#pragma omp parallel for schedule(static) if (rows > 1024)
            for (int64_t r = 0; r < rows; ++r) {
                T* row = py + r * out_features;
                for (int64_t j = 0; j < out_features; ++j) row[j] += pb[j];
            }
        }
    });
    check_finite(y, "linear");
    if (should_record({&x, &w, &b})) {
        mark_output(y);
        auto xi = x.impl(), wi = w.impl(), oi = y.impl();
        auto bi = has_bias ? b.impl() : nullptr;
        Tape::active().record([xi, wi, bi, oi, rows, in, out_features] {
            if (!oi->has_grad()) return;
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                if (xi->needs_grad) {
                    xi->ensure_grad();
                    gemm<T>(false, false, rows, in, out_features, T(1), go, out_features,
                            wi->values<T>(), in, T(1), xi->grad_values<T>(), in);
                }
                if (wi->needs_grad) {
                    wi->ensure_grad();
                    gemm<T>(true, false, out_features, in, rows, T(1), go, out_features,
                            xi->values<T>(), in, T(1), wi->grad_values<T>(), in);
                }
                if (bi && bi->needs_grad) {
                    bi->ensure_grad();
                    T* gb = bi->grad_values<T>();
                    for (int64_t r = 0; r < rows; ++r) {
                        const T* row = go + r * out_features;
                        for (int64_t j = 0; j < out_features; ++j) gb[j] += row[j];
                    }
                }
            });
        });
    }
    return y;
}

}  // namespace swinseg::ops
