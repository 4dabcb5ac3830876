#pragma once

#include <cblas.h>

#include <cstring>
#include <vector>

#include "swinseg/tensor.hpp"

namespace swinseg::ops::detail {

inline std::vector<int64_t> contiguous_strides(const std::vector<int64_t>& shape) {
    std::vector<int64_t> s(shape.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        s[i] = acc;
        acc *= shape[i];
    }
    return s;
}

// Broadcast layout for a binary op: output shape plus per-operand strides
// (0 on broadcast axes), all aligned to the output rank.
struct BcastPlan {
    std::vector<int64_t> out_shape;
    std::vector<int64_t> sa, sb;
    bool same_shape = false;
};

inline BcastPlan make_bcast_plan(const std::vector<int64_t>& a, const std::vector<int64_t>& b,
                                 const char* op_name) {
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    BcastPlan plan;
    plan.out_shape.resize(r);
    for (int i = 0; i < r; ++i) {
        const int64_t ea = i < r - ra ? 1 : a[i - (r - ra)];
        const int64_t eb = i < r - rb ? 1 : b[i - (r - rb)];
        if (ea != eb && ea != 1 && eb != 1)
            throw std::invalid_argument(std::string(op_name) + ": shapes not broadcastable: " +
                                        shape_str(a) + " vs " + shape_str(b));
        plan.out_shape[i] = std::max(ea, eb);
    }
    auto strides_for = [&](const std::vector<int64_t>& shape) {
        std::vector<int64_t> natural = contiguous_strides(shape);
        std::vector<int64_t> s(r, 0);
        const int off = r - static_cast<int>(shape.size());
        for (int i = 0; i < static_cast<int>(shape.size()); ++i)
            s[off + i] = shape[i] == 1 && plan.out_shape[off + i] != 1 ? 0 : natural[i];
        return s;
    };
    plan.sa = strides_for(a);
    plan.sb = strides_for(b);
    plan.same_shape = (a == b);
    return plan;
}

// Parallel variant over output rows: f(out_flat, a_off, b_off) must be a
// pure per-element map (no cross-element accumulation).
template <class F>
void bcast_walk_parallel(const BcastPlan& plan, F&& f) {
    const int r = static_cast<int>(plan.out_shape.size());
    const int64_t total = shape_numel(plan.out_shape);
    if (r == 0) {
        f(int64_t{0}, int64_t{0}, int64_t{0});
        return;
    }
    const int64_t inner = plan.out_shape[r - 1];
    const int64_t rows = total / inner;
    const int64_t la = plan.sa[r - 1], lb = plan.sb[r - 1];
#pragma omp parallel for schedule(static) if (total > (1 << 16))
    for (int64_t row = 0; row < rows; ++row) {
        int64_t rem = row, offa = 0, offb = 0;
        for (int k = r - 2; k >= 0; --k) {
            const int64_t idx = rem % plan.out_shape[k];
            rem /= plan.out_shape[k];
            offa += idx * plan.sa[k];
            offb += idx * plan.sb[k];
        }
        const int64_t base = row * inner;
        for (int64_t i = 0; i < inner; ++i) f(base + i, offa + i * la, offb + i * lb);
    }
}

// Walks every output element of a broadcast plan in row-major order and
// calls f(out_flat, a_off, b_off).
template <class F>
void bcast_walk(const BcastPlan& plan, F&& f) {
    const int r = static_cast<int>(plan.out_shape.size());
    const int64_t total = shape_numel(plan.out_shape);
    if (r == 0) {
        f(int64_t{0}, int64_t{0}, int64_t{0});
        return;
    }
    const int64_t inner = plan.out_shape[r - 1];
    const int64_t la = plan.sa[r - 1], lb = plan.sb[r - 1];
    std::vector<int64_t> idx(r - 1, 0);
    int64_t offa = 0, offb = 0, pos = 0;
    while (pos < total) {
        for (int64_t i = 0; i < inner; ++i) f(pos + i, offa + i * la, offb + i * lb);
        pos += inner;
        int k = r - 2;
        for (; k >= 0; --k) {
            offa += plan.sa[k];
            offb += plan.sb[k];
            if (++idx[k] < plan.out_shape[k]) break;
            offa -= plan.sa[k] * plan.out_shape[k];
            offb -= plan.sb[k] * plan.out_shape[k];
            idx[k] = 0;
        }
        if (k < 0) break;
    }
}

template <class T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha, const T* a,
          int64_t lda, const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
    const auto ta = trans_a ? CblasTrans : CblasNoTrans;
    const auto tb = trans_b ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                    static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                    beta, c, static_cast<int>(ldc));
    } else {
        cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
                    static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                    beta, c, static_cast<int>(ldc));
    }
}

inline void require_same_dtype(const Tensor& a, const Tensor& b, const char* op_name) {
    if (a.dtype() != b.dtype())
        throw std::invalid_argument(std::string(op_name) + ": dtype mismatch (" +
                                    dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()) + ")");
}

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->needs_grad()) return true;
    return false;
}

inline void mark_output(Tensor& out) { out.impl()->needs_grad = true; }

}  // namespace swinseg::ops::detail
