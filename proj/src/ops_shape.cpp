#include <algorithm>
#include <cstring>

#include "ops_internal.hpp"
#include "swinseg/ops.hpp"

namespace swinseg::ops {

using detail::contiguous_strides;
using detail::mark_output;
using detail::should_record;

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw std::invalid_argument("reshape: more than one -1 extent");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || a.numel() % known != 0)
            throw std::invalid_argument("reshape: cannot infer extent for " + shape_str(a.shape()));
        shape[infer] = a.numel() / known;
        known *= shape[infer];
    }
    if (known != a.numel())
        throw std::invalid_argument("reshape: element count mismatch, " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    Tensor out(shape, a.dtype());
    out.impl()->data = a.impl()->data;
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                T* ga = ai->grad_values<T>();
                for (int64_t i = 0; i < ai->numel(); ++i) ga[i] += go[i];
            });
        });
    }
    return out;
}

namespace {

// src offsets for all elements of a permuted view, iterated in output
// row-major order. f(out_flat, src_off). Permutation => offsets are unique,
// so both gather and scatter-accumulate are race-free under the row split.
template <class F>
void permute_walk(const std::vector<int64_t>& out_shape, const std::vector<int64_t>& src_strides,
                  F&& f) {
    const int r = static_cast<int>(out_shape.size());
    const int64_t total = shape_numel(out_shape);
    if (r == 0) {
        f(int64_t{0}, int64_t{0});
        return;
    }
    const int64_t inner = out_shape[r - 1];
    const int64_t rows = total / inner;
    const int64_t ls = src_strides[r - 1];
#pragma omp parallel for schedule(static) if (total > (1 << 16))
    for (int64_t row = 0; row < rows; ++row) {
        int64_t rem = row, soff = 0;
        for (int k = r - 2; k >= 0; --k) {
            soff += (rem % out_shape[k]) * src_strides[k];
            rem /= out_shape[k];
        }
        const int64_t base = row * inner;
        for (int64_t i = 0; i < inner; ++i) f(base + i, soff + i * ls);
    }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int r = a.rank();
    if (static_cast<int>(axes.size()) != r)
        throw std::invalid_argument("permute: axes rank mismatch for " + shape_str(a.shape()));
    std::vector<bool> seen(r, false);
    std::vector<int64_t> out_shape(r), src_strides(r);
    const auto nat = contiguous_strides(a.shape());
    for (int i = 0; i < r; ++i) {
        const int ax = axes[i];
        if (ax < 0 || ax >= r || seen[ax])
            throw std::invalid_argument("permute: invalid axes for " + shape_str(a.shape()));
        seen[ax] = true;
        out_shape[i] = a.shape()[ax];
        src_strides[i] = nat[ax];
    }
    Tensor out = Tensor::uninit(out_shape, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        permute_walk(out_shape, src_strides, [&](int64_t pos, int64_t soff) { po[pos] = pa[soff]; });
    });
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi, out_shape, src_strides] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                T* ga = ai->grad_values<T>();
                permute_walk(out_shape, src_strides,
                             [&](int64_t pos, int64_t soff) { ga[soff] += go[pos]; });
            });
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no operands");
    const int r = parts[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
    std::vector<int64_t> out_shape = parts[0].shape();
    int64_t axis_total = 0;
    for (const Tensor& p : parts) {
        detail::require_same_dtype(parts[0], p, "concat");
        if (p.rank() != r) throw std::invalid_argument("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && p.shape()[i] != out_shape[i])
                throw std::invalid_argument("concat: extent mismatch " + shape_str(p.shape()) +
                                            " vs " + shape_str(out_shape));
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];

    Tensor out = Tensor::uninit(out_shape, parts[0].dtype());
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        int64_t axis_off = 0;
        for (const Tensor& p : parts) {
            const T* pp = p.data<T>();
            const int64_t chunk = p.shape()[axis] * inner;
            for (int64_t o = 0; o < outer; ++o)
                std::memcpy(po + o * axis_total * inner + axis_off * inner, pp + o * chunk,
                            static_cast<size_t>(chunk) * sizeof(T));
            axis_off += p.shape()[axis];
        }
    });
    bool rec = false;
    for (const Tensor& p : parts) rec = rec || should_record({&p});
    if (rec) {
        mark_output(out);
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        Tape::active().record([impls, oi, axis, inner, outer, axis_total] {
            if (!oi->has_grad()) return;
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                int64_t axis_off = 0;
                for (auto& pi : impls) {
                    const int64_t part_axis = pi->numel() / (inner * outer);
                    if (pi->needs_grad) {
                        pi->ensure_grad();
                        T* gp = pi->grad_values<T>();
                        const int64_t chunk = part_axis * inner;
                        for (int64_t o = 0; o < outer; ++o) {
                            const T* src = go + o * axis_total * inner + axis_off * inner;
                            T* dst = gp + o * chunk;
                            for (int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                        }
                    }
                    axis_off += part_axis;
                }
            });
        });
    }
    return out;
}

namespace {

// Normalized positive shift per axis.
std::vector<int64_t> normalize_shifts(const std::vector<int64_t>& shape,
                                      const std::vector<int64_t>& shifts) {
    if (shifts.size() != shape.size())
        throw std::invalid_argument("roll: shift rank mismatch for " + shape_str(shape));
    std::vector<int64_t> s(shape.size());
    for (size_t i = 0; i < shape.size(); ++i) {
        const int64_t e = shape[i];
        s[i] = ((shifts[i] % e) + e) % e;
    }
    return s;
}

// out[idx] = in[(idx - shift) mod extent], walked via outer odometer with a
// two-segment copy on the innermost axis.
template <class T, class CopyF>
void roll_walk(const std::vector<int64_t>& shape, const std::vector<int64_t>& shift, CopyF&& copy) {
    const int r = static_cast<int>(shape.size());
    const auto strides = contiguous_strides(shape);
    const int64_t inner = shape[r - 1];
    const int64_t s_in = shift[r - 1];
    const int64_t outer = shape_numel(shape) / inner;
    std::vector<int64_t> idx(r - 1, 0);
    for (int64_t o = 0; o < outer; ++o) {
        int64_t dst_off = 0, src_off = 0;
        for (int k = 0; k < r - 1; ++k) {
            dst_off += idx[k] * strides[k];
            src_off += ((idx[k] - shift[k] + shape[k]) % shape[k]) * strides[k];
        }
        // dst[0..s) <- src[inner-s..inner), dst[s..inner) <- src[0..inner-s)
        copy(dst_off, src_off + inner - s_in, s_in);
        copy(dst_off + s_in, src_off, inner - s_in);
        for (int k = r - 2; k >= 0; --k) {
            if (++idx[k] < shape[k]) break;
            idx[k] = 0;
        }
    }
}

}  // namespace

Tensor roll(const Tensor& a, const std::vector<int64_t>& shifts) {
    if (a.rank() == 0) return a.clone();
    const auto shift = normalize_shifts(a.shape(), shifts);
    Tensor out = Tensor::uninit(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        roll_walk<T>(a.shape(), shift, [&](int64_t dst, int64_t src, int64_t n) {
            if (n > 0) std::memcpy(po + dst, pa + src, static_cast<size_t>(n) * sizeof(T));
        });
    });
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi, shape = a.shape(), shift] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                T* ga = ai->grad_values<T>();
                roll_walk<T>(shape, shift, [&](int64_t dst, int64_t src, int64_t n) {
                    for (int64_t i = 0; i < n; ++i) ga[src + i] += go[dst + i];
                });
            });
        });
    }
    return out;
}

namespace {

void check_bounds_spec(const Tensor& a, const std::vector<int64_t>& lo,
                       const std::vector<int64_t>& hi, const char* name) {
    if (static_cast<int>(lo.size()) != a.rank() || static_cast<int>(hi.size()) != a.rank())
        throw std::invalid_argument(std::string(name) + ": bounds rank mismatch for " +
                                    shape_str(a.shape()));
}

// f(src_row_off, dst_row_off, row_len) over all rows of the inner axis,
// where dst is the padded layout.
template <class F>
void pad_rows(const std::vector<int64_t>& src_shape, const std::vector<int64_t>& dst_shape,
              const std::vector<int64_t>& lo, F&& f) {
    const int r = static_cast<int>(src_shape.size());
    const auto dst_strides = contiguous_strides(dst_shape);
    const int64_t inner = src_shape[r - 1];
    const int64_t rows = shape_numel(src_shape) / inner;
    std::vector<int64_t> idx(r - 1, 0);
    for (int64_t row = 0; row < rows; ++row) {
        int64_t dst_off = lo[r - 1];
        for (int k = 0; k < r - 1; ++k) dst_off += (idx[k] + lo[k]) * dst_strides[k];
        f(row * inner, dst_off, inner);
        for (int k = r - 2; k >= 0; --k) {
            if (++idx[k] < src_shape[k]) break;
            idx[k] = 0;
        }
    }
}

}  // namespace

Tensor pad(const Tensor& a, const std::vector<int64_t>& lo, const std::vector<int64_t>& hi) {
    check_bounds_spec(a, lo, hi, "pad");
    if (a.rank() == 0) return a.clone();
    std::vector<int64_t> out_shape(a.rank());
    for (int i = 0; i < a.rank(); ++i) {
        if (lo[i] < 0 || hi[i] < 0) throw std::invalid_argument("pad: negative pad amount");
        out_shape[i] = a.shape()[i] + lo[i] + hi[i];
    }
    Tensor out = Tensor::uninit(out_shape, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        pad_rows(a.shape(), out_shape, lo, [&](int64_t src, int64_t dst, int64_t n) {
            std::memcpy(po + dst, pa + src, static_cast<size_t>(n) * sizeof(T));
        });
    });
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi, src_shape = a.shape(), out_shape, lo] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                T* ga = ai->grad_values<T>();
                pad_rows(src_shape, out_shape, lo, [&](int64_t src, int64_t dst, int64_t n) {
                    for (int64_t i = 0; i < n; ++i) ga[src + i] += go[dst + i];
                });
            });
        });
    }
    return out;
}

Tensor slice(const Tensor& a, const std::vector<int64_t>& lo, const std::vector<int64_t>& hi) {
    check_bounds_spec(a, lo, hi, "slice");
    if (a.rank() == 0) return a.clone();
    std::vector<int64_t> out_shape(a.rank());
    for (int i = 0; i < a.rank(); ++i) {
        if (lo[i] < 0 || hi[i] > a.shape()[i] || lo[i] >= hi[i])
            throw std::invalid_argument("slice: bounds out of range for " + shape_str(a.shape()));
        out_shape[i] = hi[i] - lo[i];
    }
    Tensor out = Tensor::uninit(out_shape, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        pad_rows(out_shape, a.shape(), lo, [&](int64_t dst, int64_t src, int64_t n) {
            std::memcpy(po + dst, pa + src, static_cast<size_t>(n) * sizeof(T));
        });
    });
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi, out_shape, src_shape = a.shape(), lo] {
            if (!oi->has_grad() || !ai->needs_grad) return;
            ai->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                T* ga = ai->grad_values<T>();
                pad_rows(out_shape, src_shape, lo, [&](int64_t dst, int64_t src, int64_t n) {
                    for (int64_t i = 0; i < n; ++i) ga[src + i] += go[dst + i];
                });
            });
        });
    }
    return out;
}

Tensor embedding_rows(const Tensor& table, std::vector<int64_t> indices) {
    if (table.rank() != 2) throw std::invalid_argument("embedding_rows: table must be rank 2");
    const int64_t rows = table.shape()[0], cols = table.shape()[1];
    for (int64_t i : indices)
        if (i < 0 || i >= rows) throw std::invalid_argument("embedding_rows: index out of range");
    Tensor out = Tensor::uninit({static_cast<int64_t>(indices.size()), cols}, table.dtype());
    dispatch(table.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pt = table.data<T>();
        T* po = out.data<T>();
        for (size_t i = 0; i < indices.size(); ++i)
            std::memcpy(po + i * cols, pt + indices[i] * cols,
                        static_cast<size_t>(cols) * sizeof(T));
    });
    if (should_record({&table})) {
        mark_output(out);
        auto ti = table.impl(), oi = out.impl();
        Tape::active().record([ti, oi, indices = std::move(indices), cols] {
            if (!oi->has_grad() || !ti->needs_grad) return;
            ti->ensure_grad();
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                T* gt = ti->grad_values<T>();
                for (size_t i = 0; i < indices.size(); ++i) {
                    T* dst = gt + indices[i] * cols;
                    const T* src = go + i * cols;
                    for (int64_t c = 0; c < cols; ++c) dst[c] += src[c];
                }
            });
        });
    }
    return out;
}

}  // namespace swinseg::ops
