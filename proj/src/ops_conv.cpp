#include <algorithm>
#include <cstring>

#include "ops_internal.hpp"
#include "swinseg/ops.hpp"

namespace swinseg::ops {

using detail::gemm;
using detail::mark_output;
using detail::should_record;

namespace {

struct ConvDims {
    int64_t n, cin, h, w, d;       // input
    int64_t cout, kh, kw, kd;      // kernel
    int64_t oh, ow, od;            // output spatial
    int64_t stride, pad;
    int64_t k() const { return cin * kh * kw * kd; }         // im2col rows (conv)
    int64_t kc() const { return cout * kh * kw * kd; }       // col rows (transpose)
    int64_t in_spatial() const { return h * w * d; }
    int64_t out_spatial() const { return oh * ow * od; }
};

// One output-row slab (fixed oh) of the im2col matrix: rows (ci, akh, akw,
// akd), columns (ow, od). Out-of-range taps are zero.
template <class T>
void im2col_slab(const T* x, const ConvDims& dm, int64_t oh, T* col) {
    const int64_t p_slab = dm.ow * dm.od;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < dm.k(); ++r) {
        int64_t t = r;
        const int64_t akd = t % dm.kd;
        t /= dm.kd;
        const int64_t akw = t % dm.kw;
        t /= dm.kw;
        const int64_t akh = t % dm.kh;
        const int64_t ci = t / dm.kh;
        T* dst = col + r * p_slab;
        const int64_t ih = oh * dm.stride - dm.pad + akh;
        if (ih < 0 || ih >= dm.h) {
            std::fill_n(dst, p_slab, T(0));
            continue;
        }
        const T* plane = x + (ci * dm.h + ih) * dm.w * dm.d;
        const int64_t off_d = akd - dm.pad;
        for (int64_t ow = 0; ow < dm.ow; ++ow) {
            const int64_t iw = ow * dm.stride - dm.pad + akw;
            T* drow = dst + ow * dm.od;
            if (iw < 0 || iw >= dm.w) {
                std::fill_n(drow, dm.od, T(0));
                continue;
            }
            const T* srow = plane + iw * dm.d;
            if (dm.stride == 1) {
                const int64_t lo = std::clamp<int64_t>(-off_d, 0, dm.od);
                const int64_t hi = std::clamp<int64_t>(dm.d - off_d, lo, dm.od);
                std::fill_n(drow, lo, T(0));
                if (hi > lo)
                    std::memcpy(drow + lo, srow + lo + off_d,
                                static_cast<size_t>(hi - lo) * sizeof(T));
                std::fill_n(drow + hi, dm.od - hi, T(0));
            } else {
                for (int64_t od = 0; od < dm.od; ++od) {
                    const int64_t id = od * dm.stride + off_d;
                    drow[od] = (id >= 0 && id < dm.d) ? srow[id] : T(0);
                }
            }
        }
    }
}

// Adjoint of im2col_slab: scatter-adds col values back into the input
// gradient. Taps overlap, so this stays serial.
template <class T>
void col2im_add_slab(const T* col, const ConvDims& dm, int64_t oh, T* gx) {
    const int64_t p_slab = dm.ow * dm.od;
    for (int64_t r = 0; r < dm.k(); ++r) {
        int64_t t = r;
        const int64_t akd = t % dm.kd;
        t /= dm.kd;
        const int64_t akw = t % dm.kw;
        t /= dm.kw;
        const int64_t akh = t % dm.kh;
        const int64_t ci = t / dm.kh;
        const T* src = col + r * p_slab;
        const int64_t ih = oh * dm.stride - dm.pad + akh;
        if (ih < 0 || ih >= dm.h) continue;
        T* plane = gx + (ci * dm.h + ih) * dm.w * dm.d;
        const int64_t off_d = akd - dm.pad;
        for (int64_t ow = 0; ow < dm.ow; ++ow) {
            const int64_t iw = ow * dm.stride - dm.pad + akw;
            if (iw < 0 || iw >= dm.w) continue;
            T* drow = plane + iw * dm.d;
            const T* srow = src + ow * dm.od;
            for (int64_t od = 0; od < dm.od; ++od) {
                const int64_t id = od * dm.stride + off_d;
                if (id >= 0 && id < dm.d) drow[id] += srow[od];
            }
        }
    }
}

// Gather slab used by conv_transpose3d: rows (co, akh, akw, akd), columns
// (iw, id); entry = src[co][ih*s+akh-p][iw*s+akw-p][id*s+akd-p] or zero.
template <class T>
void gather_out_slab(const T* src, const ConvDims& dm, int64_t ih, T* col) {
    const int64_t p_slab = dm.w * dm.d;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < dm.kc(); ++r) {
        int64_t t = r;
        const int64_t akd = t % dm.kd;
        t /= dm.kd;
        const int64_t akw = t % dm.kw;
        t /= dm.kw;
        const int64_t akh = t % dm.kh;
        const int64_t co = t / dm.kh;
        T* dst = col + r * p_slab;
        const int64_t oh = ih * dm.stride + akh - dm.pad;
        if (oh < 0 || oh >= dm.oh) {
            std::fill_n(dst, p_slab, T(0));
            continue;
        }
        const T* plane = src + (co * dm.oh + oh) * dm.ow * dm.od;
        for (int64_t iw = 0; iw < dm.w; ++iw) {
            const int64_t ow = iw * dm.stride + akw - dm.pad;
            T* drow = dst + iw * dm.d;
            if (ow < 0 || ow >= dm.ow) {
                std::fill_n(drow, dm.d, T(0));
                continue;
            }
            const T* srow = plane + ow * dm.od;
            for (int64_t id = 0; id < dm.d; ++id) {
                const int64_t od = id * dm.stride + akd - dm.pad;
                drow[id] = (od >= 0 && od < dm.od) ? srow[od] : T(0);
            }
        }
    }
}

// Adjoint of gather_out_slab: scatter-adds col rows into the output volume.
// Parallel over co; a given co's rows touch disjoint channels.
template <class T>
void scatter_out_add_slab(const T* col, const ConvDims& dm, int64_t ih, T* out) {
    const int64_t p_slab = dm.w * dm.d;
    const int64_t taps = dm.kh * dm.kw * dm.kd;
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < dm.cout; ++co) {
        for (int64_t tap = 0; tap < taps; ++tap) {
            int64_t t = tap;
            const int64_t akd = t % dm.kd;
            t /= dm.kd;
            const int64_t akw = t % dm.kw;
            const int64_t akh = t / dm.kw;
            const T* src = col + (co * taps + tap) * p_slab;
            const int64_t oh = ih * dm.stride + akh - dm.pad;
            if (oh < 0 || oh >= dm.oh) continue;
            T* plane = out + (co * dm.oh + oh) * dm.ow * dm.od;
            for (int64_t iw = 0; iw < dm.w; ++iw) {
                const int64_t ow = iw * dm.stride + akw - dm.pad;
                if (ow < 0 || ow >= dm.ow) continue;
                T* drow = plane + ow * dm.od;
                const T* srow = src + iw * dm.d;
                for (int64_t id = 0; id < dm.d; ++id) {
                    const int64_t od = id * dm.stride + akd - dm.pad;
                    if (od >= 0 && od < dm.od) drow[od] += srow[id];
                }
            }
        }
    }
}

void check_bias(const Tensor& bias, int64_t cout, const char* name) {
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != cout))
        throw std::invalid_argument(std::string(name) + ": bias must have extent " +
                                    std::to_string(cout));
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    detail::require_same_dtype(x, w, "conv3d");
    if (x.rank() != 5 || w.rank() != 5)
        throw std::invalid_argument("conv3d: expected x (N,Cin,H,W,D) and w (Cout,Cin,kh,kw,kd), "
                                    "got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
    if (x.shape()[1] != w.shape()[1])
        throw std::invalid_argument("conv3d: channel mismatch between x " + shape_str(x.shape()) +
                                    " and w " + shape_str(w.shape()));
    ConvDims dm;
    dm.n = x.shape()[0];
    dm.cin = x.shape()[1];
    dm.h = x.shape()[2];
    dm.w = x.shape()[3];
    dm.d = x.shape()[4];
    dm.cout = w.shape()[0];
    dm.kh = w.shape()[2];
    dm.kw = w.shape()[3];
    dm.kd = w.shape()[4];
    dm.stride = stride;
    dm.pad = padding;
    dm.oh = (dm.h + 2 * padding - dm.kh) / stride + 1;
    dm.ow = (dm.w + 2 * padding - dm.kw) / stride + 1;
    dm.od = (dm.d + 2 * padding - dm.kd) / stride + 1;
    if (dm.h + 2 * padding < dm.kh || dm.w + 2 * padding < dm.kw || dm.d + 2 * padding < dm.kd)
        throw std::invalid_argument("conv3d: kernel " + shape_str(w.shape()) +
                                    " larger than padded input " + shape_str(x.shape()));
    check_bias(bias, dm.cout, "conv3d");

    Tensor out = Tensor::uninit({dm.n, dm.cout, dm.oh, dm.ow, dm.od}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pw = w.data<T>();
        T* po = out.data<T>();
        const bool pointwise =
            dm.kh == 1 && dm.kw == 1 && dm.kd == 1 && dm.stride == 1 && dm.pad == 0;
        const int64_t p_slab = dm.ow * dm.od;
        std::vector<T> col_a(pointwise ? 0 : static_cast<size_t>(dm.k() * p_slab));
        std::vector<T> col_b(pointwise ? 0 : static_cast<size_t>(dm.k() * p_slab));
        for (int64_t n = 0; n < dm.n; ++n) {
            const T* xs = px + n * dm.cin * dm.in_spatial();
            T* os = po + n * dm.cout * dm.out_spatial();
            if (pointwise) {
                // 1x1x1 stride-1: the input already is the column matrix
                gemm<T>(false, false, dm.cout, dm.out_spatial(), dm.cin, T(1), pw, dm.cin, xs,
                        dm.in_spatial(), T(0), os, dm.out_spatial());
                continue;
            }
            // double-buffered: GEMM of the current slab overlaps the im2col
            // of the next one
            im2col_slab<T>(xs, dm, 0, col_a.data());
            for (int64_t oh = 0; oh < dm.oh; ++oh) {
                T* cur = (oh % 2 == 0) ? col_a.data() : col_b.data();
                T* nxt = (oh % 2 == 0) ? col_b.data() : col_a.data();
#pragma omp parallel sections num_threads(2)
                {
#pragma omp section
                    {
                        gemm<T>(false, false, dm.cout, p_slab, dm.k(), T(1), pw, dm.k(), cur,
                                p_slab, T(0), os + oh * p_slab, dm.out_spatial());
                    }
#pragma omp section
                    {
                        if (oh + 1 < dm.oh) im2col_slab<T>(xs, dm, oh + 1, nxt);
                    }
                }
            }
        }
        if (bias.defined()) {
            const T* pb = bias.data<T>();
#pragma omp parallel for schedule(static) collapse(2)
            for (int64_t n = 0; n < dm.n; ++n)
                for (int64_t co = 0; co < dm.cout; ++co) {
                    T* plane = po + (n * dm.cout + co) * dm.out_spatial();
                    const T b = pb[co];
                    for (int64_t i = 0; i < dm.out_spatial(); ++i) plane[i] += b;
                }
        }
    });
    check_finite(out, "conv3d");
    if (should_record({&x, &w, &bias})) {
        mark_output(out);
        auto xi = x.impl(), wi = w.impl(), oi = out.impl();
        auto bi = bias.defined() ? bias.impl() : nullptr;
        Tape::active().record([xi, wi, bi, oi, dm] {
            if (!oi->has_grad()) return;
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                const int64_t p_slab = dm.ow * dm.od;
                const bool need_x = xi->needs_grad, need_w = wi->needs_grad;
                if (need_x) xi->ensure_grad();
                if (need_w) wi->ensure_grad();
                if (need_x || need_w) {
                    std::vector<T> col(static_cast<size_t>(dm.k() * p_slab));
                    std::vector<T> colg(need_x ? static_cast<size_t>(dm.k() * p_slab) : 0);
                    for (int64_t n = 0; n < dm.n; ++n) {
                        const T* xs = xi->values<T>() + n * dm.cin * dm.in_spatial();
                        const T* gos = go + n * dm.cout * dm.out_spatial();
                        T* gxs = need_x
                                     ? xi->grad_values<T>() + n * dm.cin * dm.in_spatial()
                                     : nullptr;
                        for (int64_t oh = 0; oh < dm.oh; ++oh) {
                            im2col_slab<T>(xs, dm, oh, col.data());
                            if (need_w)
                                gemm<T>(false, true, dm.cout, dm.k(), p_slab, T(1),
                                        gos + oh * p_slab, dm.out_spatial(), col.data(), p_slab,
                                        T(1), wi->grad_values<T>(), dm.k());
                            if (need_x) {
                                gemm<T>(true, false, dm.k(), p_slab, dm.cout, T(1), wi->values<T>(),
                                        dm.k(), gos + oh * p_slab, dm.out_spatial(), T(0),
                                        colg.data(), p_slab);
                                col2im_add_slab<T>(colg.data(), dm, oh, gxs);
                            }
                        }
                    }
                }
                if (bi && bi->needs_grad) {
                    bi->ensure_grad();
                    T* gb = bi->grad_values<T>();
                    for (int64_t n = 0; n < dm.n; ++n)
                        for (int64_t co = 0; co < dm.cout; ++co) {
                            const T* plane = go + (n * dm.cout + co) * dm.out_spatial();
                            double acc = 0.0;
                            for (int64_t i = 0; i < dm.out_spatial(); ++i)
                                acc += static_cast<double>(plane[i]);
                            gb[co] += static_cast<T>(acc);
                        }
                }
            });
        });
    }
    return out;
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                        int padding) {
    detail::require_same_dtype(x, w, "conv_transpose3d");
    if (x.rank() != 5 || w.rank() != 5)
        throw std::invalid_argument(
            "conv_transpose3d: expected x (N,Cin,H,W,D) and w (Cin,Cout,kh,kw,kd), got " +
            shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (stride < 1) throw std::invalid_argument("conv_transpose3d: stride must be >= 1");
    if (x.shape()[1] != w.shape()[0])
        throw std::invalid_argument("conv_transpose3d: channel mismatch between x " +
                                    shape_str(x.shape()) + " and w " + shape_str(w.shape()));
    ConvDims dm;
    dm.n = x.shape()[0];
    dm.cin = x.shape()[1];
    dm.h = x.shape()[2];
    dm.w = x.shape()[3];
    dm.d = x.shape()[4];
    dm.cout = w.shape()[1];
    dm.kh = w.shape()[2];
    dm.kw = w.shape()[3];
    dm.kd = w.shape()[4];
    dm.stride = stride;
    dm.pad = padding;
    dm.oh = (dm.h - 1) * stride + dm.kh - 2 * padding;
    dm.ow = (dm.w - 1) * stride + dm.kw - 2 * padding;
    dm.od = (dm.d - 1) * stride + dm.kd - 2 * padding;
    if (dm.oh < 1 || dm.ow < 1 || dm.od < 1)
        throw std::invalid_argument("conv_transpose3d: empty output for input " +
                                    shape_str(x.shape()) + " and kernel " + shape_str(w.shape()));
    check_bias(bias, dm.cout, "conv_transpose3d");

    Tensor out({dm.n, dm.cout, dm.oh, dm.ow, dm.od}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pw = w.data<T>();
        T* po = out.data<T>();
        const int64_t p_slab = dm.w * dm.d;
        std::vector<T> col(static_cast<size_t>(dm.kc() * p_slab));
        for (int64_t n = 0; n < dm.n; ++n) {
            const T* xs = px + n * dm.cin * dm.in_spatial();
            T* os = po + n * dm.cout * dm.out_spatial();
            for (int64_t ih = 0; ih < dm.h; ++ih) {
                // col = W^T . x-slab, then scatter to strided output taps
                gemm<T>(true, false, dm.kc(), p_slab, dm.cin, T(1), pw, dm.kc(),
                        xs + ih * p_slab, dm.in_spatial(), T(0), col.data(), p_slab);
                scatter_out_add_slab<T>(col.data(), dm, ih, os);
            }
        }
        if (bias.defined()) {
            const T* pb = bias.data<T>();
#pragma omp parallel for schedule(static) collapse(2)
            for (int64_t n = 0; n < dm.n; ++n)
                for (int64_t co = 0; co < dm.cout; ++co) {
                    T* plane = po + (n * dm.cout + co) * dm.out_spatial();
                    const T b = pb[co];
                    for (int64_t i = 0; i < dm.out_spatial(); ++i) plane[i] += b;
                }
        }
    });
    check_finite(out, "conv_transpose3d");
    if (should_record({&x, &w, &bias})) {
        mark_output(out);
        auto xi = x.impl(), wi = w.impl(), oi = out.impl();
        auto bi = bias.defined() ? bias.impl() : nullptr;
        Tape::active().record([xi, wi, bi, oi, dm] {
            if (!oi->has_grad()) return;
            dispatch(oi->dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* go = oi->grad_values<T>();
                const int64_t p_slab = dm.w * dm.d;
                const bool need_x = xi->needs_grad, need_w = wi->needs_grad;
                if (need_x) xi->ensure_grad();
                if (need_w) wi->ensure_grad();
                if (need_x || need_w) {
                    std::vector<T> col(static_cast<size_t>(dm.kc() * p_slab));
                    for (int64_t n = 0; n < dm.n; ++n) {
                        const T* xs = xi->values<T>() + n * dm.cin * dm.in_spatial();
                        const T* gos = go + n * dm.cout * dm.out_spatial();
                        for (int64_t ih = 0; ih < dm.h; ++ih) {
                            gather_out_slab<T>(gos, dm, ih, col.data());
                            if (need_x)
                                gemm<T>(false, false, dm.cin, p_slab, dm.kc(), T(1),
                                        wi->values<T>(), dm.kc(), col.data(), p_slab, T(1),
                                        xi->grad_values<T>() + n * dm.cin * dm.in_spatial() +
                                            ih * p_slab,
                                        dm.in_spatial());
                            if (need_w)
                                gemm<T>(false, true, dm.cin, dm.kc(), p_slab, T(1),
                                        xs + ih * p_slab, dm.in_spatial(), col.data(), p_slab,
                                        T(1), wi->grad_values<T>(), dm.kc());
                        }
                    }
                }
                if (bi && bi->needs_grad) {
                    bi->ensure_grad();
                    T* gb = bi->grad_values<T>();
                    for (int64_t n = 0; n < dm.n; ++n)
                        for (int64_t co = 0; co < dm.cout; ++co) {
                            const T* plane = go + (n * dm.cout + co) * dm.out_spatial();
                            double acc = 0.0;
                            for (int64_t i = 0; i < dm.out_spatial(); ++i)
                                acc += static_cast<double>(plane[i]);
                            gb[co] += static_cast<T>(acc);
                        }
                }
            });
        });
    }
    return out;
}

}  // namespace swinseg::ops
