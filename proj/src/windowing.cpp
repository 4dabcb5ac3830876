#include "swinseg/windowing.hpp"

#include "swinseg/ops.hpp"

namespace swinseg::win {

namespace {

void require_grid(const Tensor& tokens) {
    if (tokens.rank() != 4)
        throw std::invalid_argument("expected (H, W, D, C) token grid, got " +
                                    shape_str(tokens.shape()));
}

int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

Tensor pad_to_window_multiple(const Tensor& tokens, int64_t m, PadRecord& rec) {
    require_grid(tokens);
    rec.original = {tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]};
    rec.padded = {round_up(rec.original[0], m), round_up(rec.original[1], m),
                  round_up(rec.original[2], m)};
    if (!rec.any()) return tokens;
    std::vector<int64_t> lo{0, 0, 0, 0};
    std::vector<int64_t> hi{rec.padded[0] - rec.original[0], rec.padded[1] - rec.original[1],
                            rec.padded[2] - rec.original[2], 0};
    return ops::pad(tokens, lo, hi);
}

Tensor crop_from_pad(const Tensor& tokens, const PadRecord& rec) {
    if (!rec.any()) return tokens;
    std::vector<int64_t> lo{0, 0, 0, 0};
    std::vector<int64_t> hi{rec.original[0], rec.original[1], rec.original[2],
                            tokens.shape()[3]};
    return ops::slice(tokens, lo, hi);
}

WindowSet window_partition(const Tensor& tokens, int64_t m) {
    require_grid(tokens);
    const int64_t h = tokens.shape()[0], w = tokens.shape()[1], d = tokens.shape()[2];
    const int64_t c = tokens.shape()[3];
    if (h % m || w % m || d % m)
        throw std::invalid_argument("window_partition: grid " + shape_str(tokens.shape()) +
                                    " is not a multiple of window size " + std::to_string(m));
    Tensor t = ops::reshape(tokens, {h / m, m, w / m, m, d / m, m, c});
    t = ops::permute(t, {0, 2, 4, 1, 3, 5, 6});
    WindowSet ws;
    ws.windows = ops::reshape(t, {(h / m) * (w / m) * (d / m), m * m * m, c});
    ws.grid = {h, w, d};
    ws.m = m;
    return ws;
}

Tensor window_reverse(const WindowSet& ws) {
    const auto [h, w, d] = ws.grid;
    const int64_t m = ws.m;
    const int64_t c = ws.windows.shape()[2];
    const int64_t expect = (h / m) * (w / m) * (d / m);
    if (ws.windows.rank() != 3 || ws.windows.shape()[0] != expect ||
        ws.windows.shape()[1] != m * m * m)
        throw std::invalid_argument("window_reverse: window set " + shape_str(ws.windows.shape()) +
                                    " does not match recorded grid");
    Tensor t = ops::reshape(ws.windows, {h / m, w / m, d / m, m, m, m, c});
    t = ops::permute(t, {0, 3, 1, 4, 2, 5, 6});
    return ops::reshape(t, {h, w, d, c});
}

Tensor cyclic_shift(const Tensor& tokens, int64_t s, bool inverse) {
    require_grid(tokens);
    if (s == 0) return tokens;
    const int64_t r = inverse ? s : -s;
    return ops::roll(tokens, {r, r, r, 0});
}

std::vector<int32_t> region_labels(const Extents& padded, int64_t m, int64_t s,
                                   const Extents& real) {
    auto axis_segment = [&](int64_t coord, int64_t e) -> int32_t {
        if (coord < e - m) return 0;
        if (coord < e - s) return 1;
        return 2;
    };
    std::vector<int32_t> labels(
        static_cast<size_t>(padded[0] * padded[1] * padded[2]));
    constexpr int32_t pad_region = 27;
    int64_t pos = 0;
    for (int64_t i = 0; i < padded[0]; ++i)
        for (int64_t j = 0; j < padded[1]; ++j)
            for (int64_t k = 0; k < padded[2]; ++k, ++pos) {
                if (i >= real[0] || j >= real[1] || k >= real[2]) {
                    labels[pos] = pad_region;
                } else {
                    labels[pos] = (axis_segment(i, padded[0]) * 3 + axis_segment(j, padded[1])) * 3 +
                                  axis_segment(k, padded[2]);
                }
            }
    return labels;
}

Tensor compute_shift_mask(const Extents& padded, int64_t m, int64_t s, const Extents& real,
                          DType dt) {
    if (s >= m || s < 0)
        throw std::invalid_argument("compute_shift_mask: shift " + std::to_string(s) +
                                    " must satisfy 0 <= s < m = " + std::to_string(m));
    for (int a = 0; a < 3; ++a)
        if (padded[a] % m)
            throw std::invalid_argument("compute_shift_mask: extents must be window multiples");
    const int64_t t = m * m * m;
    const int64_t nw = (padded[0] / m) * (padded[1] / m) * (padded[2] / m);
    Tensor mask({nw, 1, t, t}, dt);
    if (s == 0) return mask;  // unshifted windows never straddle regions

    std::vector<int32_t> labels = region_labels(padded, m, s, real);
    // shift the labels exactly the way the tokens are shifted (roll by -s)
    auto shifted_at = [&](int64_t i, int64_t j, int64_t k) {
        const int64_t si = (i + s) % padded[0];
        const int64_t sj = (j + s) % padded[1];
        const int64_t sk = (k + s) % padded[2];
        return labels[(si * padded[1] + sj) * padded[2] + sk];
    };
    // per-window token labels, window-local row-major order
    std::vector<int32_t> wl(static_cast<size_t>(t));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* pm = mask.data<T>();
        int64_t widx = 0;
        for (int64_t wi = 0; wi < padded[0] / m; ++wi)
            for (int64_t wj = 0; wj < padded[1] / m; ++wj)
                for (int64_t wk = 0; wk < padded[2] / m; ++wk, ++widx) {
                    int64_t p = 0;
                    for (int64_t a = 0; a < m; ++a)
                        for (int64_t b = 0; b < m; ++b)
                            for (int64_t c = 0; c < m; ++c, ++p)
                                wl[p] = shifted_at(wi * m + a, wj * m + b, wk * m + c);
                    T* base = pm + widx * t * t;
                    for (int64_t i = 0; i < t; ++i)
                        for (int64_t j = 0; j < t; ++j)
                            base[i * t + j] = wl[i] == wl[j] ? T(0) : T(-kMaskValue);
                }
    });
    return mask;
}

}  // namespace swinseg::win
