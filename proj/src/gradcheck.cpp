#include "swinseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace swinseg {

double finite_difference_check(const ScalarFn& f, const Tensor& x, double eps,
                               int64_t max_coords, uint64_t seed) {
    {
        NoGrad ng;
        Tensor y1 = f(x);
        Tensor y2 = f(x);
        if (y1.numel() != 1)
            throw std::invalid_argument("finite_difference_check: f must be scalar-valued");
        if (!y1.same_bits(y2))
            throw NumericError("finite_difference_check: f is not deterministic");
    }

    Tape::active().reset();
    Tensor xg = x.clone().set_requires_grad(true);
    Tensor loss = f(xg);
    Tape::active().backward(loss);
    Tensor analytic = xg.grad();
    Tape::active().reset();
    if (!analytic.defined())
        throw std::runtime_error("finite_difference_check: no gradient reached the input");

    std::vector<int64_t> coords(static_cast<size_t>(x.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords >= 0 && max_coords < x.numel()) {
        std::mt19937_64 rng(mix_seed(seed, {0x6664636b, static_cast<uint64_t>(x.numel())}));
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(static_cast<size_t>(max_coords));
    }

    NoGrad ng;
    double max_rel = 0.0;
    for (int64_t i : coords) {
        const double v = x.at(i);
        Tensor xp = x.clone();
        xp.set(i, v + eps);
        const double fp = f(xp).item();
        Tensor xm = x.clone();
        xm.set(i, v - eps);
        const double fm = f(xm).item();
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic.at(i);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace swinseg
