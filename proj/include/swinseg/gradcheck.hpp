#pragma once

#include <functional>

#include "swinseg/tensor.hpp"

namespace swinseg {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Central-difference gradient check of a deterministic scalar function.
/// Returns the max over checked coordinates of
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// When max_coords >= 0 and the tensor is larger, a seeded subset of
/// coordinates is checked. Resets the active tape. Throws NumericError if two
/// forward passes disagree bit-for-bit.
double finite_difference_check(const ScalarFn& f, const Tensor& x, double eps,
                               int64_t max_coords = -1, uint64_t seed = 0);

}  // namespace swinseg
