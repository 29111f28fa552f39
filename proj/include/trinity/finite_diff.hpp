#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "trinity/tape.hpp"
#include "trinity/tensor.hpp"

namespace trinity {

/// Builds a scalar forward pass on the given tape from one input var.
using TapeFn = std::function<Var(Tape&, Var)>;
/// Same, over several input vars.
using MultiTapeFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Central-difference check of the tape gradient of f at x.
/// Returns the max over coordinates of
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_difference_check(const TapeFn& f, const Tensor& x, double h);

/// Multi-input variant probing only the listed (input index, flat coord)
/// pairs; full-tensor probing over every input when coords is empty.
double finite_difference_check(const MultiTapeFn& f, std::span<const Tensor> xs, double h,
                               std::span<const std::pair<int, int64_t>> coords = {});

}  // namespace trinity
