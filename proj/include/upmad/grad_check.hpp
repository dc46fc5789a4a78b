#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "upmad/tensor.hpp"

namespace upmad {

struct GradCheckReport {
  /// Over every checked coordinate.
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  /// Coordinates where f(x+h) or f(x-h) took a different ReLU / max-pool /
  /// clamp branch than f(x); central differences are not derivative
  /// estimates there.
  std::size_t kink_coords = 0;
  /// Over the coordinates that stayed on one smooth piece.
  double max_rel_error_smooth = 0.0;
};

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// tensor in `wrt` against central differences (f(x+h)-f(x-h))/2h.
/// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
/// When more than `max_coords` coordinates exist, a seeded random subset
/// of that size is checked. `f` must build its graph from scratch on each
/// call and read the `wrt` tensors through shared handles.
GradCheckReport grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> wrt, double h = 1e-5,
                           std::size_t max_coords = 1000, std::uint64_t seed = 0);

/// Single-input form.
GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                           double h = 1e-5);

}  // namespace upmad
