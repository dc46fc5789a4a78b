#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace upmad {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t coords_checked = 0;
  std::size_t kink_coords = 0;
  double max_rel_error_smooth = 0;
  double seconds = 0;

  /// Strict: every checked coordinate, kinks included.
  bool passed() const { return max_rel_error < tolerance; }
  bool passed_smooth() const { return max_rel_error_smooth < tolerance; }
};

/// 64-bit finite-difference checks (h = 1e-5, dropout off) for every
/// primitive, every network block (inputs and parameters), the losses, and
/// the combined loss through the full network at 1x5x8x8x8 with respect to
/// the network input.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace upmad
