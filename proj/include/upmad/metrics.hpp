#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "upmad/grid.hpp"

namespace upmad {

/// ET = {4}, TC = {1,4}, WT = {1,2,4}.
struct RegionMasks {
  Mask et, wt, tc;
};

inline constexpr std::array<const char*, 3> kRegionNames{"et", "wt", "tc"};

RegionMasks compose_regions(const Grid<std::uint8_t>& labels);

/// 2|A∩B| / (|A|+|B|). Two empty masks score 1.0; check `both_empty` to tell
/// that case apart from a genuine perfect overlap.
double dice_score(const Mask& a, const Mask& b);
bool both_empty(const Mask& a, const Mask& b);

/// Mask voxels with a 6-neighbour outside the mask or outside the volume,
/// in scan order.
std::vector<Voxel> extract_boundary(const Mask& mask);

/// Physical size of a voxel along each axis.
struct Spacing {
  double z = 1.0, y = 1.0, x = 1.0;
};

/// Symmetric Hausdorff distance between the boundary sets. A bucket grid
/// prunes candidates; the result is bit-identical to the brute-force scan.
/// Throws UndefinedMetricError when either mask is empty.
double hausdorff(const Mask& pred, const Mask& gt, Spacing spacing = {});
double hausdorff_brute_force(const Mask& pred, const Mask& gt, Spacing spacing = {});

struct RegionScore {
  double dice = 0.0;
  bool dice_both_empty = false;
  std::optional<double> hd;  // empty when undefined (a mask is empty)
};

struct MetricReport {
  RegionScore et, wt, tc;

  const RegionScore& region(std::size_t i) const;
  /// `metric=value` lines: dice_et, ..., hd_et (or `undefined`), ...,
  /// dice_et_both_empty (0/1), ...
  std::string serialize() const;
};

MetricReport evaluate_masks(const RegionMasks& pred, const RegionMasks& gt, Spacing spacing = {});

}  // namespace upmad
