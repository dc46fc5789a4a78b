#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "upmad/volume_io.hpp"

namespace upmad {

enum class Tissue : std::size_t { Background = 0, Brain = 1, Edema = 2, Necrosis = 3, Enhancing = 4 };

/// Mean intensity per tissue class (rows) and modality (FLAIR, T1ce, T1, T2).
using IntensityTable = std::array<std::array<float, 4>, 5>;

IntensityTable default_intensity_table();

/// Synthetic multi-modal case: a centred brain ellipsoid containing three
/// nested tumour ellipsoids (edema shell 2, necrosis shell 1, enhancing core 4).
struct PhantomSpec {
  Dims dims{32, 32, 16};
  std::size_t n_cases = 10;
  std::uint64_t rng_seed = 0;
  /// Brain semi-axes as a fraction of each extent.
  double brain_radius = 0.42;
  /// Whole-tumour semi-axes, fraction of each extent, drawn per case.
  double wt_radius_min = 0.20;
  double wt_radius_max = 0.28;
  /// Core radii relative to the whole-tumour radius (et < tc < 1).
  double tc_ratio = 0.7;
  double et_ratio = 0.45;
  /// Gaussian noise added inside the brain.
  double noise_sigma = 5.0;
  IntensityTable intensity = default_intensity_table();

  void validate() const;
};

/// Deterministic per (spec.rng_seed, case_index).
MultiModalVolume gen_phantom(const PhantomSpec& spec, std::size_t case_index);

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;
};

/// Part sizes by largest-remainder rounding of n * ratio / sum(ratios);
/// leftover units go to the largest fractional parts, earlier parts first on ties.
std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> ratios);

/// Seeded shuffle then contiguous slicing. Throws if any part with a
/// positive ratio would be empty.
DatasetSplit split_dataset(std::span<const std::size_t> case_ids, std::array<double, 3> ratios = {8, 1, 1},
                           std::uint64_t seed = 0);

}  // namespace upmad
