#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "upmad/grid.hpp"
#include "upmad/tensor.hpp"
#include "upmad/volume_io.hpp"

namespace upmad {

/// Gray-level threshold used when no labelled training statistics exist.
inline constexpr double kFallbackDelta = 35.0;

struct PriorConfig {
  std::size_t histogram_bins = 256;
  int component_connectivity = 26;
  int growth_connectivity = 6;
  std::size_t n_seeds = 10;
  /// Region-growing intensity tolerance. Unset means "derive from training
  /// statistics when available, else kFallbackDelta".
  std::optional<double> delta;
  std::uint64_t rng_seed = 0;

  double resolved_delta() const { return delta.value_or(kFallbackDelta); }
  void validate() const;
};

struct TumorStdStats {
  std::vector<double> per_case;
  double min = 0, max = 0;
  /// Lower of the two central values for an even count.
  double median = 0;
  std::size_t skipped = 0;
};

/// Otsu threshold over the nonzero voxels of `flair`. The histogram spans
/// [min, max] of those voxels in `bins` equal bins; the result is the bin
/// edge maximizing w0*w1*(mu0-mu1)^2 (bin-centre means), lowest edge on ties.
/// Throws when fewer than two distinct nonzero intensities exist.
double otsu_threshold(const Grid<float>& flair, std::size_t bins = 256);

/// Keeps the component with the most voxels; ties go to the component whose
/// first voxel comes earliest in scan order.
Mask largest_component(const Mask& mask, int connectivity = 26);

/// n voxels drawn uniformly without replacement (all voxels if fewer).
std::vector<Voxel> select_seeds(const Mask& component, std::size_t n, std::uint64_t rng_seed);

/// Grows from all seeds at once. A voxel joins iff it is connected to the
/// region and |I(v) - mean(I(seeds))| <= delta. Seeds are always included.
Mask region_grow(const Grid<float>& flair, std::span<const Voxel> seeds, double delta, int connectivity = 6);

/// Population standard deviation of FLAIR over label != 0, per case.
/// Cases with fewer than two tumour voxels are skipped with a warning.
TumorStdStats tumor_std_stats(std::span<const MultiModalVolume> cases);

struct PriorResult {
  Mask mask;
  std::optional<double> threshold;
  std::size_t component_size = 0;
  std::vector<Voxel> seeds;
  /// Non-empty when a stage failed and the prior degraded to empty.
  std::string diagnostic;
};

/// Otsu -> binarize above -> largest component -> seeds -> region growing.
/// Never throws on image content; failures yield an empty mask plus diagnostic.
PriorResult generate_prior(const Grid<float>& flair, const PriorConfig& config);

/// Network input [1, C, D, H, W]: FLAIR, T1ce, T1, T2 z-scored over their
/// nonzero voxels, followed by the prior mask as {0,1} when given.
Tensor<float> build_input(const MultiModalVolume& volume, const Mask* prior);

inline Tensor<float> build_input(const MultiModalVolume& volume, const Mask& prior) { return build_input(volume, &prior); }

}  // namespace upmad
