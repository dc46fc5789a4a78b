#include "upmad/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "upmad/rng.hpp"

namespace upmad {

IntensityTable default_intensity_table() {
  //        FLAIR   T1ce    T1     T2
  return {{{0.f, 0.f, 0.f, 0.f},             // background
           {100.f, 100.f, 120.f, 100.f},     // brain
           {320.f, 110.f, 90.f, 300.f},      // edema
           {305.f, 40.f, 60.f, 260.f},       // necrosis
           {315.f, 350.f, 90.f, 200.f}}};    // enhancing
}

void PhantomSpec::validate() const {
  if (dims.d < 16 || dims.h < 16 || dims.w < 8) throw ConfigError("phantom dims must be >= 16x16x8, got " + dims.str());
  if (!(0 < et_ratio && et_ratio < tc_ratio && tc_ratio < 1)) throw ConfigError("phantom radii must nest: 0 < et < tc < 1");
  if (!(0 < wt_radius_min && wt_radius_min <= wt_radius_max && wt_radius_max < brain_radius && brain_radius <= 0.5)) {
    throw ConfigError("phantom radii must satisfy 0 < wt_min <= wt_max < brain <= 0.5");
  }
  if (noise_sigma < 0) throw ConfigError("noise sigma must be >= 0");
  const auto& t = intensity;
  const float brain = t[1][0];
  for (std::size_t c = 2; c < 5; ++c) {
    if (!(t[c][0] > brain)) throw ConfigError("FLAIR tumour intensities must exceed brain intensity");
  }
  if (!(brain > 0)) throw ConfigError("FLAIR brain intensity must be positive");
}

namespace {

struct Ellipsoid {
  double cz, cy, cx, az, ay, ax;
  bool contains(std::size_t z, std::size_t y, std::size_t x) const {
    const double dz = (static_cast<double>(z) + 0.5 - cz) / az;
    const double dy = (static_cast<double>(y) + 0.5 - cy) / ay;
    const double dx = (static_cast<double>(x) + 0.5 - cx) / ax;
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
  Ellipsoid scaled(double f) const { return {cz, cy, cx, az * f, ay * f, ax * f}; }
};

}  // namespace

MultiModalVolume gen_phantom(const PhantomSpec& spec, std::size_t case_index) {
  spec.validate();
  const Dims d = spec.dims;
  Rng rng = make_rng(derive_seed(spec.rng_seed, {case_index}));
  const Ellipsoid brain{d.d / 2.0, d.h / 2.0, d.w / 2.0, spec.brain_radius * d.d, spec.brain_radius * d.h,
                        spec.brain_radius * d.w};

  std::uniform_real_distribution<double> radius(spec.wt_radius_min, spec.wt_radius_max);
  const double r = radius(rng);
  const double az = r * d.d, ay = r * d.h, ax = r * d.w;

  Ellipsoid wt{};
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    std::uniform_real_distribution<double> pz(az, d.d - az), py(ay, d.h - ay), px(ax, d.w - ax);
    wt = {pz(rng), py(rng), px(rng), az, ay, ax};
    placed = true;
    for (std::size_t z = 0; z < d.d && placed; ++z)
      for (std::size_t y = 0; y < d.h && placed; ++y)
        for (std::size_t x = 0; x < d.w && placed; ++x)
          if (wt.contains(z, y, x) && !brain.contains(z, y, x)) placed = false;
  }
  if (!placed) throw Error("gen_phantom: tumour does not fit inside the brain after 100 attempts");
  const Ellipsoid tc = wt.scaled(spec.tc_ratio), et = wt.scaled(spec.et_ratio);

  MultiModalVolume v;
  for (auto& m : v.modalities) m = Grid<float>(d, 0.f);
  v.labels = Grid<std::uint8_t>(d, 0);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        if (!brain.contains(z, y, x)) continue;
        Tissue t = Tissue::Brain;
        std::uint8_t code = 0;
        if (et.contains(z, y, x)) {
          t = Tissue::Enhancing, code = 4;
        } else if (tc.contains(z, y, x)) {
          t = Tissue::Necrosis, code = 1;
        } else if (wt.contains(z, y, x)) {
          t = Tissue::Edema, code = 2;
        }
        v.labels->at(z, y, x) = code;
        for (std::size_t m = 0; m < 4; ++m) {
          double val = spec.intensity[static_cast<std::size_t>(t)][m];
          if (spec.noise_sigma > 0) val += spec.noise_sigma * noise(rng);
          // Inside the head intensities stay strictly positive; zero marks air.
          v.modalities[m].at(z, y, x) = static_cast<float>(std::max(val, 1.0));
        }
      }
  return v;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> ratios) {
  double total = 0;
  for (double r : ratios) {
    if (r < 0) throw ConfigError("split ratios must be non-negative");
    total += r;
  }
  if (total <= 0) throw ConfigError("split ratios must not all be zero");
  std::array<std::size_t, 3> size{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * ratios[i] / total;
    size[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(size[i]);
    assigned += size[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++size[order[k % 3]];
  return size;
}

DatasetSplit split_dataset(std::span<const std::size_t> case_ids, std::array<double, 3> ratios, std::uint64_t seed) {
  const auto sizes = split_sizes(case_ids.size(), ratios);
  for (int i = 0; i < 3; ++i) {
    if (ratios[i] > 0 && sizes[i] == 0) {
      throw ConfigError("too few cases (" + std::to_string(case_ids.size()) + ") for a non-empty split");
    }
  }
  std::vector<std::size_t> ids(case_ids.begin(), case_ids.end());
  Rng rng = make_rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  DatasetSplit s;
  auto it = ids.begin();
  s.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  s.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  s.test.assign(it, ids.end());
  return s;
}

}  // namespace upmad
