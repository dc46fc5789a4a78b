#include "upmad/prior.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "upmad/rng.hpp"

namespace upmad {

void PriorConfig::validate() const {
  if (histogram_bins < 2) throw ConfigError("histogram_bins must be >= 2");
  if (n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
  if (delta && !(*delta > 0)) throw ConfigError("delta must be > 0");
  (void)neighbourhood(component_connectivity);
  (void)neighbourhood(growth_connectivity);
}

double otsu_threshold(const Grid<float>& flair, std::size_t bins) {
  if (bins < 2) throw ConfigError("otsu: need at least 2 bins");
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (float v : flair.data) {
    if (v == 0.0f) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    ++n;
  }
  if (n == 0 || !(hi > lo)) throw Error("otsu: fewer than two distinct nonzero intensities, no valid split");

  const double width = (static_cast<double>(hi) - lo) / static_cast<double>(bins);
  std::vector<double> count(bins, 0.0);
  for (float v : flair.data) {
    if (v == 0.0f) continue;
    auto b = static_cast<std::size_t>((static_cast<double>(v) - lo) / width);
    count[std::min(b, bins - 1)] += 1.0;
  }

  double total_mass = 0, total_sum = 0;
  for (std::size_t i = 0; i < bins; ++i) {
    total_mass += count[i];
    total_sum += count[i] * (lo + (static_cast<double>(i) + 0.5) * width);
  }
  double mass0 = 0, sum0 = 0, best = -1.0;
  std::size_t best_k = 1;
  for (std::size_t k = 1; k < bins; ++k) {
    mass0 += count[k - 1];
    sum0 += count[k - 1] * (lo + (static_cast<double>(k) - 0.5) * width);
    const double mass1 = total_mass - mass0;
    if (mass0 == 0 || mass1 == 0) continue;
    const double w0 = mass0 / total_mass, w1 = mass1 / total_mass;
    const double mu0 = sum0 / mass0, mu1 = (total_sum - sum0) / mass1;
    const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  return lo + static_cast<double>(best_k) * width;
}

Mask largest_component(const Mask& mask, int connectivity) {
  const auto offs = neighbourhood(connectivity);
  std::vector<std::int32_t> label(mask.data.size(), -1);
  std::size_t best_size = 0;
  std::int32_t best_label = -1, next = 0;
  std::deque<Voxel> queue;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (!mask.data[i] || label[i] >= 0) continue;
    const std::int32_t id = next++;
    std::size_t size = 0;
    label[i] = id;
    queue.push_back(mask.voxel(i));
    while (!queue.empty()) {
      const Voxel v = queue.front();
      queue.pop_front();
      ++size;
      for_each_neighbour(mask, v, offs, [&](const Voxel& nb) {
        const std::size_t j = mask.index(nb);
        if (mask.data[j] && label[j] < 0) {
          label[j] = id;
          queue.push_back(nb);
        }
      });
    }
    if (size > best_size) {
      best_size = size;
      best_label = id;
    }
  }
  Mask out(mask.dims, 0);
  if (best_label < 0) return out;
  for (std::size_t i = 0; i < label.size(); ++i) out.data[i] = label[i] == best_label;
  return out;
}

std::vector<Voxel> select_seeds(const Mask& component, std::size_t n, std::uint64_t rng_seed) {
  std::vector<Voxel> members;
  for (std::size_t i = 0; i < component.data.size(); ++i) {
    if (component.data[i]) members.push_back(component.voxel(i));
  }
  if (members.empty()) throw Error("select_seeds: empty component");
  if (members.size() <= n) return members;
  Rng rng = make_rng(rng_seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, members.size() - 1);
    std::swap(members[i], members[pick(rng)]);
  }
  members.resize(n);
  return members;
}

Mask region_grow(const Grid<float>& flair, std::span<const Voxel> seeds, double delta, int connectivity) {
  if (seeds.empty()) throw Error("region_grow: no seeds");
  const auto offs = neighbourhood(connectivity);
  double acc = 0;
  for (const auto& s : seeds) {
    if (!flair.contains(s)) {
      throw ShapeError("region_grow: seed (" + std::to_string(s.z) + "," + std::to_string(s.y) + "," +
                       std::to_string(s.x) + ") outside " + flair.dims.str());
    }
    acc += flair[s];
  }
  const double mu = acc / static_cast<double>(seeds.size());

  Mask out(flair.dims, 0);
  std::deque<Voxel> queue;
  for (const auto& s : seeds) {
    if (!out[s]) {
      out[s] = 1;
      queue.push_back(s);
    }
  }
  while (!queue.empty()) {
    const Voxel v = queue.front();
    queue.pop_front();
    for_each_neighbour(flair, v, offs, [&](const Voxel& nb) {
      if (out[nb]) return;
      if (std::abs(static_cast<double>(flair[nb]) - mu) <= delta) {
        out[nb] = 1;
        queue.push_back(nb);
      }
    });
  }
  return out;
}

TumorStdStats tumor_std_stats(std::span<const MultiModalVolume> cases) {
  TumorStdStats st;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& cs = cases[c];
    if (!cs.labels) throw ConfigError("tumor_std_stats: case " + std::to_string(c) + " has no labels");
    const auto& fl = cs.flair();
    double s = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < fl.data.size(); ++i) {
      if (cs.labels->data[i] != 0) {
        s += fl.data[i];
        ++n;
      }
    }
    if (n < 2) {
      spdlog::warn("tumor_std_stats: case {} has {} tumour voxels, skipped", c, n);
      ++st.skipped;
      continue;
    }
    const double mu = s / static_cast<double>(n);
    double ss = 0;
    for (std::size_t i = 0; i < fl.data.size(); ++i) {
      if (cs.labels->data[i] != 0) ss += (fl.data[i] - mu) * (fl.data[i] - mu);
    }
    st.per_case.push_back(std::sqrt(ss / static_cast<double>(n)));
  }
  if (st.per_case.empty()) throw Error("tumor_std_stats: every case was skipped");
  std::vector<double> sorted = st.per_case;
  std::sort(sorted.begin(), sorted.end());
  st.min = sorted.front();
  st.max = sorted.back();
  st.median = sorted[(sorted.size() - 1) / 2];
  return st;
}

PriorResult generate_prior(const Grid<float>& flair, const PriorConfig& config) {
  config.validate();
  PriorResult r;
  r.mask = Mask(flair.dims, 0);
  double t = 0;
  try {
    t = otsu_threshold(flair, config.histogram_bins);
  } catch (const Error& e) {
    r.diagnostic = std::string("prior skipped: ") + e.what();
    spdlog::warn("{}", r.diagnostic);
    return r;
  }
  r.threshold = t;
  Mask candidates(flair.dims, 0);
  for (std::size_t i = 0; i < flair.data.size(); ++i) {
    candidates.data[i] = flair.data[i] != 0.0f && flair.data[i] > t;
  }
  const Mask component = largest_component(candidates, config.component_connectivity);
  r.component_size = count_nonzero(component);
  if (r.component_size == 0) {
    r.diagnostic = "prior skipped: no voxel above the Otsu threshold";
    spdlog::warn("{}", r.diagnostic);
    return r;
  }
  r.seeds = select_seeds(component, config.n_seeds, config.rng_seed);
  r.mask = region_grow(flair, r.seeds, config.resolved_delta(), config.growth_connectivity);
  return r;
}

Tensor<float> build_input(const MultiModalVolume& volume, const Mask* prior) {
  volume.validate();
  const Dims d = volume.dims();
  if (prior != nullptr && !(prior->dims == d)) throw ShapeError("prior dims " + prior->dims.str() + " differ from " + d.str());
  const std::size_t channels = prior ? 5 : 4, S = d.count();
  Tensor<float> x(Shape{1, channels, d.d, d.h, d.w});
  auto out = x.mutable_data();
  for (std::size_t m = 0; m < 4; ++m) {
    const auto& g = volume.modalities[m].data;
    double s = 0;
    std::size_t n = 0;
    for (float v : g) {
      if (v != 0.0f) {
        s += v;
        ++n;
      }
    }
    if (n == 0) continue;
    const double mu = s / static_cast<double>(n);
    double ss = 0;
    for (float v : g) {
      if (v != 0.0f) ss += (v - mu) * (v - mu);
    }
    double sd = std::sqrt(ss / static_cast<double>(n));
    if (sd == 0) sd = 1;
    for (std::size_t i = 0; i < S; ++i) {
      out[m * S + i] = g[i] != 0.0f ? static_cast<float>((g[i] - mu) / sd) : 0.0f;
    }
  }
  if (prior) {
    for (std::size_t i = 0; i < S; ++i) out[4 * S + i] = prior->data[i] ? 1.0f : 0.0f;
  }
  return x;
}

}  // namespace upmad
