#include "upmad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace upmad {

RegionMasks compose_regions(const Grid<std::uint8_t>& labels) {
  RegionMasks r{Mask(labels.dims, 0), Mask(labels.dims, 0), Mask(labels.dims, 0)};
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const auto c = labels.data[i];
    if (c != 0 && c != 1 && c != 2 && c != 4) throw Error("compose_regions: unknown label code " + std::to_string(c));
    r.et.data[i] = c == 4;
    r.tc.data[i] = c == 1 || c == 4;
    r.wt.data[i] = c != 0;
  }
  return r;
}

namespace {
void require_same_dims(const Mask& a, const Mask& b, const char* op) {
  if (!(a.dims == b.dims)) throw ShapeError(std::string(op) + ": " + a.dims.str() + " vs " + b.dims.str());
}
}  // namespace

double dice_score(const Mask& a, const Mask& b) {
  require_same_dims(a, b, "dice_score");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

bool both_empty(const Mask& a, const Mask& b) { return count_nonzero(a) == 0 && count_nonzero(b) == 0; }

std::vector<Voxel> extract_boundary(const Mask& mask) {
  static const auto offs = neighbourhood(6);
  std::vector<Voxel> out;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (!mask.data[i]) continue;
    const Voxel v = mask.voxel(i);
    bool edge = false;
    for (const auto& o : offs) {
      const auto z = static_cast<std::ptrdiff_t>(v.z) + o.dz, y = static_cast<std::ptrdiff_t>(v.y) + o.dy,
                 x = static_cast<std::ptrdiff_t>(v.x) + o.dx;
      if (z < 0 || y < 0 || x < 0 || z >= static_cast<std::ptrdiff_t>(mask.dims.d) ||
          y >= static_cast<std::ptrdiff_t>(mask.dims.h) || x >= static_cast<std::ptrdiff_t>(mask.dims.w) ||
          !mask.at(static_cast<std::size_t>(z), static_cast<std::size_t>(y), static_cast<std::size_t>(x))) {
        edge = true;
        break;
      }
    }
    if (edge) out.push_back(v);
  }
  return out;
}

namespace {

double sq_dist(const Voxel& a, const Voxel& b, const Spacing& s) {
  const double dz = (static_cast<double>(a.z) - static_cast<double>(b.z)) * s.z;
  const double dy = (static_cast<double>(a.y) - static_cast<double>(b.y)) * s.y;
  const double dx = (static_cast<double>(a.x) - static_cast<double>(b.x)) * s.x;
  return dz * dz + dy * dy + dx * dx;
}

void require_nonempty(const Mask& pred, const Mask& gt) {
  require_same_dims(pred, gt, "hausdorff");
  if (count_nonzero(pred) == 0 || count_nonzero(gt) == 0) {
    throw UndefinedMetricError("hausdorff undefined: " + std::string(count_nonzero(pred) == 0 ? "prediction" : "reference") +
                               " mask is empty");
  }
}

double directed_brute(const std::vector<Voxel>& from, const std::vector<Voxel>& to, const Spacing& s) {
  double worst = 0;
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : to) best = std::min(best, sq_dist(p, g, s));
    worst = std::max(worst, best);
  }
  return worst;
}

// Buckets `to` points into cubes of `cell` voxels and visits cubes in
// growing Chebyshev shells around the query's cube. A point r+1 shells away
// differs by at least r*cell+1 voxels along some axis, which bounds its
// distance from below and lets the search stop early.
class BucketGrid {
 public:
  BucketGrid(const std::vector<Voxel>& pts, Dims dims, std::size_t cell) : cell_(cell) {
    nz_ = (dims.d + cell - 1) / cell, ny_ = (dims.h + cell - 1) / cell, nx_ = (dims.w + cell - 1) / cell;
    start_.assign(nz_ * ny_ * nx_ + 1, 0);
    for (const auto& p : pts) ++start_[key(p) + 1];
    for (std::size_t i = 1; i < start_.size(); ++i) start_[i] += start_[i - 1];
    pts_.resize(pts.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (const auto& p : pts) pts_[fill[key(p)]++] = p;
  }

  /// Smallest squared distance from q, or any value below `enough` once one
  /// is found (the caller only needs to know it does not raise the maximum).
  double nearest_sq(const Voxel& q, const Spacing& s, double enough) const {
    const double min_sp = std::min({s.z, s.y, s.x});
    const auto cz = static_cast<std::ptrdiff_t>(q.z / cell_), cy = static_cast<std::ptrdiff_t>(q.y / cell_),
               cx = static_cast<std::ptrdiff_t>(q.x / cell_);
    const std::ptrdiff_t max_r = static_cast<std::ptrdiff_t>(std::max({nz_, ny_, nx_}));
    double best = std::numeric_limits<double>::infinity();
    for (std::ptrdiff_t r = 0; r <= max_r; ++r) {
      for (std::ptrdiff_t z = cz - r; z <= cz + r; ++z) {
        if (z < 0 || z >= static_cast<std::ptrdiff_t>(nz_)) continue;
        for (std::ptrdiff_t y = cy - r; y <= cy + r; ++y) {
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(ny_)) continue;
          const bool face = std::abs(z - cz) == r || std::abs(y - cy) == r;
          for (std::ptrdiff_t x = cx - r; x <= cx + r; x += (face || r == 0) ? 1 : 2 * r) {
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(nx_)) continue;
            const std::size_t k = (static_cast<std::size_t>(z) * ny_ + static_cast<std::size_t>(y)) * nx_ +
                                  static_cast<std::size_t>(x);
            for (std::size_t i = start_[k]; i < start_[k + 1]; ++i) best = std::min(best, sq_dist(q, pts_[i], s));
          }
        }
      }
      if (best < enough) return best;
      const double bound = (static_cast<double>(r) * static_cast<double>(cell_) + 1.0) * min_sp;
      if (best <= bound * bound) return best;
    }
    return best;
  }

 private:
  std::size_t key(const Voxel& p) const { return ((p.z / cell_) * ny_ + p.y / cell_) * nx_ + p.x / cell_; }

  std::size_t cell_, nz_ = 0, ny_ = 0, nx_ = 0;
  std::vector<std::size_t> start_;
  std::vector<Voxel> pts_;
};

double directed_grid(const std::vector<Voxel>& from, const std::vector<Voxel>& to, Dims dims, const Spacing& s) {
  const BucketGrid grid(to, dims, 4);
  double worst = 0;
  for (const auto& p : from) worst = std::max(worst, grid.nearest_sq(p, s, worst));
  return worst;
}

}  // namespace

double hausdorff_brute_force(const Mask& pred, const Mask& gt, Spacing spacing) {
  require_nonempty(pred, gt);
  const auto a = extract_boundary(pred), b = extract_boundary(gt);
  return std::sqrt(std::max(directed_brute(a, b, spacing), directed_brute(b, a, spacing)));
}

double hausdorff(const Mask& pred, const Mask& gt, Spacing spacing) {
  require_nonempty(pred, gt);
  if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0)) throw ConfigError("hausdorff: spacing must be positive");
  const auto a = extract_boundary(pred), b = extract_boundary(gt);
  return std::sqrt(std::max(directed_grid(a, b, pred.dims, spacing), directed_grid(b, a, pred.dims, spacing)));
}

const RegionScore& MetricReport::region(std::size_t i) const {
  switch (i) {
    case 0:
      return et;
    case 1:
      return wt;
    case 2:
      return tc;
  }
  throw std::out_of_range("region index " + std::to_string(i));
}

std::string MetricReport::serialize() const {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < 3; ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", region(i).dice);
    out += std::string("dice_") + kRegionNames[i] + "=" + buf + "\n";
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (region(i).hd) {
      std::snprintf(buf, sizeof buf, "%.17g", *region(i).hd);
      out += std::string("hd_") + kRegionNames[i] + "=" + buf + "\n";
    } else {
      out += std::string("hd_") + kRegionNames[i] + "=undefined\n";
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    out += std::string("dice_") + kRegionNames[i] + "_both_empty=" + (region(i).dice_both_empty ? "1" : "0") + "\n";
  }
  return out;
}

MetricReport evaluate_masks(const RegionMasks& pred, const RegionMasks& gt, Spacing spacing) {
  auto score = [&](const Mask& p, const Mask& g) {
    RegionScore r;
    r.dice = dice_score(p, g);
    r.dice_both_empty = both_empty(p, g);
    if (count_nonzero(p) > 0 && count_nonzero(g) > 0) r.hd = hausdorff(p, g, spacing);
    return r;
  };
  return {score(pred.et, gt.et), score(pred.wt, gt.wt), score(pred.tc, gt.tc)};
}

}  // namespace upmad
