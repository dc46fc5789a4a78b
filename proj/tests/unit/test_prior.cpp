#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "oracles.hpp"
#include "upmad/phantom.hpp"
#include "upmad/prior.hpp"

using namespace upmad;

namespace {

Grid<float> random_histogram_grid(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Dims d{6, 7, 8};
  Grid<float> g(d, 0.f);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  std::normal_distribution<float> a(60.f, 12.f), b(190.f, 25.f);
  const float mix = u(rng);
  for (float& v : g.data) {
    const float r = u(rng);
    if (r < 0.15f) continue;  // background stays 0
    v = std::max(1.f, r < 0.15f + 0.85f * mix ? a(rng) : b(rng));
    if (seed % 3 == 0) v = std::round(v);  // integer data: many equal values
  }
  return g;
}

Mask cube_mask(Dims d, Voxel lo, Voxel hi) {
  Mask m(d, 0);
  for (std::size_t z = lo.z; z <= hi.z; ++z)
    for (std::size_t y = lo.y; y <= hi.y; ++y)
      for (std::size_t x = lo.x; x <= hi.x; ++x) m.at(z, y, x) = 1;
  return m;
}

}  // namespace

TEST(Otsu, MatchesExhaustiveScanOnRandomHistograms) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto g = random_histogram_grid(s);
    for (std::size_t bins : {2, 16, 256}) {
      EXPECT_EQ(otsu_threshold(g, bins), oracle::exhaustive_otsu(g, bins)) << "seed " << s << " bins " << bins;
    }
  }
}

TEST(Otsu, TwoModes) {
  Grid<float> g({1, 1, 201}, 0.f);
  for (std::size_t i = 0; i < 100; ++i) g.data[i] = 10.f;
  for (std::size_t i = 100; i < 200; ++i) g.data[i] = 200.f;
  const double t = otsu_threshold(g);
  EXPECT_GT(t, 10.0);
  EXPECT_LT(t, 200.0);
  Grid<float> two({1, 1, 2}, std::vector<float>{3.f, 8.f});
  const double t2 = otsu_threshold(two, 4);
  EXPECT_GT(t2, 3.0);
  EXPECT_LE(t2, 8.0);
}

TEST(Otsu, DegenerateThrows) {
  EXPECT_THROW(otsu_threshold(Grid<float>({2, 2, 2}, 5.f)), Error);
  EXPECT_THROW(otsu_threshold(Grid<float>({2, 2, 2}, 0.f)), Error);
}

TEST(LargestComponent, KeepsBiggestBlob) {
  const Dims d{6, 6, 6};
  Mask m = cube_mask(d, {0, 0, 0}, {0, 0, 4});  // 5 voxels
  const Mask big = cube_mask(d, {3, 3, 3}, {5, 5, 3});  // 9 voxels
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] |= big.data[i];
  EXPECT_EQ(largest_component(m, 26).data, big.data);
  EXPECT_EQ(largest_component(big, 6).data, big.data);
  EXPECT_EQ(count_nonzero(largest_component(Mask(d, 0))), 0u);
}

TEST(LargestComponent, TieGoesToEarliestScanOrder) {
  const Dims d{4, 4, 4};
  Mask m = cube_mask(d, {3, 3, 2}, {3, 3, 3});
  m.at(0, 0, 1) = m.at(0, 0, 2) = 1;
  const Mask out = largest_component(m, 6);
  EXPECT_EQ(out.at(0, 0, 1), 1);
  EXPECT_EQ(out.at(3, 3, 3), 0);
}

TEST(LargestComponent, MatchesFloodFillOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Mask m({7, 8, 9}, 0);
    std::bernoulli_distribution p(0.25 + 0.01 * trial);
    for (auto& v : m.data) v = p(rng);
    for (int conn : {6, 26}) {
      std::vector<std::size_t> sizes;
      const auto lab = oracle::label_components(m, conn, sizes);
      std::size_t best = 0;
      for (std::size_t id = 1; id < sizes.size(); ++id)
        if (sizes[id] > sizes[best]) best = id;  // ids are numbered in scan order: strict > keeps the first
      const Mask out = largest_component(m, conn);
      for (std::size_t i = 0; i < m.data.size(); ++i) {
        ASSERT_EQ(out.data[i], best != 0 && lab[i] == best) << "trial " << trial << " conn " << conn;
        ASSERT_LE(out.data[i], m.data[i]);
      }
    }
  }
}

TEST(Seeds, ExhaustionDeterminismMembership) {
  const Dims d{5, 5, 5};
  Mask small(d, 0);
  small.at(1, 1, 1) = small.at(1, 1, 2) = small.at(1, 2, 2) = 1;
  EXPECT_EQ(select_seeds(small, 10, 1).size(), 3u);
  const Mask cube = cube_mask(d, {1, 1, 1}, {3, 3, 3});
  const auto a = select_seeds(cube, 10, 99), b = select_seeds(cube, 10, 99), c = select_seeds(cube, 10, 100);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  ASSERT_EQ(a.size(), 10u);
  std::set<Voxel> uniq(a.begin(), a.end());
  EXPECT_EQ(uniq.size(), 10u);
  for (const auto& v : a) EXPECT_TRUE(cube[v]);
  EXPECT_THROW(select_seeds(Mask(d, 0), 3, 0), Error);
}

TEST(RegionGrow, UniformGridFillsEverything) {
  Grid<float> g({4, 5, 6}, 42.f);
  const std::vector<Voxel> seeds{{2, 2, 2}};
  EXPECT_EQ(count_nonzero(region_grow(g, seeds, 0.5)), g.data.size());
}

TEST(RegionGrow, BrightCubeExactly) {
  const Dims d{10, 10, 10};
  const Mask cube = cube_mask(d, {2, 3, 4}, {6, 7, 8});
  Grid<float> g(d, 0.f);
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = cube.data[i] ? 100.f : 0.f;
  const std::vector<Voxel> seeds{{4, 5, 6}};
  EXPECT_EQ(region_grow(g, seeds, 35.0).data, cube.data);
  EXPECT_EQ(oracle::dfs_region_grow(g, seeds, 35.0, 6).data, cube.data);
}

TEST(RegionGrow, ZeroDeltaKeepsExactMatches) {
  Grid<float> g({1, 1, 7}, std::vector<float>{5, 5, 6, 5, 5, 5, 5});
  const std::vector<Voxel> seeds{{0, 0, 0}};
  const Mask m = region_grow(g, seeds, 0.0);
  EXPECT_EQ(m.data, (std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 0}));
}

TEST(RegionGrow, MatchesDfsOracleAndIgnoresSeedOrder) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 25; ++trial) {
    Grid<float> g({8, 9, 7});
    std::normal_distribution<float> n(100.f, 30.f);
    for (float& v : g.data) v = n(rng);
    std::vector<Voxel> seeds;
    std::uniform_int_distribution<std::size_t> pick(0, g.data.size() - 1);
    for (int i = 0; i < 6; ++i) seeds.push_back(g.voxel(pick(rng)));
    for (int conn : {6, 26}) {
      const double delta = 10.0 + trial;
      const Mask ref = oracle::dfs_region_grow(g, seeds, delta, conn);
      EXPECT_EQ(region_grow(g, seeds, delta, conn).data, ref.data);
      auto shuffled = seeds;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      EXPECT_EQ(region_grow(g, shuffled, delta, conn).data, ref.data);
      for (const auto& s : seeds) EXPECT_TRUE(ref[s]);
    }
  }
}

TEST(RegionGrow, MonotoneInDelta) {
  std::mt19937_64 rng(9);
  Grid<float> g({8, 8, 8});
  std::uniform_real_distribution<float> u(0.f, 200.f);
  for (float& v : g.data) v = u(rng);
  const std::vector<Voxel> seeds{{4, 4, 4}, {1, 2, 3}};
  Mask prev = region_grow(g, seeds, 0.0);
  for (double delta = 5; delta <= 120; delta += 5) {
    const Mask cur = region_grow(g, seeds, delta);
    for (std::size_t i = 0; i < cur.data.size(); ++i) ASSERT_LE(prev.data[i], cur.data[i]) << delta;
    prev = cur;
  }
}

TEST(RegionGrow, SeedOutsideThrows) {
  Grid<float> g({2, 2, 2}, 1.f);
  const std::vector<Voxel> seeds{{2, 0, 0}};
  EXPECT_THROW(region_grow(g, seeds, 1.0), ShapeError);
  EXPECT_THROW(region_grow(g, std::vector<Voxel>{}, 1.0), Error);
}

TEST(TumorStats, PopulationStdAndMedian) {
  auto make = [](std::vector<float> tumour) {
    MultiModalVolume v;
    const Dims d{1, 1, 8};
    for (auto& m : v.modalities) m = Grid<float>(d, 50.f);
    v.labels = Mask(d, 0);
    for (std::size_t i = 0; i < tumour.size(); ++i) {
      v.modalities[0].data[i] = tumour[i];
      v.labels->data[i] = 2;
    }
    return v;
  };
  std::vector<MultiModalVolume> cases{make({10, 10, 10}), make({0, 10}), make({1, 3, 5, 7}), make({4}),
                                      make({2, 4, 4, 4, 5, 5, 7, 9})};
  const auto st = tumor_std_stats(cases);
  ASSERT_EQ(st.per_case.size(), 4u);
  EXPECT_EQ(st.skipped, 1u);
  EXPECT_DOUBLE_EQ(st.per_case[0], 0.0);
  EXPECT_DOUBLE_EQ(st.per_case[1], 5.0);
  EXPECT_DOUBLE_EQ(st.per_case[2], std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(st.per_case[3], 2.0);
  EXPECT_DOUBLE_EQ(st.min, 0.0);
  EXPECT_DOUBLE_EQ(st.max, 5.0);
  EXPECT_DOUBLE_EQ(st.median, 2.0);  // sorted {0, 2, 2.236, 5}: lower central value
  std::vector<MultiModalVolume> none{make({1})};
  EXPECT_THROW(tumor_std_stats(none), Error);
}

TEST(GeneratePrior, DegradesOnBlankInput) {
  const auto r = generate_prior(Grid<float>({8, 8, 8}, 0.f), PriorConfig{});
  EXPECT_EQ(count_nonzero(r.mask), 0u);
  EXPECT_FALSE(r.diagnostic.empty());
  EXPECT_FALSE(r.threshold.has_value());
}

TEST(GeneratePrior, DeterministicAndFindsBlob) {
  PhantomSpec spec;
  const auto v = gen_phantom(spec, 2);
  PriorConfig cfg;
  cfg.rng_seed = 5;
  const auto a = generate_prior(v.flair(), cfg), b = generate_prior(v.flair(), cfg);
  EXPECT_EQ(a.mask.data, b.mask.data);
  EXPECT_EQ(a.seeds, b.seeds);
  ASSERT_TRUE(a.threshold.has_value());
  Mask wt(v.dims(), 0);
  for (std::size_t i = 0; i < wt.data.size(); ++i) wt.data[i] = v.labels->data[i] != 0;
  EXPECT_GE(oracle::mask_dice(a.mask, wt), 0.9);
  // the result is the BFS growth from the selected seeds
  EXPECT_EQ(a.mask.data, oracle::dfs_region_grow(v.flair(), a.seeds, kFallbackDelta, 6).data);
}

TEST(GeneratePrior, ConfigValidation) {
  PriorConfig c;
  c.n_seeds = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.delta = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.component_connectivity = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.histogram_bins = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BuildInput, ChannelsAndNormalisation) {
  const auto v = gen_phantom(PhantomSpec{}, 1);
  const auto prior = generate_prior(v.flair(), PriorConfig{}).mask;
  const auto x = build_input(v, prior);
  const Dims d = v.dims();
  const std::size_t S = d.count();
  ASSERT_EQ(x.shape(), (Shape{1, 5, d.d, d.h, d.w}));
  for (std::size_t i = 0; i < S; ++i) ASSERT_EQ(x[4 * S + i], prior.data[i] ? 1.f : 0.f);
  for (std::size_t m = 0; m < 4; ++m) {
    double s = 0, ss = 0, n = 0;
    for (std::size_t i = 0; i < S; ++i) {
      if (v.modalities[m].data[i] == 0.f) {
        EXPECT_EQ(x[m * S + i], 0.f);
        continue;
      }
      s += x[m * S + i];
      ss += double(x[m * S + i]) * x[m * S + i];
      ++n;
    }
    EXPECT_NEAR(s / n, 0.0, 1e-4);
    EXPECT_NEAR(std::sqrt(ss / n - (s / n) * (s / n)), 1.0, 1e-4);
  }
  const auto zero = build_input(v, Mask(d, 0));
  EXPECT_EQ(zero.shape(), x.shape());
  EXPECT_EQ(build_input(v, nullptr).dim(1), 4u);
  EXPECT_THROW(build_input(v, Mask({8, 8, 8}, 0)), ShapeError);
}
