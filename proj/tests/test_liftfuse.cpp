#include "support.hpp"

using namespace ou3d;
using ou3d::testing::random_cloud;

namespace {

std::vector<Projection> projections_with_counts(const std::vector<std::size_t>& counts) {
  std::vector<Projection> out;
  std::uint32_t point = 0;
  for (std::size_t m = 0; m < counts.size(); ++m)
    for (std::size_t i = 0; i < counts[m]; ++i, ++point) out.push_back({point, point, static_cast<std::uint32_t>(m + 1)});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.point < b.point; });
  return out;
}

std::vector<std::size_t> sizes_after(const std::vector<Projection>& ps, std::size_t masks) {
  std::vector<std::size_t> s(masks, 0);
  for (const auto& p : ps) ++s[p.mask - 1];
  return s;
}

MaskSet single_mask(int h, int w, std::vector<float> f) {
  MaskSet ms;
  ms.height = h;
  ms.width = w;
  ms.num_masks = 1;
  ms.dim = static_cast<std::uint32_t>(f.size());
  ms.mask_map.assign(std::size_t(h) * w, 1);
  ms.features = std::move(f);
  return ms;
}

struct Fixture {
  PointCloud cloud;
  std::vector<CameraRig> rigs;
  std::vector<RenderedView> views;
  std::vector<MaskSet> masks;
};

Fixture small_fixture(std::size_t n, double noise, std::uint64_t seed) {
  Fixture f;
  f.cloud = random_cloud(n, seed, 3, 6);
  ViewParams p;
  p.K = 2;
  p.height = p.width = 48;
  p.seed = seed;
  f.rigs = all_rigs(bounding_box(f.cloud), p);
  f.views = render_views(f.cloud, f.rigs);
  const auto table = synthetic_text_table(f.cloud.class_names, 6, TableMode::SeededRandom, seed);
  f.masks = oracle_mask_sets(f.cloud, f.views, table, noise, seed, 1);
  return f;
}

// Straight-line lift + balance + fuse used as the reference for the
// optimized path: per-point projection, per-mask std::map bookkeeping and
// the same seeded draw protocol.
FeatureLibrary naive_lift_and_fuse(const Fixture& f, double eps, const SbffParams& sbff) {
  const std::size_t N = f.cloud.size();
  const std::uint32_t C = f.masks.front().dim;
  std::vector<double> acc(N * C, 0.0);
  std::vector<std::uint32_t> count(N, 0);
  std::vector<std::size_t> order(f.views.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return f.masks[a].view_id < f.masks[b].view_id; });
  for (auto v : order) {
    const auto& rig = f.rigs[v];
    const auto& view = f.views[v];
    const auto& ms = f.masks[v];
    std::map<std::uint32_t, std::vector<std::uint32_t>> members;  // mask -> points
    for (std::uint32_t i = 0; i < N; ++i) {
      const Vec3 c = rig.E.topLeftCorner<3, 3>() * f.cloud.positions[i] + rig.E.topRightCorner<3, 1>();
      if (!(c.z() > kZNear)) continue;
      const double u = rig.fx() * c.x() / c.z() + rig.cx(), vv = rig.fy() * c.y() / c.z() + rig.cy();
      if (!(u >= 0 && u < rig.width && vv >= 0 && vv < rig.height)) continue;
      const std::size_t px = std::size_t(std::floor(vv)) * rig.width + std::size_t(std::floor(u));
      const float zp = static_cast<float>(c.z());
      if (!(std::abs(double(zp) - double(view.depth[px])) <= eps * double(zp))) continue;
      if (ms.mask_map[px] == 0) continue;
      members[ms.mask_map[px]].push_back(i);
    }
    if (sbff.enabled && !members.empty()) {
      std::vector<std::size_t> sizes;
      for (auto& [m, pts] : members) sizes.push_back(pts.size());
      std::sort(sizes.begin(), sizes.end());
      const std::size_t take = std::min<std::size_t>(sizes.size(), std::size_t(sbff.k));
      double tau = 0;
      for (std::size_t i = 0; i < take; ++i) tau += double(sizes[i]);
      tau /= double(take);
      for (auto& [m, pts] : members) {
        if (double(pts.size()) <= tau) continue;
        std::mt19937_64 rng(derive_seed(derive_seed(sbff.seed, std::uint64_t(view.rig_id)), m));
        const auto keep = static_cast<std::size_t>(std::floor(tau));
        std::vector<std::size_t> idx(pts.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t s = 0; s < keep; ++s) {
          std::uniform_int_distribution<std::size_t> pick(s, idx.size() - 1);
          std::swap(idx[s], idx[pick(rng)]);
        }
        std::vector<std::uint32_t> kept;
        for (std::size_t s = 0; s < keep; ++s) kept.push_back(pts[idx[s]]);
        pts = kept;
      }
    }
    // Accumulate in ascending point order within the view, like the library.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> flat;
    for (auto& [m, pts] : members)
      for (auto p : pts) flat.emplace_back(p, m);
    std::sort(flat.begin(), flat.end());
    for (auto [p, m] : flat) {
      const auto feat = ms.feature(m);
      for (std::uint32_t c = 0; c < C; ++c) acc[std::size_t(p) * C + c] += feat[c];
      ++count[p];
    }
  }
  FeatureLibrary lib;
  lib.num_points = N;
  lib.dim = C;
  lib.covered.assign(N, 0);
  lib.view_count = count;
  lib.features.assign(N * C, 0.0f);
  for (std::size_t p = 0; p < N; ++p) {
    if (!count[p]) continue;
    double s = 0;
    for (std::uint32_t c = 0; c < C; ++c) s += acc[p * C + c] * acc[p * C + c];
    s = std::sqrt(s);
    if (!(s > 1e-12)) {
      lib.view_count[p] = 0;
      continue;
    }
    lib.covered[p] = 1;
    for (std::uint32_t c = 0; c < C; ++c) lib.features[p * C + c] = static_cast<float>(acc[p * C + c] / s);
  }
  return lib;
}

}  // namespace

TEST(Sbff, TauIsMeanOfSmallestCounts) {
  const auto ps = projections_with_counts({100, 10, 5});
  EXPECT_EQ(sbff_counts(ps, 3, 2).tau, 7.5);
  EXPECT_EQ(sbff_counts(projections_with_counts({4}), 1, 2).tau, 4.0);
  EXPECT_EQ(sbff_counts(projections_with_counts({6, 6, 6}), 3, 2).tau, 6.0);
}

TEST(Sbff, EmptyMasksDoNotEnterTau) {
  auto ps = projections_with_counts({100, 10, 5});
  EXPECT_EQ(sbff_counts(ps, 5, 2).tau, 7.5);
}

TEST(Sbff, FloorRuleSizes) {
  const auto ps = projections_with_counts({100, 10, 5});
  const auto counts = sbff_counts(ps, 3, 2);
  const auto kept = balanced_sample(ps, counts, 1, 0);
  EXPECT_EQ(sizes_after(kept, 3), (std::vector<std::size_t>{7, 7, 5}));
}

TEST(Sbff, OnlyMasksAboveTauShrink) {
  const auto ps = projections_with_counts({100, 10, 5});
  MaskCounts counts;
  counts.per_mask = {0, 100, 10, 5};
  counts.tau = 7.5;
  EXPECT_EQ(sizes_after(balanced_sample(ps, counts, 1, 0), 3), (std::vector<std::size_t>{7, 7, 5}));
  counts.tau = 10.5;
  EXPECT_EQ(sizes_after(balanced_sample(ps, counts, 1, 0), 3), (std::vector<std::size_t>{10, 10, 5}));
}

TEST(Sbff, EqualCountsKeepEverything) {
  const auto ps = projections_with_counts({6, 6, 6});
  EXPECT_EQ(balanced_sample(ps, sbff_counts(ps, 3, 2), 9, 0), ps);
}

TEST(Sbff, SeededAndWithoutReplacement) {
  const auto ps = projections_with_counts({50, 3, 4});
  const auto counts = sbff_counts(ps, 3, 2);
  const auto a = balanced_sample(ps, counts, 42, 1), b = balanced_sample(ps, counts, 42, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, balanced_sample(ps, counts, 43, 1));
  std::set<std::uint32_t> pts;
  for (const auto& p : a) pts.insert(p.point);
  EXPECT_EQ(pts.size(), a.size());
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end(), [](auto& x, auto& y) { return x.point < y.point; }));
}

TEST(Fuse, SingleViewCopiesFeature) {
  MaskSet ms = single_mask(1, 2, {0.6f, 0.8f});
  const auto lib = fuse(3, {{{1, 0, 1}}}, {ms});
  EXPECT_EQ(lib.covered, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_FLOAT_EQ(lib.feature(1)[0], 0.6f);
  EXPECT_FLOAT_EQ(lib.feature(1)[1], 0.8f);
  EXPECT_EQ(lib.feature(0)[0], 0.0f);
}

TEST(Fuse, OrthogonalFeaturesAverageToDiagonal) {
  MaskSet a = single_mask(1, 1, {1, 0}), b = single_mask(1, 1, {0, 1});
  a.view_id = 0;
  b.view_id = 1;
  const auto lib = fuse(1, {{{0, 0, 1}}, {{0, 0, 1}}}, {a, b});
  EXPECT_NEAR(lib.feature(0)[0], std::sqrt(0.5), 1e-7);
  EXPECT_NEAR(lib.feature(0)[1], std::sqrt(0.5), 1e-7);
  EXPECT_EQ(lib.view_count[0], 2u);
}

TEST(Fuse, AntipodalContributionsLeavePointUncovered) {
  MaskSet a = single_mask(1, 1, {1, 0}), b = single_mask(1, 1, {-1, 0});
  b.view_id = 1;
  const auto lib = fuse(1, {{{0, 0, 1}}, {{0, 0, 1}}}, {a, b});
  EXPECT_EQ(lib.covered[0], 0);
}

TEST(Fuse, ViewOrderDoesNotMatter) {
  auto f = small_fixture(400, 0.5, 3);
  std::vector<std::vector<Projection>> ps;
  for (std::size_t v = 0; v < f.views.size(); ++v)
    ps.push_back(valid_projections(f.cloud, f.views[v], f.rigs[v], f.masks[v]));
  const auto lib = fuse(f.cloud.size(), ps, f.masks);
  std::reverse(ps.begin(), ps.end());
  std::reverse(f.masks.begin(), f.masks.end());
  EXPECT_EQ(fuse(f.cloud.size(), ps, f.masks), lib);
}

TEST(Projections, WinnerIsAlwaysValid) {
  const auto f = small_fixture(600, 0, 5);
  for (std::size_t v = 0; v < f.views.size(); ++v) {
    MaskSet all = f.masks[v];
    std::fill(all.mask_map.begin(), all.mask_map.end(), 1u);
    all.num_masks = 1;
    all.features.assign(all.dim, 0);
    all.features[0] = 1;
    const auto ps = valid_projections(f.cloud, f.views[v], f.rigs[v], all, 0.0);
    std::set<std::pair<std::uint32_t, std::uint32_t>> valid;
    for (const auto& p : ps) valid.insert({p.point, p.pixel});
    // Every pixel whose own winner projects into it must appear.
    const Projector proj(f.rigs[v]);
    for (std::size_t px = 0; px < f.views[v].point_index.size(); ++px) {
      const auto w = f.views[v].point_index[px];
      if (w == kNoPoint) continue;
      const auto q = proj.project(f.cloud.positions[w]);
      if (q && f.views[v].pixel(q->px(), q->py()) == px) {
        EXPECT_TRUE(valid.count({w, std::uint32_t(px)}));
      }
    }
  }
}

TEST(Projections, ExactDepthMatchesBruteForce) {
  const auto f = small_fixture(500, 0, 6);
  for (std::size_t v = 0; v < f.views.size(); ++v) {
    const auto ps = valid_projections(f.cloud, f.views[v], f.rigs[v], f.masks[v], 0.0);
    std::vector<Projection> ref;
    for (std::uint32_t i = 0; i < f.cloud.size(); ++i) {
      const auto& rig = f.rigs[v];
      const Vec3 c = rig.E.topLeftCorner<3, 3>() * f.cloud.positions[i] + rig.E.topRightCorner<3, 1>();
      if (!(c.z() > kZNear)) continue;
      const double u = rig.fx() * c.x() / c.z() + rig.cx(), vv = rig.fy() * c.y() / c.z() + rig.cy();
      if (!(u >= 0 && u < rig.width && vv >= 0 && vv < rig.height)) continue;
      const auto px = static_cast<std::uint32_t>(std::size_t(std::floor(vv)) * rig.width + std::size_t(std::floor(u)));
      // Exact depth: the Z-buffer winner or a point at exactly the same depth.
      if (static_cast<float>(c.z()) != f.views[v].depth[px]) continue;
      if (f.masks[v].mask_map[px] == 0) continue;
      ref.push_back({i, px, f.masks[v].mask_map[px]});
    }
    EXPECT_EQ(ps, ref) << "view " << v;
  }
}

class NaiveReference : public ::testing::TestWithParam<bool> {};

TEST_P(NaiveReference, LiftAndFuseMatchesExactly) {
  const bool enabled = GetParam();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto f = small_fixture(1000, 0.4, seed);
    SbffParams s;
    s.enabled = enabled;
    s.k = 3;
    s.seed = seed * 11;
    const auto lib = lift_and_fuse(f.cloud, f.views, f.rigs, f.masks, {1e-2, s});
    const auto ref = naive_lift_and_fuse(f, 1e-2, s);
    EXPECT_EQ(lib.covered, ref.covered);
    EXPECT_EQ(lib.view_count, ref.view_count);
    EXPECT_EQ(lib.features, ref.features);
    EXPECT_GT(lib.covered_count(), 100u);
  }
}

INSTANTIATE_TEST_SUITE_P(Sbff, NaiveReference, ::testing::Bool());

TEST(LiftAndFuse, BalancedSizesNeverExceedFloorTau) {
  const auto f = small_fixture(1000, 0, 8);
  SbffParams s;
  s.k = 2;
  for (std::size_t v = 0; v < f.views.size(); ++v) {
    const auto all = valid_projections(f.cloud, f.views[v], f.rigs[v], f.masks[v]);
    if (all.empty()) continue;
    const auto counts = sbff_counts(all, f.masks[v].num_masks, s.k);
    const auto kept = balanced_sample(all, counts, 5, f.views[v].rig_id);
    std::vector<std::size_t> after(f.masks[v].num_masks + 1, 0);
    for (const auto& p : kept) ++after[p.mask];
    for (std::size_t m = 1; m < after.size(); ++m) {
      if (double(counts.per_mask[m]) > counts.tau)
        EXPECT_EQ(after[m], static_cast<std::size_t>(std::floor(counts.tau)));
      else
        EXPECT_EQ(after[m], counts.per_mask[m]);
    }
  }
}

TEST(LiftAndFuse, DisabledSbffEqualsUnbalancedLibrary) {
  const auto f = small_fixture(800, 0.2, 9);
  SbffParams off;
  off.enabled = false;
  FeatureLibrary unbalanced;
  const auto lib = lift_and_fuse(f.cloud, f.views, f.rigs, f.masks, {1e-2, off}, 1, nullptr, &unbalanced);
  EXPECT_EQ(lib, unbalanced);
}

TEST(LiftAndFuse, ParallelEqualsSequential) {
  const auto f = small_fixture(1000, 0.3, 10);
  LiftStats s1, s4;
  FeatureLibrary u1, u4;
  const auto a = lift_and_fuse(f.cloud, f.views, f.rigs, f.masks, {}, 1, &s1, &u1);
  const auto b = lift_and_fuse(f.cloud, f.views, f.rigs, f.masks, {}, 4, &s4, &u4);
  EXPECT_EQ(a, b);
  EXPECT_EQ(u1, u4);
  EXPECT_EQ(s1.retained, s4.retained);
  EXPECT_EQ(s1.tau, s4.tau);
}

TEST(Oracle, MasksAreDenseAndLabelPure) {
  const auto f = small_fixture(800, 0, 12);
  const auto table = synthetic_text_table(f.cloud.class_names, 6, TableMode::SeededRandom, 12);
  for (std::size_t v = 0; v < f.views.size(); ++v) {
    const auto& ms = f.masks[v];
    EXPECT_NO_THROW(ms.validate());
    std::vector<int> label(ms.num_masks + 1, -1), used(ms.num_masks + 1, 0);
    for (std::size_t px = 0; px < ms.mask_map.size(); ++px) {
      const auto m = ms.mask_map[px];
      const auto w = f.views[v].point_index[px];
      EXPECT_EQ(m == 0, w == kNoPoint);
      if (!m) continue;
      used[m] = 1;
      const int l = f.cloud.labels[w];
      if (label[m] < 0) label[m] = l;
      EXPECT_EQ(label[m], l);
    }
    for (std::uint32_t m = 1; m <= ms.num_masks; ++m) {
      EXPECT_TRUE(used[m]);
      // Noise-free oracle features are the class text embeddings.
      const auto row = table.row(static_cast<std::size_t>(label[m]));
      const auto feat = ms.feature(m);
      EXPECT_TRUE(std::equal(feat.begin(), feat.end(), row.begin()));
    }
  }
}
