#pragma once

// Back-projection of mask features onto points and sample-balanced
// multi-view fusion into the per-point teacher library.

#include "ou3d/vlmio.hpp"

#include <numeric>

namespace ou3d {

struct Projection {
  std::uint32_t point = 0;
  std::uint32_t pixel = 0;  // linear index v * w + u
  std::uint32_t mask = 0;   // never 0 in a returned list

  bool operator==(const Projection&) const = default;
};

// Projections of every point into `view` that land in-bounds, pass the
// depth test against the Z-buffer and fall inside a nonzero mask. Sorted by
// point id.
inline std::vector<Projection> valid_projections(const PointCloud& cloud, const RenderedView& view,
                                                 const CameraRig& rig, const MaskSet& masks,
                                                 double eps_rel = kDefaultDepthEpsilon) {
  if (masks.height != view.height || masks.width != view.width)
    throw Error("valid_projections: mask set size does not match view " + std::to_string(view.rig_id));
  std::vector<Projection> out;
  const Projector proj(rig);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto q = proj.project(cloud.positions[i]);
    if (!q) continue;
    const std::size_t px = view.pixel(q->px(), q->py());
    if (!depth_consistent(static_cast<float>(q->depth), view.depth[px], eps_rel)) continue;
    const std::uint32_t m = masks.mask_map[px];
    if (m == 0) continue;
    out.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(px), m});
  }
  return out;
}

struct SbffParams {
  int k = 5;
  bool enabled = true;
  std::uint64_t seed = 0;
};

// Mean of the k smallest values; all of them when fewer than k exist.
inline double topk_smallest_mean(std::vector<std::size_t> counts, int k) {
  if (k < 1) throw Error("sbff: k must be >= 1");
  if (counts.empty()) return 0;
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), counts.size());
  std::partial_sort(counts.begin(), counts.begin() + static_cast<std::ptrdiff_t>(take), counts.end());
  double s = 0;
  for (std::size_t i = 0; i < take; ++i) s += double(counts[i]);
  return s / double(take);
}

struct MaskCounts {
  std::vector<std::size_t> per_mask;  // indexed by mask id; entry 0 unused
  double tau = 0;
};

// Counts projected points per mask. Only masks that received at least one
// projection take part in the threshold.
inline MaskCounts sbff_counts(std::span<const Projection> projections, std::uint32_t num_masks, int k) {
  MaskCounts mc;
  mc.per_mask.assign(std::size_t(num_masks) + 1, 0);
  for (const auto& p : projections) {
    if (p.mask == 0 || p.mask > num_masks) throw Error("sbff_counts: projection carries invalid mask id");
    ++mc.per_mask[p.mask];
  }
  std::vector<std::size_t> nonzero;
  for (std::size_t m = 1; m < mc.per_mask.size(); ++m)
    if (mc.per_mask[m] > 0) nonzero.push_back(mc.per_mask[m]);
  mc.tau = topk_smallest_mean(std::move(nonzero), k);
  return mc;
}

// Masks with more than tau projections keep floor(tau) of them, drawn
// uniformly without replacement from a stream keyed by (seed, view, mask).
// Output stays sorted by point id.
inline std::vector<Projection> balanced_sample(std::span<const Projection> projections, const MaskCounts& counts,
                                               std::uint64_t seed, int view_id) {
  if (!(counts.tau > 0)) {
    if (projections.empty()) return {};
    throw Error("balanced_sample: tau must be positive");
  }
  const auto keep = static_cast<std::size_t>(std::floor(counts.tau));
  std::vector<std::vector<std::size_t>> members(counts.per_mask.size());
  for (std::size_t i = 0; i < projections.size(); ++i) members[projections[i].mask].push_back(i);

  std::vector<std::uint8_t> retained(projections.size(), 1);
  for (std::size_t m = 1; m < members.size(); ++m) {
    auto& idx = members[m];
    if (double(idx.size()) <= counts.tau) continue;
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(view_id), m));
    // Partial Fisher-Yates: the first `keep` slots become the sample.
    for (std::size_t s = 0; s < keep; ++s) {
      std::uniform_int_distribution<std::size_t> pick(s, idx.size() - 1);
      std::swap(idx[s], idx[pick(rng)]);
    }
    for (std::size_t s = keep; s < idx.size(); ++s) retained[idx[s]] = 0;
  }
  std::vector<Projection> out;
  out.reserve(projections.size());
  for (std::size_t i = 0; i < projections.size(); ++i)
    if (retained[i]) out.push_back(projections[i]);
  return out;
}

struct FeatureLibrary {
  std::size_t num_points = 0;
  std::uint32_t dim = 0;
  std::vector<std::uint8_t> covered;
  std::vector<std::uint32_t> view_count;
  std::vector<float> features;  // num_points * dim; zero rows where uncovered

  std::span<const float> feature(std::size_t p) const { return {features.data() + p * dim, dim}; }
  std::size_t covered_count() const { return std::size_t(std::count(covered.begin(), covered.end(), 1)); }

  bool operator==(const FeatureLibrary&) const = default;
};

// View contributions are accumulated in ascending view-id order, averaged
// and L2-normalized. `retained[v]` pairs with `masks[v]`.
inline FeatureLibrary fuse(std::size_t num_points, const std::vector<std::vector<Projection>>& retained,
                           const std::vector<MaskSet>& masks) {
  if (retained.size() != masks.size()) throw Error("fuse: projection/mask set count mismatch");
  FeatureLibrary lib;
  lib.num_points = num_points;
  lib.dim = masks.empty() ? 0 : masks.front().dim;
  for (const auto& m : masks)
    if (m.dim != lib.dim) throw Error("fuse: mask sets disagree on feature dimension");
  lib.covered.assign(num_points, 0);
  lib.view_count.assign(num_points, 0);
  lib.features.assign(num_points * lib.dim, 0.0f);

  std::vector<std::size_t> order(masks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return masks[a].view_id < masks[b].view_id; });

  std::vector<double> acc(num_points * lib.dim, 0.0);
  for (auto v : order) {
    for (const auto& p : retained[v]) {
      if (p.point >= num_points) throw Error("fuse: projection references point beyond the cloud");
      if (p.mask == 0 || p.mask > masks[v].num_masks) throw Error("fuse: projection references missing mask");
      const auto f = masks[v].feature(p.mask);
      double* a = acc.data() + std::size_t(p.point) * lib.dim;
      for (std::uint32_t c = 0; c < lib.dim; ++c) a[c] += f[c];
      ++lib.view_count[p.point];
    }
  }
  for (std::size_t p = 0; p < num_points; ++p) {
    if (lib.view_count[p] == 0) continue;
    const double* a = acc.data() + p * lib.dim;
    double s = 0;
    for (std::uint32_t c = 0; c < lib.dim; ++c) s += a[c] * a[c];
    s = std::sqrt(s);
    if (!(s > 1e-12)) {
      // Contributions cancelled out; nothing usable to teach with.
      lib.view_count[p] = 0;
      continue;
    }
    lib.covered[p] = 1;
    float* out = lib.features.data() + p * lib.dim;
    for (std::uint32_t c = 0; c < lib.dim; ++c) out[c] = static_cast<float>(a[c] / s);
  }
  return lib;
}

struct LiftParams {
  double eps_rel = kDefaultDepthEpsilon;
  SbffParams sbff;
};

struct LiftStats {
  std::vector<std::size_t> projected;  // per view, before sampling
  std::vector<std::size_t> retained;   // per view, after sampling
  std::vector<double> tau;             // per view
};

// Back-projection, per-view balancing and fusion for a whole view set.
// When `unbalanced` is given it receives the fusion of every valid
// projection, i.e. the library SBFF would produce when disabled.
inline FeatureLibrary lift_and_fuse(const PointCloud& cloud, const std::vector<RenderedView>& views,
                                    const std::vector<CameraRig>& rigs, const std::vector<MaskSet>& masks,
                                    const LiftParams& params, unsigned threads = 1, LiftStats* stats = nullptr,
                                    FeatureLibrary* unbalanced = nullptr) {
  if (views.size() != rigs.size() || views.size() != masks.size())
    throw Error("lift_and_fuse: views, rigs and mask sets must have equal counts");
  std::vector<std::vector<Projection>> all(views.size()), retained(views.size());
  std::vector<double> taus(views.size());
  parallel_for(views.size(), threads, [&](std::size_t v) {
    all[v] = valid_projections(cloud, views[v], rigs[v], masks[v], params.eps_rel);
    if (params.sbff.enabled && !all[v].empty()) {
      const auto counts = sbff_counts(all[v], masks[v].num_masks, params.sbff.k);
      taus[v] = counts.tau;
      retained[v] = balanced_sample(all[v], counts, params.sbff.seed, views[v].rig_id);
    } else {
      retained[v] = all[v];
    }
  });
  if (stats) {
    stats->projected.clear();
    stats->retained.clear();
    for (const auto& a : all) stats->projected.push_back(a.size());
    for (const auto& r : retained) stats->retained.push_back(r.size());
    stats->tau = taus;
  }
  if (unbalanced) *unbalanced = fuse(cloud.size(), all, masks);
  return fuse(cloud.size(), retained, masks);
}

// ---------------------------------------------------------------------------
// OU3F: "OU3F", u32 version=1, u64 N, u32 C, then per point
// u8 covered, u32 view_count, C float32.

inline constexpr std::uint32_t kLibraryVersion = 1;

inline void write_library(const std::filesystem::path& path, const FeatureLibrary& lib) {
  binio::Writer w;
  w.magic("OU3F");
  w.put<std::uint32_t>(kLibraryVersion);
  w.put<std::uint64_t>(lib.num_points);
  w.put<std::uint32_t>(lib.dim);
  for (std::size_t p = 0; p < lib.num_points; ++p) {
    w.put<std::uint8_t>(lib.covered[p]);
    w.put<std::uint32_t>(lib.view_count[p]);
    w.put_span<float>(lib.feature(p));
  }
  w.save(path);
}

inline FeatureLibrary read_library(const std::filesystem::path& path) {
  auto r = binio::Reader::open(path);
  r.expect_magic("OU3F");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kLibraryVersion)
    throw Error(r.name() + ": version mismatch, expected " + std::to_string(kLibraryVersion) + " found " +
                std::to_string(version));
  FeatureLibrary lib;
  lib.num_points = r.get<std::uint64_t>("N");
  lib.dim = r.get<std::uint32_t>("C");
  r.expect_payload(std::uint64_t(lib.num_points) * (5 + 4ull * lib.dim), "points");
  lib.covered.resize(lib.num_points);
  lib.view_count.resize(lib.num_points);
  lib.features.resize(lib.num_points * lib.dim);
  for (std::size_t p = 0; p < lib.num_points; ++p) {
    lib.covered[p] = r.get<std::uint8_t>("covered");
    lib.view_count[p] = r.get<std::uint32_t>("view_count");
    r.get_into(std::span<float>(lib.features.data() + p * lib.dim, lib.dim), "feature");
    if ((lib.covered[p] != 0) != (lib.view_count[p] > 0))
      throw Error(r.name() + ": covered flag disagrees with view count at point " + std::to_string(p));
  }
  return lib;
}

}  // namespace ou3d
