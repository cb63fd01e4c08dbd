#pragma once

// Point-splat rasterizer with a Z-buffer and a per-pixel point index map.

#include "ou3d/binio.hpp"
#include "ou3d/viewgen.hpp"

#include <optional>

namespace ou3d {

inline constexpr std::uint32_t kNoPoint = 0xFFFFFFFFu;
inline constexpr double kZNear = 1e-3;
inline constexpr float kEmptyDepth = std::numeric_limits<float>::infinity();

struct RenderedView {
  int rig_id = 0;
  int height = 0, width = 0;
  std::vector<std::uint8_t> rgb;            // h * w * 3
  std::vector<float> depth;                 // camera-space z; +inf where empty
  std::vector<std::uint32_t> point_index;   // kNoPoint where empty

  std::size_t pixel(int u, int v) const { return static_cast<std::size_t>(v) * width + u; }

  bool operator==(const RenderedView&) const = default;
};

struct PixelProjection {
  double u = 0, v = 0;  // continuous image coordinates
  double depth = 0;     // camera-space z

  int px() const { return static_cast<int>(std::floor(u)); }
  int py() const { return static_cast<int>(std::floor(v)); }
};

// Precomputed rigid transform + pinhole, shared by every per-point loop.
class Projector {
public:
  explicit Projector(const CameraRig& rig)
      : R_(rig.E.topLeftCorner<3, 3>()), t_(rig.E.topRightCorner<3, 1>()), fx_(rig.fx()), fy_(rig.fy()),
        cx_(rig.cx()), cy_(rig.cy()), h_(rig.height), w_(rig.width) {}

  Vec3 to_camera(const Vec3& p) const { return R_ * p + t_; }

  // Perspective projection without bounds or near-plane checks.
  PixelProjection project_unchecked(const Vec3& p) const {
    const Vec3 c = to_camera(p);
    return {fx_ * c.x() / c.z() + cx_, fy_ * c.y() / c.z() + cy_, c.z()};
  }

  std::optional<PixelProjection> project(const Vec3& p, double z_near = kZNear) const {
    const Vec3 c = to_camera(p);
    if (!(c.z() > z_near)) return std::nullopt;
    PixelProjection q{fx_ * c.x() / c.z() + cx_, fy_ * c.y() / c.z() + cy_, c.z()};
    if (!(q.u >= 0 && q.u < w_ && q.v >= 0 && q.v < h_)) return std::nullopt;
    return q;
  }

  Vec3 unproject(double u, double v, double depth) const {
    const Vec3 c((u - cx_) * depth / fx_, (v - cy_) * depth / fy_, depth);
    return R_.transpose() * (c - t_);
  }

  int height() const { return h_; }
  int width() const { return w_; }

private:
  Mat3 R_;
  Vec3 t_;
  double fx_, fy_, cx_, cy_;
  int h_, w_;
};

inline std::optional<PixelProjection> project_point(const Vec3& p, const CameraRig& rig) {
  return Projector(rig).project(p);
}

inline Vec3 unproject(double u, double v, double depth, const CameraRig& rig) {
  return Projector(rig).unproject(u, v, depth);
}

// Depth test shared by coverage and back-projection. Both depths are the
// float32 values the Z-buffer stores.
inline bool depth_consistent(float z_point, float z_buffer, double eps_rel) {
  if (!std::isfinite(z_buffer)) return false;
  return std::abs(double(z_point) - double(z_buffer)) <= eps_rel * double(z_point);
}

struct RasterOptions {
  int splat_px = 3;
  double z_near = kZNear;
};

// Each point covers a splat_px x splat_px square centered on its pixel.
// Per pixel the smallest (depth, point index) pair wins.
inline RenderedView rasterize(const PointCloud& cloud, const CameraRig& rig, const RasterOptions& opt = {}) {
  if (opt.splat_px < 1 || opt.splat_px % 2 == 0) throw Error("rasterize: splat size must be a positive odd integer");
  if (cloud.size() >= kNoPoint) throw Error("rasterize: too many points for 32-bit indices");
  RenderedView view;
  view.rig_id = rig.id;
  view.height = rig.height;
  view.width = rig.width;
  const std::size_t npx = static_cast<std::size_t>(rig.height) * rig.width;
  view.rgb.assign(npx * 3, 0);
  view.depth.assign(npx, kEmptyDepth);
  view.point_index.assign(npx, kNoPoint);

  const Projector proj(rig);
  const int half = opt.splat_px / 2;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 c = proj.to_camera(cloud.positions[i]);
    if (!(c.z() > opt.z_near)) continue;
    const double u = rig.fx() * c.x() / c.z() + rig.cx();
    const double v = rig.fy() * c.y() / c.z() + rig.cy();
    if (!(u > -half - 1 && u < rig.width + half + 1 && v > -half - 1 && v < rig.height + half + 1)) continue;
    const int pu = static_cast<int>(std::floor(u)), pv = static_cast<int>(std::floor(v));
    const float z = static_cast<float>(c.z());
    const auto idx = static_cast<std::uint32_t>(i);
    const int u0 = std::max(0, pu - half), u1 = std::min(rig.width - 1, pu + half);
    const int v0 = std::max(0, pv - half), v1 = std::min(rig.height - 1, pv + half);
    for (int y = v0; y <= v1; ++y) {
      for (int x = u0; x <= u1; ++x) {
        const std::size_t px = static_cast<std::size_t>(y) * rig.width + x;
        const float d = view.depth[px];
        if (z < d || (z == d && idx < view.point_index[px])) {
          view.depth[px] = z;
          view.point_index[px] = idx;
          std::copy(cloud.colors[i].begin(), cloud.colors[i].end(), view.rgb.begin() + px * 3);
        }
      }
    }
  }
  return view;
}

inline std::vector<RenderedView> render_views(const PointCloud& cloud, const std::vector<CameraRig>& rigs,
                                              const RasterOptions& opt = {}, unsigned threads = 1) {
  std::vector<RenderedView> views(rigs.size());
  parallel_for(rigs.size(), threads, [&](std::size_t v) { views[v] = rasterize(cloud, rigs[v], opt); });
  return views;
}

struct Coverage {
  double ratio = 0;                 // S_R
  std::vector<std::uint8_t> seen;   // P_r membership, one byte per point
  std::size_t count = 0;
};

inline constexpr double kDefaultDepthEpsilon = 1e-2;

// Marks points with at least one depth-consistent projection into `view`.
inline void mark_visible(const PointCloud& cloud, const RenderedView& view, const CameraRig& rig, double eps_rel,
                         std::vector<std::uint8_t>& seen) {
  const Projector proj(rig);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto q = proj.project(cloud.positions[i]);
    if (!q) continue;
    const std::size_t px = view.pixel(q->px(), q->py());
    if (depth_consistent(static_cast<float>(q->depth), view.depth[px], eps_rel)) seen[i] = 1;
  }
}

inline Coverage coverage_ratio(const PointCloud& cloud, const std::vector<RenderedView>& views,
                               const std::vector<CameraRig>& rigs, double eps_rel = kDefaultDepthEpsilon,
                               unsigned threads = 1) {
  if (views.size() != rigs.size()) throw Error("coverage_ratio: view/rig count mismatch");
  Coverage cov;
  cov.seen.assign(cloud.size(), 0);
  std::vector<std::vector<std::uint8_t>> per_view(views.size());
  parallel_for(views.size(), threads, [&](std::size_t v) {
    per_view[v].assign(cloud.size(), 0);
    mark_visible(cloud, views[v], rigs[v], eps_rel, per_view[v]);
  });
  for (const auto& pv : per_view)
    for (std::size_t i = 0; i < pv.size(); ++i) cov.seen[i] |= pv[i];
  for (auto s : cov.seen) cov.count += s;
  cov.ratio = cloud.size() ? double(cov.count) / double(cloud.size()) : 0.0;
  return cov;
}

// ---------------------------------------------------------------------------
// Raw depth / index maps: u32 h, u32 w, then h*w little-endian values.

inline void write_depth_map(const std::filesystem::path& path, const RenderedView& v) {
  binio::Writer w;
  w.put<std::uint32_t>(v.height);
  w.put<std::uint32_t>(v.width);
  w.put_span<float>(v.depth);
  w.save(path);
}

inline void write_index_map(const std::filesystem::path& path, const RenderedView& v) {
  binio::Writer w;
  w.put<std::uint32_t>(v.height);
  w.put<std::uint32_t>(v.width);
  w.put_span<std::uint32_t>(v.point_index);
  w.save(path);
}

template <typename T>
std::vector<T> read_raw_map(const std::filesystem::path& path, int& h, int& w) {
  auto r = binio::Reader::open(path);
  h = static_cast<int>(r.get<std::uint32_t>("height"));
  w = static_cast<int>(r.get<std::uint32_t>("width"));
  const std::uint64_t n = std::uint64_t(h) * std::uint64_t(w);
  r.expect_payload(n * sizeof(T), "map");
  std::vector<T> out(n);
  r.get_into(std::span<T>(out), "map");
  return out;
}

}  // namespace ou3d
