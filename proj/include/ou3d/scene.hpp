#pragma once

#include "ou3d/common.hpp"

#include <array>
#include <numbers>
#include <optional>
#include <random>

namespace ou3d {

using Rgb = std::array<std::uint8_t, 3>;

// Structure-of-arrays colored point cloud. `labels` is empty for unlabeled
// clouds; otherwise it has one entry per point indexing into class_names.
struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Rgb> colors;
  std::vector<std::int32_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return positions.size(); }
  bool has_labels() const { return !labels.empty(); }

  void validate() const {
    if (positions.empty()) throw Error("point cloud is empty");
    if (colors.size() != positions.size()) throw Error("point cloud: color count does not match point count");
    for (std::size_t i = 0; i < positions.size(); ++i)
      if (!positions[i].allFinite()) throw Error("point cloud: non-finite coordinate at element " + std::to_string(i));
    if (has_labels()) {
      if (labels.size() != positions.size()) throw Error("point cloud: label count does not match point count");
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || (!class_names.empty() && static_cast<std::size_t>(labels[i]) >= class_names.size()))
          throw Error("point cloud: label " + std::to_string(labels[i]) + " at element " + std::to_string(i) +
                      " is outside the class list");
      }
    }
  }

  std::size_t class_count() const {
    if (!class_names.empty()) return class_names.size();
    std::int32_t mx = -1;
    for (auto l : labels) mx = std::max(mx, l);
    return static_cast<std::size_t>(mx + 1);
  }
};

// Axis-aligned box. W is the x extent, L the y extent, H the z extent.
struct BoundingBox {
  Vec3 origin = Vec3::Zero();
  double W = 0, L = 0, H = 0;

  Vec3 extents() const { return {W, L, H}; }
  Vec3 center() const { return origin + Vec3(W / 2, L / 2, H / 2); }
  Vec3 max_corner() const { return origin + extents(); }
};

inline constexpr double kDefaultBoxEpsilon = 1e-6;

inline BoundingBox bounding_box(const PointCloud& cloud, double eps_box = kDefaultBoxEpsilon) {
  if (cloud.positions.empty()) throw Error("bounding_box: empty cloud");
  Vec3 lo = cloud.positions.front(), hi = lo;
  for (const auto& p : cloud.positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  BoundingBox box;
  box.origin = lo;
  const Vec3 ext = hi - lo;
  double* dims[3] = {&box.W, &box.L, &box.H};
  static constexpr const char* names[3] = {"W (x)", "L (y)", "H (z)"};
  for (int a = 0; a < 3; ++a) {
    *dims[a] = ext[a];
    if (!(ext[a] > 0)) {
      *dims[a] = eps_box;
      warn(std::string("bounding_box: degenerate extent ") + names[a] + ", inflated to " + std::to_string(eps_box));
    }
  }
  return box;
}

// ---------------------------------------------------------------------------
// Synthetic urban scenes with exact ground truth.

struct Rect {
  double x0 = 0, y0 = 0, wx = 0, ly = 0;

  double area() const { return wx * ly; }
  bool contains(double x, double y) const { return x >= x0 && x < x0 + wx && y >= y0 && y < y0 + ly; }
  bool inside(const Rect& o) const {
    return x0 >= o.x0 && y0 >= o.y0 && x0 + wx <= o.x0 + o.wx && y0 + ly <= o.y0 + o.ly;
  }
  bool overlaps(const Rect& o) const {
    return x0 < o.x0 + o.wx && o.x0 < x0 + wx && y0 < o.y0 + o.ly && o.y0 < y0 + ly;
  }
};

struct BuildingSpec {
  Rect footprint;
  double height = 10;
};

struct TreeSpec {
  double x = 0, y = 0;
  double trunk_height = 2.5, trunk_radius = 0.2, crown_radius = 2.0;
};

struct VehicleSpec {
  Rect footprint;
  double height = 1.5;
};

enum SceneClass : std::int32_t { kGround = 0, kBuilding = 1, kTree = 2, kVehicle = 3, kRoad = 4 };

inline const std::vector<std::string>& scene_class_names() {
  static const std::vector<std::string> names = {"ground", "building", "tree", "vehicle", "road"};
  return names;
}

struct SceneSpec {
  Rect ground;
  std::vector<Rect> roads;
  std::vector<BuildingSpec> buildings;
  std::vector<TreeSpec> trees;
  std::vector<VehicleSpec> vehicles;
  std::array<Rgb, 5> class_colors = {Rgb{96, 140, 70}, Rgb{190, 120, 90}, Rgb{30, 110, 40}, Rgb{40, 60, 200},
                                     Rgb{70, 70, 75}};
  int color_jitter = 12;
  double density = 20.0;  // points per square meter of surface
  std::uint64_t seed = 1;
};

namespace detail {

struct Surface {
  SceneClass cls;
  double area;
  std::function<Vec3(std::mt19937_64&)> sample;
};

inline Vec3 sample_rect_excluding(std::mt19937_64& rng, const Rect& r, const std::vector<Rect>& holes, double z) {
  std::uniform_real_distribution<double> ux(r.x0, r.x0 + r.wx), uy(r.y0, r.y0 + r.ly);
  for (;;) {
    const double x = ux(rng), y = uy(rng);
    bool hit = false;
    for (const auto& h : holes) hit = hit || h.contains(x, y);
    if (!hit) return {x, y, z};
  }
}

// Open box (four walls plus top) standing on z = 0.
inline void add_box_surfaces(std::vector<Surface>& out, SceneClass cls, const Rect& f, double h) {
  const double x0 = f.x0, y0 = f.y0, x1 = f.x0 + f.wx, y1 = f.y0 + f.ly;
  out.push_back({cls, f.area(), [=](std::mt19937_64& g) {
                   std::uniform_real_distribution<double> ux(x0, x1), uy(y0, y1);
                   const double x = ux(g);
                   return Vec3(x, uy(g), h);
                 }});
  auto wall = [&](double ax, double ay, double bx, double by) {
    const double len = std::hypot(bx - ax, by - ay);
    out.push_back({cls, len * h, [=](std::mt19937_64& g) {
                     std::uniform_real_distribution<double> u(0.0, 1.0), uz(0.0, h);
                     const double t = u(g);
                     return Vec3(ax + t * (bx - ax), ay + t * (by - ay), uz(g));
                   }});
  };
  wall(x0, y0, x1, y0);
  wall(x1, y0, x1, y1);
  wall(x1, y1, x0, y1);
  wall(x0, y1, x0, y0);
}

inline Vec3 unit_sphere(std::mt19937_64& g) {
  std::uniform_real_distribution<double> uz(-1.0, 1.0), ut(0.0, 2 * std::numbers::pi);
  const double z = uz(g), t = ut(g);
  const double r = std::sqrt(std::max(0.0, 1 - z * z));
  return {r * std::cos(t), r * std::sin(t), z};
}

}  // namespace detail

// Total sampled surface area, and the per-surface list, for a spec.
inline std::vector<detail::Surface> scene_surfaces(const SceneSpec& spec) {
  using detail::Surface;
  if (!(spec.ground.area() > 0)) throw Error("generate_scene: empty spec (ground has no area)");
  if (!(spec.density > 0)) throw Error("generate_scene: density must be positive");

  std::vector<Rect> footprints;
  for (const auto& r : spec.roads) {
    if (!r.inside(spec.ground)) throw Error("generate_scene: road outside the ground extent");
    footprints.push_back(r);
  }
  for (const auto& b : spec.buildings) {
    if (!b.footprint.inside(spec.ground)) throw Error("generate_scene: building outside the ground extent");
    footprints.push_back(b.footprint);
  }
  for (std::size_t i = 0; i < footprints.size(); ++i)
    for (std::size_t j = i + 1; j < footprints.size(); ++j)
      if (footprints[i].overlaps(footprints[j])) throw Error("generate_scene: overlapping roads/buildings");

  // Vehicles park either on a road or on open ground.
  std::vector<std::vector<Rect>> road_holes(spec.roads.size());
  std::vector<Rect> ground_holes = footprints;
  for (const auto& v : spec.vehicles) {
    bool placed = false;
    for (std::size_t r = 0; r < spec.roads.size() && !placed; ++r) {
      if (v.footprint.inside(spec.roads[r])) {
        road_holes[r].push_back(v.footprint);
        placed = true;
      }
    }
    for (const auto& b : spec.buildings)
      if (v.footprint.overlaps(b.footprint)) throw Error("generate_scene: vehicle overlaps a building");
    if (!placed) {
      for (const auto& r : spec.roads)
        if (v.footprint.overlaps(r)) throw Error("generate_scene: vehicle straddles a road edge");
      if (!v.footprint.inside(spec.ground)) throw Error("generate_scene: vehicle outside the ground extent");
      ground_holes.push_back(v.footprint);
    }
  }

  std::vector<Surface> surfaces;
  auto flat = [&](SceneClass cls, const Rect& r, std::vector<Rect> holes) {
    double area = r.area();
    for (const auto& h : holes) area -= h.area();
    surfaces.push_back({cls, area, [r, holes = std::move(holes)](std::mt19937_64& g) {
                          return detail::sample_rect_excluding(g, r, holes, 0.0);
                        }});
  };
  flat(kGround, spec.ground, ground_holes);
  for (std::size_t r = 0; r < spec.roads.size(); ++r) flat(kRoad, spec.roads[r], road_holes[r]);
  for (const auto& b : spec.buildings) detail::add_box_surfaces(surfaces, kBuilding, b.footprint, b.height);
  for (const auto& v : spec.vehicles) detail::add_box_surfaces(surfaces, kVehicle, v.footprint, v.height);
  for (const auto& t : spec.trees) {
    const double pi = std::numbers::pi;
    surfaces.push_back({kTree, 2 * pi * t.trunk_radius * t.trunk_height, [t](std::mt19937_64& g) {
                          std::uniform_real_distribution<double> ua(0.0, 2 * std::numbers::pi), uz(0.0, t.trunk_height);
                          const double a = ua(g);
                          return Vec3(t.x + t.trunk_radius * std::cos(a), t.y + t.trunk_radius * std::sin(a), uz(g));
                        }});
    surfaces.push_back({kTree, 4 * pi * t.crown_radius * t.crown_radius, [t](std::mt19937_64& g) {
                          const Vec3 c(t.x, t.y, t.trunk_height + t.crown_radius);
                          return Vec3(c + t.crown_radius * detail::unit_sphere(g));
                        }});
  }
  return surfaces;
}

inline double scene_surface_area(const SceneSpec& spec) {
  double a = 0;
  for (const auto& s : scene_surfaces(spec)) a += s.area;
  return a;
}

// Deterministic in `spec` (including its seed). Each surface receives its
// share of round(density * total area) by cumulative rounding.
inline PointCloud generate_scene(const SceneSpec& spec) {
  const auto surfaces = scene_surfaces(spec);
  std::mt19937_64 rng(derive_seed(spec.seed, 0x5ce7e));
  std::uniform_int_distribution<int> jitter(-spec.color_jitter, spec.color_jitter);

  PointCloud cloud;
  cloud.class_names = scene_class_names();
  double cum = 0;
  long long emitted = 0;
  for (const auto& s : surfaces) {
    cum += s.area;
    const long long target = std::llround(spec.density * cum);
    for (; emitted < target; ++emitted) {
      // Positions are snapped to float precision so the cloud survives a
      // float32 PLY round trip unchanged.
      const Vec3 p = s.sample(rng);
      cloud.positions.emplace_back(double(float(p.x())), double(float(p.y())), double(float(p.z())));
      Rgb c = spec.class_colors[s.cls];
      for (auto& ch : c) ch = static_cast<std::uint8_t>(std::clamp(int(ch) + jitter(rng), 0, 255));
      cloud.colors.push_back(c);
      cloud.labels.push_back(s.cls);
    }
  }
  if (cloud.positions.empty()) throw Error("generate_scene: spec produces no points");
  return cloud;
}

// A small city block: a road cross, four buildings, street trees and a few
// parked vehicles. `extent` is the ground side length in meters.
inline SceneSpec urban_scene_spec(std::uint64_t seed, double density = 20.0, double extent = 40.0,
                                  int vehicles = 4) {
  SceneSpec s;
  s.seed = seed;
  s.density = density;
  s.ground = {0, 0, extent, extent};
  const double rw = extent * 0.15;
  const double mid = extent / 2;
  // Horizontal road spans the full width; the vertical road is split around it.
  s.roads.push_back({0, mid - rw / 2, extent, rw});
  s.roads.push_back({mid - rw / 2, 0, rw, mid - rw / 2});
  s.roads.push_back({mid - rw / 2, mid + rw / 2, rw, mid - rw / 2});

  std::mt19937_64 rng(derive_seed(seed, 0x1a40));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double q = mid - rw / 2;  // quadrant side
  const double heights[4] = {14, 9, 18, 11};
  int qi = 0;
  for (double qx : {0.0, mid + rw / 2}) {
    for (double qy : {0.0, mid + rw / 2}) {
      const double side = q * (0.5 + 0.1 * u(rng));
      const double ox = qx + (q - side) * (0.2 + 0.3 * u(rng));
      const double oy = qy + (q - side) * (0.2 + 0.3 * u(rng));
      s.buildings.push_back({{ox, oy, side, side}, heights[qi] * (0.9 + 0.2 * u(rng)) * extent / 40.0});
      // One tree in the open corner of each quadrant, away from the building.
      const double tx = (ox - qx > qx + q - (ox + side)) ? qx + (ox - qx) / 2 : ox + side + (qx + q - ox - side) / 2;
      const double ty = (oy - qy > qy + q - (oy + side)) ? qy + (oy - qy) / 2 : oy + side + (qy + q - oy - side) / 2;
      s.trees.push_back({tx, ty, 2.5, 0.25, std::min(2.0, 0.3 * q)});
      ++qi;
    }
  }
  const double vl = 4.5, vw = 1.8;
  for (int v = 0; v < vehicles; ++v) {
    // Alternate lanes of the horizontal road, spread along x.
    const double x = 1.0 + (extent - vl - 2.0) * (v + 0.5) / vehicles;
    const double y = (v % 2 == 0) ? mid - rw / 2 + 0.4 : mid + rw / 2 - 0.4 - vw;
    s.vehicles.push_back({{x, y, vl, vw}, 1.5});
  }
  return s;
}

}  // namespace ou3d
