#pragma once

// Virtual camera rigs: global orbit above the scene center plus a K x K grid
// of local orbits, each aimed with a lookat pose and given a FoV that covers
// its region from a nadir vantage.

#include "ou3d/scene.hpp"

#include <json.hpp>

#include <Eigen/Geometry>
#include <numbers>

namespace ou3d {

struct ViewParams {
  int K = 4;
  double A_deg = 90;  // angular interval; must divide 360
  double R = 0.5;     // local orbit radius divisor
  int height = 512;
  int width = 512;
  std::uint64_t seed = 0;

  int views_per_orbit() const { return static_cast<int>(std::lround(360.0 / A_deg)); }

  void validate() const {
    if (K < 1) throw Error("ViewParams: K must be >= 1");
    if (!(A_deg > 0) || A_deg > 360) throw Error("ViewParams: A must be in (0, 360]");
    const double n = 360.0 / A_deg;
    if (std::abs(n - std::round(n)) > 1e-9) throw Error("ViewParams: A must divide 360");
    if (!(R > 0)) throw Error("ViewParams: R must be positive");
    if (height < 16 || width < 16) throw Error("ViewParams: image size must be at least 16x16");
  }
};

enum class RigKind { Global, Local };

struct CameraRig {
  int id = 0;
  RigKind kind = RigKind::Global;
  int i = 0, j = 0;  // local anchor indices, 1-based; zero for global rigs
  double theta_deg = 0;
  Vec3 eye = Vec3::Zero();
  Vec3 target = Vec3::Zero();
  Mat4 E = Mat4::Identity();  // world -> camera
  Mat3 I = Mat3::Identity();
  int height = 0, width = 0;

  double fx() const { return I(0, 0); }
  double fy() const { return I(1, 1); }
  double cx() const { return I(0, 2); }
  double cy() const { return I(1, 2); }
};

inline constexpr double kUpFallbackThreshold = 1 - 1e-6;

// World-to-camera pose. The camera looks along its +z axis with image x to
// the right and y down. `up` is replaced by +y when nearly parallel to the
// view direction (+z is used instead if `up` already was +y).
inline Mat4 lookat(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
  const Vec3 d = target - eye;
  if (!(d.norm() > 0)) throw Error("lookat: eye and target coincide");
  const Vec3 f = d.normalized();
  Vec3 u = up.normalized();
  if (std::abs(f.dot(u)) > kUpFallbackThreshold) u = std::abs(f.dot(Vec3::UnitY())) > kUpFallbackThreshold ? Vec3::UnitZ() : Vec3::UnitY();
  const Vec3 x = f.cross(u).normalized();
  const Vec3 y = f.cross(x);
  Mat3 R;
  R.row(0) = x.transpose();
  R.row(1) = y.transpose();
  R.row(2) = f.transpose();
  Mat4 E = Mat4::Identity();
  E.topLeftCorner<3, 3>() = R;
  E.topRightCorner<3, 1>() = -R * eye;
  return E;
}

inline double global_fov_rad(const BoundingBox& b) {
  const double half_diag = std::sqrt(b.L * b.L + b.W * b.W) / 2;
  return 2 * std::atan(half_diag / (b.H + std::sqrt(b.L * b.W)));
}

inline double local_anchor_height(const BoundingBox& b, int K) { return b.H + std::sqrt(b.L * b.W) / (2.0 * K); }

inline double local_fov_rad(const BoundingBox& b, int K) {
  const double cw = b.W / K, cl = b.L / K;
  const double half_diag = std::sqrt(cw * cw + cl * cl) / 2;
  return 2 * std::atan(half_diag / local_anchor_height(b, K));
}

inline Mat3 intrinsics_from_fov(double fov_rad, int height, int width) {
  if (!(fov_rad > 0) || fov_rad >= 179.0 * std::numbers::pi / 180.0)
    throw Error("intrinsics: degenerate field of view " + std::to_string(fov_rad * 180 / std::numbers::pi) + " deg");
  const double f = (std::min(height, width) / 2.0) / std::tan(fov_rad / 2);
  Mat3 I = Mat3::Zero();
  I(0, 0) = f;
  I(1, 1) = f;
  I(0, 2) = width / 2.0;
  I(1, 2) = height / 2.0;
  I(2, 2) = 1;
  return I;
}

inline Mat3 intrinsics_for(RigKind kind, const BoundingBox& box, const ViewParams& p) {
  return intrinsics_from_fov(kind == RigKind::Global ? global_fov_rad(box) : local_fov_rad(box, p.K), p.height,
                             p.width);
}

struct OrbitGeometry {
  Vec3 anchor;
  Vec3 target;
  double radius;
};

inline OrbitGeometry global_orbit(const BoundingBox& b) {
  const Vec3 c = b.center();
  const double s = std::sqrt(b.L * b.W);
  return {Vec3(c.x(), c.y(), b.origin.z() + b.H + s), Vec3(c.x(), c.y(), b.origin.z() + (b.H + s) / 2), s / 4};
}

// Local anchor (i, j), 1 <= i, j <= K.
inline OrbitGeometry local_orbit(const BoundingBox& b, const ViewParams& p, int i, int j) {
  const double s = std::sqrt(b.L * b.W);
  const double ax = b.origin.x() + i * b.W / (p.K + 1);
  const double ay = b.origin.y() + j * b.L / (p.K + 1);
  return {Vec3(ax, ay, b.origin.z() + local_anchor_height(b, p.K)), Vec3(ax, ay, b.origin.z() + b.H / 2),
          s / (p.R * p.K)};
}

namespace detail {

// First orbit angle, uniform in [0, A), one independent draw per orbit.
inline double initial_angle(std::uint64_t seed, std::uint64_t orbit, double A) {
  std::mt19937_64 rng(derive_seed(seed, 0x71e7a, orbit));
  return std::uniform_real_distribution<double>(0.0, A)(rng);
}

inline void emit_orbit(std::vector<CameraRig>& out, const OrbitGeometry& g, const Mat3& I, const ViewParams& p,
                       RigKind kind, int i, int j, double theta0) {
  for (int k = 0; k < p.views_per_orbit(); ++k) {
    CameraRig r;
    r.id = static_cast<int>(out.size());
    r.kind = kind;
    r.i = i;
    r.j = j;
    r.theta_deg = theta0 + k * p.A_deg;
    const double t = r.theta_deg * std::numbers::pi / 180.0;
    r.eye = g.anchor + g.radius * Vec3(std::cos(t), std::sin(t), 0);
    r.target = g.target;
    r.E = lookat(r.eye, r.target);
    r.I = I;
    r.height = p.height;
    r.width = p.width;
    out.push_back(r);
  }
}

}  // namespace detail

inline std::vector<CameraRig> global_rigs(const BoundingBox& box, const ViewParams& p) {
  p.validate();
  std::vector<CameraRig> out;
  detail::emit_orbit(out, global_orbit(box), intrinsics_for(RigKind::Global, box, p), p, RigKind::Global, 0, 0,
                     detail::initial_angle(p.seed, 0, p.A_deg));
  return out;
}

inline std::vector<CameraRig> local_rigs(const BoundingBox& box, const ViewParams& p) {
  p.validate();
  std::vector<CameraRig> out;
  const Mat3 I = intrinsics_for(RigKind::Local, box, p);
  for (int i = 1; i <= p.K; ++i)
    for (int j = 1; j <= p.K; ++j)
      detail::emit_orbit(out, local_orbit(box, p, i, j), I, p, RigKind::Local, i, j,
                         detail::initial_angle(p.seed, static_cast<std::uint64_t>((i - 1) * p.K + j), p.A_deg));
  return out;
}

// Global rigs first, then local rigs in (i, j, k) order; ids are dense.
inline std::vector<CameraRig> all_rigs(const BoundingBox& box, const ViewParams& p) {
  auto rigs = global_rigs(box, p);
  for (auto r : local_rigs(box, p)) {
    r.id = static_cast<int>(rigs.size());
    rigs.push_back(r);
  }
  return rigs;
}

// ---------------------------------------------------------------------------
// Rig bundle JSON.

inline nlohmann::json rig_to_json(const CameraRig& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["kind"] = r.kind == RigKind::Global ? "global" : "local";
  j["i"] = r.i;
  j["j"] = r.j;
  j["theta_deg"] = r.theta_deg;
  j["eye"] = {r.eye.x(), r.eye.y(), r.eye.z()};
  j["target"] = {r.target.x(), r.target.y(), r.target.z()};
  std::vector<double> E, I;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) E.push_back(r.E(a, b));
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) I.push_back(r.I(a, b));
  j["E"] = E;
  j["I"] = I;
  j["h"] = r.height;
  j["w"] = r.width;
  return j;
}

inline CameraRig rig_from_json(const nlohmann::json& j) {
  try {
    CameraRig r;
    r.id = j.at("id").get<int>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind != "global" && kind != "local") throw Error("rig json: unknown kind '" + kind + "'");
    r.kind = kind == "global" ? RigKind::Global : RigKind::Local;
    r.i = j.at("i").get<int>();
    r.j = j.at("j").get<int>();
    r.theta_deg = j.at("theta_deg").get<double>();
    const auto eye = j.at("eye").get<std::vector<double>>();
    const auto tgt = j.at("target").get<std::vector<double>>();
    const auto E = j.at("E").get<std::vector<double>>();
    const auto I = j.at("I").get<std::vector<double>>();
    if (eye.size() != 3 || tgt.size() != 3 || E.size() != 16 || I.size() != 9)
      throw Error("rig json: wrong array length in rig " + std::to_string(r.id));
    r.eye = Vec3(eye[0], eye[1], eye[2]);
    r.target = Vec3(tgt[0], tgt[1], tgt[2]);
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) r.E(a, b) = E[a * 4 + b];
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) r.I(a, b) = I[a * 3 + b];
    r.height = j.at("h").get<int>();
    r.width = j.at("w").get<int>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("rig json: ") + e.what());
  }
}

inline nlohmann::json rigs_to_json(const std::vector<CameraRig>& rigs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rigs) arr.push_back(rig_to_json(r));
  return {{"rigs", arr}};
}

inline std::vector<CameraRig> rigs_from_json(const nlohmann::json& doc) {
  std::vector<CameraRig> out;
  if (!doc.contains("rigs") || !doc["rigs"].is_array()) throw Error("rig json: missing 'rigs' array");
  for (const auto& j : doc["rigs"]) out.push_back(rig_from_json(j));
  return out;
}

}  // namespace ou3d
