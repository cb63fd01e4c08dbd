#pragma once

// Mask/feature provider boundary. A MaskSet is what a mask-level
// vision-language model reports for one rendered view; the oracle below
// produces one from ground-truth labels so the geometry pipeline can be
// tested without a network.

#include "ou3d/binio.hpp"
#include "ou3d/render.hpp"

#include <deque>
#include <map>
#include <random>

namespace ou3d {

inline constexpr double kUnitNormTolerance = 1e-4;

struct MaskSet {
  int view_id = 0;
  int height = 0, width = 0;
  std::uint32_t num_masks = 0;
  std::uint32_t dim = 0;                  // C
  std::vector<std::uint32_t> mask_map;    // h * w, 0 = no mask
  std::vector<float> features;            // num_masks * dim, row-major

  std::span<const float> feature(std::uint32_t mask_id) const {
    return {features.data() + std::size_t(mask_id - 1) * dim, dim};
  }

  void validate() const {
    if (mask_map.size() != std::size_t(height) * width) throw Error("MaskSet: mask map size does not match h*w");
    if (features.size() != std::size_t(num_masks) * dim) throw Error("MaskSet: feature matrix size mismatch");
    for (std::size_t i = 0; i < mask_map.size(); ++i)
      if (mask_map[i] > num_masks)
        throw Error("MaskSet: mask id " + std::to_string(mask_map[i]) + " at pixel " + std::to_string(i) +
                    " exceeds mask count " + std::to_string(num_masks));
    for (std::uint32_t k = 1; k <= num_masks; ++k) {
      double s = 0;
      for (float x : feature(k)) s += double(x) * x;
      const double n = std::sqrt(s);
      if (std::abs(n - 1) > kUnitNormTolerance)
        throw Error("MaskSet: feature row " + std::to_string(k) + " has norm " + std::to_string(n) + ", expected 1");
    }
  }

  bool operator==(const MaskSet&) const = default;
};

struct TextEmbeddingTable {
  std::vector<std::string> names;
  std::uint32_t dim = 0;
  std::vector<float> vectors;  // names.size() * dim

  std::size_t size() const { return names.size(); }
  std::span<const float> row(std::size_t n) const { return {vectors.data() + n * dim, dim}; }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    return std::nullopt;
  }

  void validate() const {
    if (names.empty()) throw Error("text table is empty");
    if (vectors.size() != names.size() * dim) throw Error("text table: vector matrix size mismatch");
    for (std::size_t n = 0; n < names.size(); ++n) {
      double s = 0;
      for (float x : row(n)) s += double(x) * x;
      if (std::abs(std::sqrt(s) - 1) > kUnitNormTolerance)
        throw Error("text table: embedding for '" + names[n] + "' is not unit norm");
    }
  }

  bool operator==(const TextEmbeddingTable&) const = default;
};

enum class TableMode { Orthogonal, SeededRandom };

// Orthogonal mode uses signed standard basis vectors, so pairwise cosines
// are exactly zero. Random mode rejects candidates with |cos| >= 0.5
// against any earlier class.
inline TextEmbeddingTable synthetic_text_table(const std::vector<std::string>& names, std::uint32_t dim,
                                               TableMode mode, std::uint64_t seed = 0) {
  if (names.empty()) throw Error("synthetic_text_table: no classes");
  if (dim == 0) throw Error("synthetic_text_table: dimension must be positive");
  TextEmbeddingTable t;
  t.names = names;
  t.dim = dim;
  t.vectors.assign(names.size() * dim, 0.0f);
  if (mode == TableMode::Orthogonal) {
    if (names.size() > dim)
      throw Error("synthetic_text_table: " + std::to_string(names.size()) + " classes cannot be orthogonal in " +
                  std::to_string(dim) + " dimensions");
    for (std::size_t n = 0; n < names.size(); ++n) t.vectors[n * dim + n] = 1.0f;
    return t;
  }
  std::mt19937_64 rng(derive_seed(seed, 0x7e47));
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t n = 0; n < names.size(); ++n) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw Error("synthetic_text_table: could not place class '" + names[n] + "'");
      std::vector<double> v(dim);
      double s = 0;
      for (auto& x : v) {
        x = g(rng);
        s += x * x;
      }
      s = std::sqrt(s);
      std::vector<float> f(dim);
      for (std::uint32_t c = 0; c < dim; ++c) f[c] = static_cast<float>(v[c] / s);
      bool ok = true;
      for (std::size_t m = 0; m < n && ok; ++m) {
        double d = 0;
        for (std::uint32_t c = 0; c < dim; ++c) d += double(f[c]) * t.vectors[m * dim + c];
        ok = std::abs(d) < 0.5;
      }
      if (ok) {
        std::copy(f.begin(), f.end(), t.vectors.begin() + n * dim);
        break;
      }
    }
  }
  return t;
}

// Maps each cloud class to its row in `table`; throws if a class is missing.
inline std::vector<std::size_t> class_rows(const PointCloud& cloud, const TextEmbeddingTable& table) {
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < cloud.class_count(); ++c) {
    const std::string name = c < cloud.class_names.size() ? cloud.class_names[c] : std::to_string(c);
    auto r = table.find(name);
    if (!r) throw Error("text table has no embedding for class '" + name + "'");
    rows.push_back(*r);
  }
  return rows;
}

// Ground-truth stand-in for the frozen 2D model. Connected regions
// (4-neighborhood) of equal-label pixels become masks, numbered from 1 in
// raster order of their first pixel. Each mask's feature is its class
// embedding plus isotropic Gaussian noise with per-component sigma
// noise / sqrt(C), renormalized.
// Masks are the 4-connected components of equal-label pixels, numbered in
// raster order of their first pixel; background keeps id 0.
inline MaskSet oracle_masks(const RenderedView& view, const PointCloud& cloud, const TextEmbeddingTable& table,
                            double noise, std::uint64_t seed) {
  if (!cloud.has_labels()) throw Error("oracle_masks: cloud has no ground-truth labels");
  if (noise < 0) throw Error("oracle_masks: noise must be non-negative");
  const auto rows = class_rows(cloud, table);
  MaskSet ms;
  ms.view_id = view.rig_id;
  ms.height = view.height;
  ms.width = view.width;
  ms.dim = table.dim;
  ms.mask_map.assign(view.point_index.size(), 0);

  auto label_at = [&](std::size_t px) -> std::int32_t {
    const auto idx = view.point_index[px];
    return idx == kNoPoint ? -1 : cloud.labels[idx];
  };
  std::vector<std::int32_t> mask_label;
  std::vector<std::size_t> queue;
  std::vector<std::uint8_t> visited(view.point_index.size(), 0);
  for (int y = 0; y < view.height; ++y) {
    for (int x = 0; x < view.width; ++x) {
      const std::size_t px = view.pixel(x, y);
      const std::int32_t lbl = label_at(px);
      if (lbl < 0 || visited[px]) continue;
      visited[px] = 1;
      queue.assign(1, px);
      for (std::size_t q = 0; q < queue.size(); ++q) {
        const std::size_t cur = queue[q];
        const int cx = static_cast<int>(cur % view.width), cy = static_cast<int>(cur / view.width);
        const int nx[4] = {cx - 1, cx + 1, cx, cx};
        const int ny[4] = {cy, cy, cy - 1, cy + 1};
        for (int k = 0; k < 4; ++k) {
          if (nx[k] < 0 || ny[k] < 0 || nx[k] >= view.width || ny[k] >= view.height) continue;
          const std::size_t np = view.pixel(nx[k], ny[k]);
          if (!visited[np] && label_at(np) == lbl) {
            visited[np] = 1;
            queue.push_back(np);
          }
        }
      }
      mask_label.push_back(lbl);
      const auto id = static_cast<std::uint32_t>(mask_label.size());
      for (auto q : queue) ms.mask_map[q] = id;
    }
  }

  ms.num_masks = static_cast<std::uint32_t>(mask_label.size());
  ms.features.resize(std::size_t(ms.num_masks) * ms.dim);
  std::mt19937_64 rng(derive_seed(seed, 0x0a11e, static_cast<std::uint64_t>(view.rig_id)));
  std::normal_distribution<double> g(0.0, 1.0);
  const double sigma = noise / std::sqrt(double(ms.dim));
  for (std::uint32_t k = 0; k < ms.num_masks; ++k) {
    const auto t = table.row(rows[static_cast<std::size_t>(mask_label[k])]);
    float* out = ms.features.data() + std::size_t(k) * ms.dim;
    if (noise == 0) {
      std::copy(t.begin(), t.end(), out);
      continue;
    }
    std::vector<double> f(ms.dim);
    double s = 0;
    for (std::uint32_t c = 0; c < ms.dim; ++c) {
      f[c] = t[c] + sigma * g(rng);
      s += f[c] * f[c];
    }
    s = std::sqrt(s);
    for (std::uint32_t c = 0; c < ms.dim; ++c) out[c] = static_cast<float>(f[c] / s);
  }
  return ms;
}

// ---------------------------------------------------------------------------
// OU3D interchange: "OU3D", u32 version=1, u32 h, u32 w, u32 K, u32 C,
// h*w u32 mask ids, K*C float32 features. All little-endian.

inline constexpr std::uint32_t kMaskSetVersion = 1;

inline std::vector<char> encode_maskset(const MaskSet& ms) {
  binio::Writer w;
  w.magic("OU3D");
  w.put<std::uint32_t>(kMaskSetVersion);
  w.put<std::uint32_t>(ms.height);
  w.put<std::uint32_t>(ms.width);
  w.put<std::uint32_t>(ms.num_masks);
  w.put<std::uint32_t>(ms.dim);
  w.put_span<std::uint32_t>(ms.mask_map);
  w.put_span<float>(ms.features);
  return w.data();
}

inline void write_maskset(const std::filesystem::path& path, const MaskSet& ms) {
  binio::Writer w;
  const auto bytes = encode_maskset(ms);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline MaskSet decode_maskset(binio::Reader r, int view_id) {
  r.expect_magic("OU3D");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kMaskSetVersion)
    throw Error(r.name() + ": version mismatch, expected " + std::to_string(kMaskSetVersion) + " found " +
                std::to_string(version));
  MaskSet ms;
  ms.view_id = view_id;
  ms.height = static_cast<int>(r.get<std::uint32_t>("h"));
  ms.width = static_cast<int>(r.get<std::uint32_t>("w"));
  ms.num_masks = r.get<std::uint32_t>("K_masks");
  ms.dim = r.get<std::uint32_t>("C");
  const std::uint64_t npx = std::uint64_t(ms.height) * ms.width;
  const std::uint64_t nfeat = std::uint64_t(ms.num_masks) * ms.dim;
  r.expect_payload(npx * 4 + nfeat * 4, "mask map + features");
  ms.mask_map.resize(npx);
  ms.features.resize(nfeat);
  r.get_into(std::span<std::uint32_t>(ms.mask_map), "mask map");
  r.get_into(std::span<float>(ms.features), "features");
  ms.validate();
  return ms;
}

// View id is parsed from a `view_<id>.ou3d` file name when not given.
inline MaskSet read_maskset(const std::filesystem::path& path, std::optional<int> view_id = std::nullopt) {
  int id = 0;
  if (view_id) {
    id = *view_id;
  } else {
    const std::string stem = path.stem().string();
    if (stem.rfind("view_", 0) == 0) id = std::atoi(stem.c_str() + 5);
  }
  return decode_maskset(binio::Reader::open(path), id);
}

// ---------------------------------------------------------------------------
// OU3T text table: "OU3T", u32 version=1, u32 C, u32 n, then per class
// u16 name length, UTF-8 name, C float32.

inline constexpr std::uint32_t kTextTableVersion = 1;

inline void write_text_table(const std::filesystem::path& path, const TextEmbeddingTable& t) {
  binio::Writer w;
  w.magic("OU3T");
  w.put<std::uint32_t>(kTextTableVersion);
  w.put<std::uint32_t>(t.dim);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.names.size()));
  for (std::size_t n = 0; n < t.names.size(); ++n) {
    if (t.names[n].size() > 0xFFFF) throw Error("text table: class name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.names[n].size()));
    w.bytes(t.names[n].data(), t.names[n].size());
    w.put_span<float>(t.row(n));
  }
  w.save(path);
}

inline TextEmbeddingTable read_text_table(const std::filesystem::path& path) {
  auto r = binio::Reader::open(path);
  r.expect_magic("OU3T");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kTextTableVersion)
    throw Error(r.name() + ": version mismatch, expected " + std::to_string(kTextTableVersion) + " found " +
                std::to_string(version));
  TextEmbeddingTable t;
  t.dim = r.get<std::uint32_t>("C");
  const auto n = r.get<std::uint32_t>("n_classes");
  t.vectors.resize(std::size_t(n) * t.dim);
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto len = r.get<std::uint16_t>("name length");
    t.names.push_back(r.get_string(len, "name"));
    r.get_into(std::span<float>(t.vectors.data() + std::size_t(k) * t.dim, t.dim), "embedding");
  }
  r.expect_end();
  t.validate();
  return t;
}

}  // namespace ou3d
