#pragma once

// Open-vocabulary inference: 2D/3D feature blending, cosine-argmax labeling
// against text embeddings, and a keyword lexicon standing in for an LLM
// query parser.

#include "ou3d/distill.hpp"
#include "ou3d/ply.hpp"

#include <cctype>
#include <fstream>
#include <json.hpp>

namespace ou3d {

enum class FusionMode { Fusion, Ensemble };

struct FusionParams {
  double alpha = 0.1;
  FusionMode mode = FusionMode::Fusion;

  void validate() const {
    if (!(alpha >= 0 && alpha <= 1)) throw Error("FusionParams: alpha must be in [0, 1]");
  }
};

// Per-point inputs to inference. f3d has a row for every point; f2d rows
// are meaningful only where covered[p] is set.
struct PointFeatures {
  std::size_t num_points = 0;
  std::uint32_t dim = 0;
  std::span<const float> f2d;
  std::span<const std::uint8_t> covered;
  std::span<const float> f3d;

  static PointFeatures from(const FeatureLibrary& lib, std::span<const float> f3d) {
    if (f3d.size() != lib.num_points * lib.dim) throw Error("PointFeatures: 3D feature matrix has the wrong shape");
    return {lib.num_points, lib.dim, lib.features, lib.covered, f3d};
  }
};

template <typename T>
double cosine(std::span<const T> a, std::span<const float> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    ab += double(a[c]) * double(b[c]);
    aa += double(a[c]) * double(a[c]);
    bb += double(b[c]) * double(b[c]);
  }
  const double d = std::sqrt(aa * bb);
  return d > 0 ? ab / d : 0.0;
}

// Weighted blend alpha * f3d + (1 - alpha) * f2d, renormalized. Uncovered
// points take f3d as is; alpha of exactly 0 or 1 copies the selected input.
inline void fuse_features(std::span<const float> f2d, std::span<const float> f3d, bool covered,
                          const FusionParams& params, std::span<float> out) {
  if (f2d.size() != f3d.size() || out.size() != f3d.size()) throw Error("fuse_features: dimension mismatch");
  auto is_zero = [](std::span<const float> v) { return std::all_of(v.begin(), v.end(), [](float x) { return x == 0; }); };
  const bool z2 = !covered || is_zero(f2d);
  const bool z3 = is_zero(f3d);
  if (z2 && z3) throw Error("fuse_features: both 2D and 3D features are zero");
  if (!covered || params.alpha == 1 || (z2 && !z3)) {
    std::copy(f3d.begin(), f3d.end(), out.begin());
    return;
  }
  if (params.alpha == 0 || z3) {
    std::copy(f2d.begin(), f2d.end(), out.begin());
    return;
  }
  std::vector<double> mix(f3d.size());
  double s = 0;
  for (std::size_t c = 0; c < mix.size(); ++c) {
    mix[c] = params.alpha * f3d[c] + (1 - params.alpha) * f2d[c];
    s += mix[c] * mix[c];
  }
  s = std::sqrt(s);
  if (!(s > 0)) throw Error("fuse_features: blended feature vanished");
  for (std::size_t c = 0; c < mix.size(); ++c) out[c] = static_cast<float>(mix[c] / s);
}

struct QueryResult {
  std::string query;
  std::vector<std::string> classes;
  std::vector<std::int32_t> predicted;  // index into `classes`
  std::vector<float> scores;            // num_points * classes.size()

  std::size_t num_points() const { return predicted.size(); }
  std::span<const float> point_scores(std::size_t p) const {
    return {scores.data() + p * classes.size(), classes.size()};
  }
  bool operator==(const QueryResult&) const = default;
};

// Restricts a table to `names` in that order.
inline TextEmbeddingTable select_classes(const TextEmbeddingTable& table, const std::vector<std::string>& names) {
  TextEmbeddingTable out;
  out.dim = table.dim;
  for (const auto& n : names) {
    auto r = table.find(n);
    if (!r) throw Error("no text embedding for class '" + n + "'");
    out.names.push_back(n);
    const auto row = table.row(*r);
    out.vectors.insert(out.vectors.end(), row.begin(), row.end());
  }
  return out;
}

inline std::int32_t argmax_lowest(std::span<const float> s) {
  std::int32_t best = 0;
  for (std::size_t n = 1; n < s.size(); ++n)
    if (s[n] > s[best]) best = static_cast<std::int32_t>(n);
  return best;
}

inline QueryResult segment(const PointFeatures& feats, const TextEmbeddingTable& table, const FusionParams& params,
                           unsigned threads = 1) {
  params.validate();
  if (table.size() == 0) throw Error("segment: empty text table");
  if (table.dim != feats.dim)
    throw Error("segment: dimension mismatch, features have " + std::to_string(feats.dim) + " but text table has " +
                std::to_string(table.dim));
  QueryResult res;
  res.classes = table.names;
  const std::size_t n_cls = table.size();
  res.predicted.assign(feats.num_points, 0);
  res.scores.assign(feats.num_points * n_cls, 0.0f);
  const std::uint32_t C = feats.dim;
  constexpr std::size_t chunk = 2048;
  const std::size_t chunks = (feats.num_points + chunk - 1) / chunk;
  parallel_for(chunks, threads, [&](std::size_t ch) {
    std::vector<float> fused(C);
    const std::size_t end = std::min(feats.num_points, (ch + 1) * chunk);
    for (std::size_t p = ch * chunk; p < end; ++p) {
      const std::span<const float> f3(feats.f3d.data() + p * C, C);
      const std::span<const float> f2(feats.f2d.data() + p * C, C);
      const bool cov = feats.covered[p] != 0;
      float* sc = res.scores.data() + p * n_cls;
      if (params.mode == FusionMode::Fusion) {
        fuse_features(f2, f3, cov, params, fused);
        for (std::size_t n = 0; n < n_cls; ++n) sc[n] = static_cast<float>(cosine<float>(fused, table.row(n)));
      } else {
        for (std::size_t n = 0; n < n_cls; ++n) {
          double s = cosine<float>(f3, table.row(n));
          if (cov) s = std::max(s, cosine<float>(f2, table.row(n)));
          sc[n] = static_cast<float>(s);
        }
      }
      res.predicted[p] = argmax_lowest({sc, n_cls});
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Query parsing.

class Lexicon {
public:
  void add(const std::string& phrase, std::vector<std::string> classes) {
    const auto words = tokenize(phrase);
    if (words.empty()) throw Error("lexicon: empty phrase");
    std::string key = join(words);
    max_words_ = std::max(max_words_, words.size());
    auto& dst = entries_[key];
    for (auto& c : classes)
      if (std::find(dst.begin(), dst.end(), c) == dst.end()) dst.push_back(std::move(c));
  }

  // Every class name maps to itself.
  void add_identity(const std::vector<std::string>& class_names) {
    for (const auto& n : class_names) add(n, {n});
  }

  // Longest phrase match at each word position; matched class lists are
  // concatenated in order of appearance without duplicates.
  std::vector<std::string> parse(std::string_view text) const {
    const auto words = tokenize(text);
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < words.size()) {
      bool matched = false;
      for (std::size_t len = std::min(max_words_, words.size() - i); len >= 1; --len) {
        std::vector<std::string> span(words.begin() + static_cast<std::ptrdiff_t>(i),
                                      words.begin() + static_cast<std::ptrdiff_t>(i + len));
        auto it = entries_.find(join(span));
        if (it != entries_.end()) {
          for (const auto& c : it->second)
            if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
          i += len;
          matched = true;
          break;
        }
      }
      if (!matched) ++i;
    }
    return out;
  }

  std::size_t size() const { return entries_.size(); }

  static Lexicon from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("lexicon: expected a JSON object of phrase -> class list");
    Lexicon lx;
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!it.value().is_array()) throw Error("lexicon: value for '" + it.key() + "' is not a list");
      lx.add(it.key(), it.value().get<std::vector<std::string>>());
    }
    return lx;
  }

  static Lexicon load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open lexicon '" + path.string() + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw Error("lexicon '" + path.string() + "': " + e.what());
    }
  }

private:
  static std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isalnum(c) || c == '_' || c == '-' || c >= 0x80) {
        cur.push_back(static_cast<char>(std::tolower(c)));
      } else if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }
  static std::string join(const std::vector<std::string>& w) {
    std::string s;
    for (const auto& x : w) {
      if (!s.empty()) s.push_back(' ');
      s += x;
    }
    return s;
  }

  std::map<std::string, std::vector<std::string>> entries_;
  std::size_t max_words_ = 0;
};

inline std::vector<std::string> parse_query(std::string_view text, const Lexicon& lexicon) {
  return lexicon.parse(text);
}

// ---------------------------------------------------------------------------
// Similarity heatmaps.

// Blue (-1) to red (+1), linear in cosine.
inline Rgb similarity_color(double s) {
  const double t = std::clamp((s + 1) / 2, 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255 * t)), 0, static_cast<std::uint8_t>(std::lround(255 * (1 - t)))};
}

struct Heatmap {
  std::vector<float> similarity;
  PointCloud colored;
};

// `features` holds one row of width `dim` per cloud point.
inline Heatmap heatmap(const PointCloud& cloud, std::span<const float> features, std::uint32_t dim,
                       std::span<const float> text) {
  if (text.size() != dim || features.size() != cloud.size() * dim) throw Error("heatmap: dimension mismatch");
  Heatmap h;
  h.colored.positions = cloud.positions;
  h.colored.colors.resize(cloud.size());
  h.similarity.resize(cloud.size());
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    const double s = cosine<float>({features.data() + p * dim, dim}, text);
    h.similarity[p] = static_cast<float>(s);
    h.colored.colors[p] = similarity_color(s);
  }
  return h;
}

// Fused per-point features for every point, as used by fusion-mode scoring.
inline std::vector<float> fused_feature_matrix(const PointFeatures& feats, const FusionParams& params) {
  std::vector<float> out(feats.num_points * feats.dim);
  for (std::size_t p = 0; p < feats.num_points; ++p) {
    const std::size_t o = p * feats.dim;
    fuse_features(feats.f2d.subspan(o, feats.dim), feats.f3d.subspan(o, feats.dim), feats.covered[p] != 0, params,
                  {out.data() + o, feats.dim});
  }
  return out;
}

}  // namespace ou3d
