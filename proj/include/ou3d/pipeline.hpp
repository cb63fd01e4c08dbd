#pragma once

// End-to-end orchestration: config, per-stage seed derivation and the
// in-memory pipeline shared by the CLI, the sweep harness and the tests.

#include "ou3d/metrics.hpp"
#include "ou3d/query.hpp"

#include <chrono>
#include <json.hpp>

namespace ou3d {

enum class ProviderKind { Oracle, Files };
enum class TableSource { Synthetic, File };

struct SceneParams {
  double extent = 40;
  double density = 20;
  int vehicles = 4;
};

struct PipelineConfig {
  std::string input_cloud;  // empty: generate the synthetic scene
  std::string out_dir = "ou3d_run";
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0: OU3D_THREADS or hardware concurrency

  SceneParams scene;
  ViewParams view;
  int splat_px = 3;
  double depth_eps = kDefaultDepthEpsilon;

  ProviderKind provider = ProviderKind::Oracle;
  double oracle_noise = 0;
  std::string masks_dir;  // provider = files

  TableSource table_source = TableSource::Synthetic;
  TableMode table_mode = TableMode::Orthogonal;
  std::uint32_t feature_dim = 64;
  std::string table_path;  // table_source = file

  SbffParams sbff;
  TrainConfig train;
  FusionParams fusion;

  std::string query;  // empty: every class of the table
  std::string lexicon_path;

  unsigned resolved_threads() const { return threads ? threads : default_threads(); }

  // Stage seeds, all derived from `seed`.
  std::uint64_t scene_seed() const { return derive_seed(seed, 6); }
  std::uint64_t view_seed() const { return derive_seed(seed, 1); }
  std::uint64_t oracle_seed() const { return derive_seed(seed, 2); }
  std::uint64_t sbff_seed() const { return derive_seed(seed, 3); }
  std::uint64_t train_seed() const { return derive_seed(seed, 4); }
  std::uint64_t table_seed() const { return derive_seed(seed, 5); }

  ViewParams seeded_view() const {
    ViewParams v = view;
    v.seed = view_seed();
    return v;
  }
  SbffParams seeded_sbff() const {
    SbffParams s = sbff;
    s.seed = sbff_seed();
    return s;
  }
  TrainConfig seeded_train() const {
    TrainConfig t = train;
    t.seed = train_seed();
    return t;
  }

  void validate() const {
    view.validate();
    train.validate();
    fusion.validate();
    if (splat_px < 1 || splat_px % 2 == 0) throw Error("config: splat must be a positive odd integer");
    if (!(depth_eps >= 0)) throw Error("config: depth epsilon must be non-negative");
    if (sbff.k < 1) throw Error("config: sbff k must be >= 1");
    if (oracle_noise < 0) throw Error("config: oracle noise must be non-negative");
    if (feature_dim == 0) throw Error("config: feature dimension must be positive");
    if (provider == ProviderKind::Files && masks_dir.empty()) throw Error("config: provider 'files' needs masks_dir");
    if (table_source == TableSource::File && table_path.empty()) throw Error("config: table source 'file' needs table_path");
  }
};

// ---------------------------------------------------------------------------
// JSON config: every field optional; absent fields keep their defaults.

namespace config_detail {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace config_detail

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  using config_detail::take;
  PipelineConfig c;
  try {
    take(j, "input_cloud", c.input_cloud);
    take(j, "out_dir", c.out_dir);
    take(j, "seed", c.seed);
    take(j, "threads", c.threads);
    if (j.contains("scene")) {
      const auto& s = j["scene"];
      take(s, "extent", c.scene.extent);
      take(s, "density", c.scene.density);
      take(s, "vehicles", c.scene.vehicles);
    }
    if (j.contains("view")) {
      const auto& v = j["view"];
      take(v, "K", c.view.K);
      take(v, "A_deg", c.view.A_deg);
      take(v, "R", c.view.R);
      take(v, "height", c.view.height);
      take(v, "width", c.view.width);
      take(v, "splat_px", c.splat_px);
      take(v, "depth_eps", c.depth_eps);
    }
    if (j.contains("provider")) {
      const auto& p = j["provider"];
      std::string kind = "oracle";
      take(p, "kind", kind);
      if (kind != "oracle" && kind != "files") throw Error("config: provider.kind must be 'oracle' or 'files'");
      c.provider = kind == "oracle" ? ProviderKind::Oracle : ProviderKind::Files;
      take(p, "noise", c.oracle_noise);
      take(p, "masks_dir", c.masks_dir);
    }
    if (j.contains("text_table")) {
      const auto& t = j["text_table"];
      std::string source = "synthetic", mode = "orthogonal";
      take(t, "source", source);
      take(t, "mode", mode);
      if (source != "synthetic" && source != "file") throw Error("config: text_table.source must be 'synthetic' or 'file'");
      if (mode != "orthogonal" && mode != "random") throw Error("config: text_table.mode must be 'orthogonal' or 'random'");
      c.table_source = source == "synthetic" ? TableSource::Synthetic : TableSource::File;
      c.table_mode = mode == "orthogonal" ? TableMode::Orthogonal : TableMode::SeededRandom;
      take(t, "dim", c.feature_dim);
      take(t, "path", c.table_path);
    }
    if (j.contains("sbff")) {
      take(j["sbff"], "enabled", c.sbff.enabled);
      take(j["sbff"], "k", c.sbff.k);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      take(t, "epochs", c.train.epochs);
      take(t, "learning_rate", c.train.learning_rate);
      take(t, "final_lr_ratio", c.train.final_lr_ratio);
      take(t, "batch_size", c.train.batch_size);
      take(t, "beta1", c.train.beta1);
      take(t, "beta2", c.train.beta2);
      take(t, "voxel_size", c.train.voxel_size);
      take(t, "levels", c.train.levels);
      take(t, "level_scale", c.train.level_scale);
      take(t, "init_sigma", c.train.init_sigma);
    }
    if (j.contains("fusion")) {
      take(j["fusion"], "alpha", c.fusion.alpha);
      std::string mode = "fusion";
      take(j["fusion"], "mode", mode);
      if (mode != "fusion" && mode != "ensemble") throw Error("config: fusion.mode must be 'fusion' or 'ensemble'");
      c.fusion.mode = mode == "fusion" ? FusionMode::Fusion : FusionMode::Ensemble;
    }
    take(j, "query", c.query);
    take(j, "lexicon", c.lexicon_path);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  return c;
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  return {
      {"input_cloud", c.input_cloud},
      {"out_dir", c.out_dir},
      {"seed", c.seed},
      {"threads", c.threads},
      {"scene", {{"extent", c.scene.extent}, {"density", c.scene.density}, {"vehicles", c.scene.vehicles}}},
      {"view",
       {{"K", c.view.K},
        {"A_deg", c.view.A_deg},
        {"R", c.view.R},
        {"height", c.view.height},
        {"width", c.view.width},
        {"splat_px", c.splat_px},
        {"depth_eps", c.depth_eps}}},
      {"provider",
       {{"kind", c.provider == ProviderKind::Oracle ? "oracle" : "files"},
        {"noise", c.oracle_noise},
        {"masks_dir", c.masks_dir}}},
      {"text_table",
       {{"source", c.table_source == TableSource::Synthetic ? "synthetic" : "file"},
        {"mode", c.table_mode == TableMode::Orthogonal ? "orthogonal" : "random"},
        {"dim", c.feature_dim},
        {"path", c.table_path}}},
      {"sbff", {{"enabled", c.sbff.enabled}, {"k", c.sbff.k}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"learning_rate", c.train.learning_rate},
        {"final_lr_ratio", c.train.final_lr_ratio},
        {"batch_size", c.train.batch_size},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"voxel_size", c.train.voxel_size},
        {"levels", c.train.levels},
        {"level_scale", c.train.level_scale},
        {"init_sigma", c.train.init_sigma}}},
      {"fusion", {{"alpha", c.fusion.alpha}, {"mode", c.fusion.mode == FusionMode::Fusion ? "fusion" : "ensemble"}}},
      {"query", c.query},
      {"lexicon", c.lexicon_path},
  };
}

// ---------------------------------------------------------------------------
// Stage helpers.

inline SceneSpec scene_spec_for(const PipelineConfig& c) {
  return urban_scene_spec(c.scene_seed(), c.scene.density, c.scene.extent, c.scene.vehicles);
}

inline TextEmbeddingTable text_table_for(const PipelineConfig& c, const std::vector<std::string>& class_names) {
  if (c.table_source == TableSource::File) return read_text_table(c.table_path);
  return synthetic_text_table(class_names, c.feature_dim, c.table_mode, c.table_seed());
}

inline std::vector<MaskSet> oracle_mask_sets(const PointCloud& cloud, const std::vector<RenderedView>& views,
                                             const TextEmbeddingTable& table, double noise, std::uint64_t seed,
                                             unsigned threads) {
  std::vector<MaskSet> out(views.size());
  parallel_for(views.size(), threads, [&](std::size_t v) { out[v] = oracle_masks(views[v], cloud, table, noise, seed); });
  return out;
}

// Resolves the query to a class list: lexicon phrases first, then exact
// table names; an empty query selects every table class.
inline std::vector<std::string> resolve_query(const PipelineConfig& c, const TextEmbeddingTable& table) {
  if (c.query.empty()) return table.names;
  Lexicon lx = c.lexicon_path.empty() ? Lexicon{} : Lexicon::load(c.lexicon_path);
  lx.add_identity(table.names);
  auto classes = lx.parse(c.query);
  if (classes.empty()) throw Error("query '" + c.query + "' matched no known class");
  return classes;
}

// The four evaluation footings: 2D features on visible points, 3D features
// on all points, and the blend on visible / all points.
enum class Variant { TwoDOnly, ThreeDOnly, FusedVisible, FusedAll };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::TwoDOnly: return "2d_only";
    case Variant::ThreeDOnly: return "3d_only";
    case Variant::FusedVisible: return "fused_visible";
    case Variant::FusedAll: return "fused_all";
  }
  return "?";
}

struct VariantReport {
  Variant variant;
  Evaluation eval;
};

// Products of every stage that consumes randomness: views, lifting and
// distillation. Inference and scoring are cheap and deterministic on top.
struct Upstream {
  std::vector<CameraRig> rigs;
  Coverage coverage;
  FeatureLibrary teacher;  // balanced library, distillation target
  FeatureLibrary library;  // every valid projection, inference F_2D
  LiftStats lift_stats;
  std::vector<double> loss_curve;
  std::vector<float> f3d;
  double seconds = 0;
};

struct PipelineResult {
  Upstream up;
  QueryResult result;  // configured fusion params, all points
  Evaluation eval_all;
  Evaluation eval_covered;
  std::vector<VariantReport> variants;
  std::vector<std::string> eval_classes;
  double wall_seconds = 0;
};

// Scores predictions against the cloud's labels over the cloud's classes
// followed by any queried class the cloud does not have.
inline std::vector<std::string> evaluation_classes(const PointCloud& cloud, const std::vector<std::string>& queried) {
  auto names = cloud.class_names;
  for (const auto& q : queried)
    if (std::find(names.begin(), names.end(), q) == names.end()) names.push_back(q);
  return names;
}

inline Evaluation evaluate_result(const QueryResult& r, const PointCloud& cloud,
                                  std::span<const std::uint8_t> filter = {}) {
  if (!cloud.has_labels()) throw Error("evaluate: cloud has no ground-truth labels");
  const auto names = evaluation_classes(cloud, r.classes);
  std::vector<std::int32_t> map(r.classes.size());
  for (std::size_t n = 0; n < r.classes.size(); ++n)
    map[n] = static_cast<std::int32_t>(std::find(names.begin(), names.end(), r.classes[n]) - names.begin());
  std::vector<std::int32_t> pred(r.predicted.size());
  for (std::size_t p = 0; p < pred.size(); ++p) pred[p] = map[static_cast<std::size_t>(r.predicted[p])];
  return evaluate(pred, cloud.labels, names.size(), filter);
}

inline std::vector<VariantReport> evaluate_variants(const PointFeatures& feats, const TextEmbeddingTable& table,
                                                    const PointCloud& cloud, std::span<const std::uint8_t> visible,
                                                    double alpha, unsigned threads) {
  std::vector<VariantReport> out;
  const auto two_d = segment(feats, table, {0.0, FusionMode::Fusion}, threads);
  out.push_back({Variant::TwoDOnly, evaluate_result(two_d, cloud, feats.covered)});
  const auto three_d = segment(feats, table, {1.0, FusionMode::Fusion}, threads);
  out.push_back({Variant::ThreeDOnly, evaluate_result(three_d, cloud)});
  const auto fused = segment(feats, table, {alpha, FusionMode::Fusion}, threads);
  out.push_back({Variant::FusedVisible, evaluate_result(fused, cloud, visible)});
  out.push_back({Variant::FusedAll, evaluate_result(fused, cloud)});
  return out;
}

// Rendering, feature extraction (oracle unless `external_masks` is given),
// lifting and distillation.
inline Upstream run_upstream(const PointCloud& cloud, const TextEmbeddingTable& table, const PipelineConfig& cfg,
                             const std::vector<MaskSet>* external_masks = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const unsigned threads = cfg.resolved_threads();
  Upstream up;
  up.rigs = all_rigs(bounding_box(cloud), cfg.seeded_view());
  const auto views = render_views(cloud, up.rigs, {cfg.splat_px, kZNear}, threads);
  up.coverage = coverage_ratio(cloud, views, up.rigs, cfg.depth_eps, threads);

  const auto masks =
      external_masks ? *external_masks : oracle_mask_sets(cloud, views, table, cfg.oracle_noise, cfg.oracle_seed(), threads);
  up.teacher = lift_and_fuse(cloud, views, up.rigs, masks, {cfg.depth_eps, cfg.seeded_sbff()}, threads,
                             &up.lift_stats, &up.library);

  const auto tcfg = cfg.seeded_train();
  auto field = make_field<float>(cloud, up.teacher.dim, tcfg);
  up.loss_curve = train(field, cloud, up.teacher, tcfg, threads).loss_curve;
  up.f3d = field_features(field, std::span<const Vec3>(cloud.positions), nullptr, threads);
  up.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return up;
}

inline PipelineResult score_upstream(Upstream up, const PointCloud& cloud, const TextEmbeddingTable& full_table,
                                     const PipelineConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const unsigned threads = cfg.resolved_threads();
  PipelineResult res;
  res.up = std::move(up);
  const auto table = select_classes(full_table, resolve_query(cfg, full_table));
  const auto feats = PointFeatures::from(res.up.library, res.up.f3d);
  res.result = segment(feats, table, cfg.fusion, threads);
  res.result.query = cfg.query;
  if (cloud.has_labels()) {
    res.eval_classes = evaluation_classes(cloud, table.names);
    res.eval_all = evaluate_result(res.result, cloud);
    res.eval_covered = evaluate_result(res.result, cloud, res.up.coverage.seen);
    res.variants = evaluate_variants(feats, table, cloud, res.up.coverage.seen, cfg.fusion.alpha, threads);
  }
  res.wall_seconds = res.up.seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

inline PipelineResult run_pipeline(const PointCloud& cloud, const TextEmbeddingTable& table,
                                   const PipelineConfig& cfg, const std::vector<MaskSet>* external_masks = nullptr) {
  return score_upstream(run_upstream(cloud, table, cfg, external_masks), cloud, table, cfg);
}

inline nlohmann::json evaluation_json(const Evaluation& e, const std::vector<std::string>& class_names) {
  auto num = [](double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); };
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t c = 0; c < e.iou.size(); ++c)
    per[c < class_names.size() ? class_names[c] : std::to_string(c)] = num(e.iou[c]);
  return {{"miou", num(e.miou)}, {"macc", num(e.macc)}, {"oa", num(e.oa)}, {"per_class_iou", per},
          {"evaluated_points", e.evaluated}};
}

}  // namespace ou3d
