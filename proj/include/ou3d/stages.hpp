#pragma once

// On-disk pipeline stages. Each stage writes into <out>/<stage>-<hash>, where
// the hash covers every config field the stage and its upstream stages read,
// so reruns with unchanged inputs land in the same directory and changed
// inputs never overwrite older results.
//
//   scene    cloud.ply
//   render   rigs.json, views/view_<id>.{png,depth,idx}, coverage.json, visible.bin
//   extract  masks/view_<id>.ou3d, text_table.ou3t
//   lift     teacher.ou3f (balanced), library.ou3f (all projections), lift.json
//   distill  field.ou3v, loss.csv
//   segment  predictions.bin, result.json, heatmap.ply
//   eval     metrics.json
//
// Every stage directory also holds config.json, the fully resolved config.

#include "ou3d/pipeline.hpp"
#include "ou3d/view_io.hpp"

#include <cinttypes>
#include <fstream>

namespace ou3d {

enum class Stage { Scene, Render, Extract, Lift, Distill, Segment, Eval };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Scene: return "scene";
    case Stage::Render: return "render";
    case Stage::Extract: return "extract";
    case Stage::Lift: return "lift";
    case Stage::Distill: return "distill";
    case Stage::Segment: return "segment";
    case Stage::Eval: return "eval";
  }
  return "?";
}

// The config fields a stage reads, including those of its upstream stages.
inline nlohmann::json stage_inputs(const PipelineConfig& c, Stage s) {
  const auto full = config_to_json(c);
  nlohmann::json j;
  j["seed"] = c.seed;
  j["input_cloud"] = c.input_cloud;
  if (c.input_cloud.empty()) j["scene"] = full["scene"];
  if (s == Stage::Scene) return j;
  j["view"] = full["view"];
  if (s == Stage::Render) return j;
  j["provider"] = full["provider"];
  j["text_table"] = full["text_table"];
  if (s == Stage::Extract) return j;
  j["sbff"] = full["sbff"];
  if (s == Stage::Lift) return j;
  j["train"] = full["train"];
  if (s == Stage::Distill) return j;
  j["fusion"] = full["fusion"];
  j["query"] = c.query;
  j["lexicon"] = c.lexicon_path;
  return j;
}

inline std::string stage_hash(const PipelineConfig& c, Stage s) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a(stage_inputs(c, s).dump()));
  return std::string(buf, 12);
}

inline std::filesystem::path stage_dir(const PipelineConfig& c, Stage s) {
  return std::filesystem::path(c.out_dir) / (std::string(stage_name(s)) + "-" + stage_hash(c, s));
}

namespace stage_detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  binio::Writer w;
  w.bytes(text.data(), text.size());
  w.save(path);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  const auto buf = binio::slurp(path);
  try {
    return nlohmann::json::parse(buf.begin(), buf.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error("'" + path.string() + "': " + e.what());
  }
}

// Fails with a pointer to the producing subcommand when an input is absent.
inline std::filesystem::path require(const std::filesystem::path& path, const char* producer) {
  if (!std::filesystem::exists(path))
    throw Error("missing input '" + path.string() + "'; run `" + producer + "` with the same config first");
  return path;
}

inline std::filesystem::path begin(const PipelineConfig& c, Stage s) {
  const auto dir = stage_dir(c, s);
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", config_to_json(c).dump(2) + "\n");
  return dir;
}

inline void write_bitmap(const std::filesystem::path& path, const std::vector<std::uint8_t>& bits) {
  binio::Writer w;
  w.put<std::uint64_t>(bits.size());
  w.put_span<std::uint8_t>(bits);
  w.save(path);
}

inline std::vector<std::uint8_t> read_bitmap(const std::filesystem::path& path) {
  auto r = binio::Reader::open(path);
  const auto n = r.get<std::uint64_t>("count");
  r.expect_payload(n, "bitmap");
  std::vector<std::uint8_t> out(n);
  r.get_into(std::span<std::uint8_t>(out), "bitmap");
  return out;
}

}  // namespace stage_detail

// ---------------------------------------------------------------------------
// Predictions: "OU3P", u32 version=1, u64 N, u32 class count, then per
// class a u16 name length and the name, then N int32 class indices.

inline void write_predictions(const std::filesystem::path& path, const QueryResult& r) {
  binio::Writer w;
  w.magic("OU3P");
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(r.predicted.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(r.classes.size()));
  for (const auto& n : r.classes) {
    if (n.size() > 0xFFFF) throw Error("write_predictions: class name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(n.size()));
    w.bytes(n.data(), n.size());
  }
  w.put_span<std::int32_t>(r.predicted);
  w.save(path);
}

inline QueryResult read_predictions(const std::filesystem::path& path) {
  auto r = binio::Reader::open(path);
  r.expect_magic("OU3P");
  if (const auto v = r.get<std::uint32_t>("version"); v != 1)
    throw Error(r.name() + ": version mismatch, expected 1 found " + std::to_string(v));
  QueryResult q;
  const auto n = r.get<std::uint64_t>("N");
  const auto k = r.get<std::uint32_t>("class count");
  for (std::uint32_t c = 0; c < k; ++c) q.classes.push_back(r.get_string(r.get<std::uint16_t>("name length"), "name"));
  r.expect_payload(n * 4, "predictions");
  q.predicted.resize(n);
  r.get_into(std::span<std::int32_t>(q.predicted), "predictions");
  for (auto p : q.predicted)
    if (p < 0 || std::uint32_t(p) >= k) throw Error(r.name() + ": prediction outside the class list");
  return q;
}

// ---------------------------------------------------------------------------
// Stage runners. Each reads its inputs from upstream stage directories of the
// same config and returns its own directory.

inline PointCloud load_stage_cloud(const PipelineConfig& c) {
  return load_cloud(stage_detail::require(stage_dir(c, Stage::Scene) / "cloud.ply", "gen-scene"));
}

inline std::filesystem::path run_scene_stage(const PipelineConfig& c) {
  c.validate();
  const auto dir = stage_detail::begin(c, Stage::Scene);
  const PointCloud cloud = c.input_cloud.empty() ? generate_scene(scene_spec_for(c)) : load_cloud(c.input_cloud);
  write_cloud(dir / "cloud.ply", cloud, PlyFormat::BinaryLittleEndian);
  return dir;
}

inline std::vector<CameraRig> load_stage_rigs(const PipelineConfig& c) {
  return rigs_from_json(stage_detail::read_json(stage_detail::require(stage_dir(c, Stage::Render) / "rigs.json", "render")));
}

inline std::vector<RenderedView> load_stage_views(const PipelineConfig& c, const std::vector<CameraRig>& rigs) {
  const auto dir = stage_dir(c, Stage::Render) / "views";
  std::vector<RenderedView> views(rigs.size());
  parallel_for(rigs.size(), c.resolved_threads(), [&](std::size_t v) {
    stage_detail::require(view_path(dir, rigs[v].id, ".png"), "render");
    views[v] = read_view_bundle(dir, rigs[v].id);
  });
  return views;
}

inline std::vector<std::uint8_t> load_stage_visible(const PipelineConfig& c) {
  return stage_detail::read_bitmap(stage_detail::require(stage_dir(c, Stage::Render) / "visible.bin", "render"));
}

inline std::filesystem::path run_render_stage(const PipelineConfig& c) {
  c.validate();
  const auto cloud = load_stage_cloud(c);
  const unsigned threads = c.resolved_threads();
  const auto dir = stage_detail::begin(c, Stage::Render);
  const auto rigs = all_rigs(bounding_box(cloud), c.seeded_view());
  const auto views = render_views(cloud, rigs, {c.splat_px, kZNear}, threads);
  const auto cov = coverage_ratio(cloud, views, rigs, c.depth_eps, threads);
  stage_detail::write_text(dir / "rigs.json", rigs_to_json(rigs).dump(1) + "\n");
  parallel_for(views.size(), threads, [&](std::size_t v) { write_view_bundle(dir / "views", views[v]); });
  stage_detail::write_text(dir / "coverage.json",
                           nlohmann::json{{"S_R", cov.ratio}, {"seen", cov.count}, {"points", cloud.size()}}.dump(2) + "\n");
  stage_detail::write_bitmap(dir / "visible.bin", cov.seen);
  return dir;
}

inline TextEmbeddingTable load_stage_table(const PipelineConfig& c) {
  return read_text_table(stage_detail::require(stage_dir(c, Stage::Extract) / "text_table.ou3t", "extract"));
}

inline std::vector<MaskSet> load_stage_masks(const PipelineConfig& c, const std::vector<CameraRig>& rigs) {
  const auto dir = stage_dir(c, Stage::Extract) / "masks";
  std::vector<MaskSet> masks(rigs.size());
  for (std::size_t v = 0; v < rigs.size(); ++v)
    masks[v] = read_maskset(stage_detail::require(view_path(dir, rigs[v].id, ".ou3d"), "extract"), rigs[v].id);
  return masks;
}

inline std::filesystem::path run_extract_stage(const PipelineConfig& c) {
  c.validate();
  const auto cloud = load_stage_cloud(c);
  const auto rigs = load_stage_rigs(c);
  const auto dir = stage_detail::begin(c, Stage::Extract);
  TextEmbeddingTable table;
  if (c.table_source == TableSource::File) {
    table = read_text_table(c.table_path);
  } else {
    if (cloud.class_names.empty())
      throw Error("a synthetic text table needs class names from the cloud; supply text_table.path instead");
    table = text_table_for(c, cloud.class_names);
  }
  write_text_table(dir / "text_table.ou3t", table);
  std::filesystem::create_directories(dir / "masks");
  const unsigned threads = c.resolved_threads();
  if (c.provider == ProviderKind::Oracle) {
    const auto views = load_stage_views(c, rigs);
    const auto masks = oracle_mask_sets(cloud, views, table, c.oracle_noise, c.oracle_seed(), threads);
    for (const auto& m : masks) write_maskset(view_path(dir / "masks", m.view_id, ".ou3d"), m);
  } else {
    for (const auto& rig : rigs) {
      const auto src = view_path(c.masks_dir, rig.id, ".ou3d");
      if (!std::filesystem::exists(src)) throw Error("provider files: missing mask set '" + src.string() + "'");
      const auto m = read_maskset(src, rig.id);
      if (m.height != rig.height || m.width != rig.width)
        throw Error("provider files: '" + src.string() + "' size does not match view " + std::to_string(rig.id));
      if (m.dim != table.dim)
        throw Error("provider files: '" + src.string() + "' has C=" + std::to_string(m.dim) + " but the text table has " +
                    std::to_string(table.dim));
      write_maskset(view_path(dir / "masks", rig.id, ".ou3d"), m);
    }
  }
  return dir;
}

inline FeatureLibrary load_stage_library(const PipelineConfig& c, bool teacher) {
  return read_library(stage_detail::require(stage_dir(c, Stage::Lift) / (teacher ? "teacher.ou3f" : "library.ou3f"), "lift"));
}

inline std::filesystem::path run_lift_stage(const PipelineConfig& c) {
  c.validate();
  const auto cloud = load_stage_cloud(c);
  const auto rigs = load_stage_rigs(c);
  const auto views = load_stage_views(c, rigs);
  const auto masks = load_stage_masks(c, rigs);
  const auto dir = stage_detail::begin(c, Stage::Lift);
  LiftStats stats;
  FeatureLibrary all;
  const auto teacher =
      lift_and_fuse(cloud, views, rigs, masks, {c.depth_eps, c.seeded_sbff()}, c.resolved_threads(), &stats, &all);
  write_library(dir / "teacher.ou3f", teacher);
  write_library(dir / "library.ou3f", all);
  stage_detail::write_text(dir / "lift.json", nlohmann::json{{"covered_teacher", teacher.covered_count()},
                                                             {"covered_library", all.covered_count()},
                                                             {"projected", stats.projected},
                                                             {"retained", stats.retained},
                                                             {"tau", stats.tau}}
                                                      .dump(1) +
                                                  "\n");
  return dir;
}

inline std::optional<std::filesystem::path> stage_checkpoint(const PipelineConfig& c) {
  const auto p = stage_dir(c, Stage::Distill) / "field.ou3v";
  if (!std::filesystem::exists(p)) return std::nullopt;
  return p;
}

inline std::filesystem::path run_distill_stage(const PipelineConfig& c) {
  c.validate();
  const auto cloud = load_stage_cloud(c);
  const auto teacher = load_stage_library(c, true);
  const auto dir = stage_detail::begin(c, Stage::Distill);
  const auto tcfg = c.seeded_train();
  auto field = make_field<float>(cloud, teacher.dim, tcfg);
  const auto res = train(field, cloud, teacher, tcfg, c.resolved_threads());
  write_field(dir / "field.ou3v", field);
  write_loss_curve(dir / "loss.csv", res.loss_curve);
  return dir;
}

// 3D features for every point from the distill checkpoint, or zero rows when
// the run does not need them (fusion with alpha = 0 and full 2D coverage).
inline std::vector<float> stage_f3d(const PipelineConfig& c, const PointCloud& cloud, const FeatureLibrary& lib) {
  if (auto ck = stage_checkpoint(c)) {
    const auto field = read_field<float>(*ck);
    return field_features(field, std::span<const Vec3>(cloud.positions), nullptr, c.resolved_threads());
  }
  const bool needs_3d =
      c.fusion.mode == FusionMode::Ensemble || c.fusion.alpha > 0 || lib.covered_count() != lib.num_points;
  if (needs_3d)
    throw Error("missing checkpoint '" + (stage_dir(c, Stage::Distill) / "field.ou3v").string() +
                "': this query needs 3D features; run `distill` with the same config first");
  return std::vector<float>(lib.num_points * lib.dim, 0.0f);
}

inline std::filesystem::path run_segment_stage(const PipelineConfig& c) {
  c.validate();
  const auto cloud = load_stage_cloud(c);
  const auto full_table = load_stage_table(c);
  const auto lib = load_stage_library(c, false);
  const auto f3d = stage_f3d(c, cloud, lib);
  const auto table = select_classes(full_table, resolve_query(c, full_table));
  const auto feats = PointFeatures::from(lib, f3d);
  auto result = segment(feats, table, c.fusion, c.resolved_threads());
  result.query = c.query;

  const auto dir = stage_detail::begin(c, Stage::Segment);
  write_predictions(dir / "predictions.bin", result);
  nlohmann::json out{{"query", c.query}, {"classes", result.classes}};
  if (cloud.has_labels()) {
    const auto ev = evaluate_result(result, cloud);
    const auto ej = evaluation_json(ev, evaluation_classes(cloud, result.classes));
    out["per_class_iou"] = ej["per_class_iou"];
    out["miou"] = ej["miou"];
    out["oa"] = ej["oa"];
  }
  stage_detail::write_text(dir / "result.json", out.dump(2) + "\n");
  // Heatmap of the first queried class against the features used for scoring.
  const auto fused = c.fusion.mode == FusionMode::Fusion ? fused_feature_matrix(feats, c.fusion) : f3d;
  const auto hm = heatmap(cloud, fused, lib.dim, table.row(0));
  write_cloud(dir / "heatmap.ply", hm.colored, PlyFormat::BinaryLittleEndian);
  return dir;
}

inline nlohmann::json run_eval_stage_json(const PipelineConfig& c) {
  const auto cloud = load_stage_cloud(c);
  if (!cloud.has_labels()) throw Error("eval: the cloud has no ground-truth labels");
  const auto result = read_predictions(stage_detail::require(stage_dir(c, Stage::Segment) / "predictions.bin", "segment"));
  if (result.predicted.size() != cloud.size()) throw Error("eval: prediction count does not match the cloud");
  const auto visible = load_stage_visible(c);
  const auto names = evaluation_classes(cloud, result.classes);
  nlohmann::json out{{"query", c.query}, {"classes", result.classes}};
  const auto all = evaluation_json(evaluate_result(result, cloud), names);
  out["miou"] = all["miou"];
  out["macc"] = all["macc"];
  out["oa"] = all["oa"];
  out["per_class_iou"] = all["per_class_iou"];
  out["all"] = all;
  out["covered"] = evaluation_json(evaluate_result(result, cloud, visible), names);
  const auto cov = stage_detail::read_json(stage_dir(c, Stage::Render) / "coverage.json");
  out["S_R"] = cov.at("S_R");
  if (stage_checkpoint(c)) {
    const auto full_table = load_stage_table(c);
    const auto table = select_classes(full_table, resolve_query(c, full_table));
    const auto lib = load_stage_library(c, false);
    const auto f3d = stage_f3d(c, cloud, lib);
    const auto feats = PointFeatures::from(lib, f3d);
    nlohmann::json variants = nlohmann::json::object();
    for (const auto& v : evaluate_variants(feats, table, cloud, visible, c.fusion.alpha, c.resolved_threads()))
      variants[variant_name(v.variant)] = evaluation_json(v.eval, names);
    out["variants"] = variants;
  }
  return out;
}

inline std::filesystem::path run_eval_stage(const PipelineConfig& c) {
  c.validate();
  const auto metrics = run_eval_stage_json(c);
  const auto dir = stage_detail::begin(c, Stage::Eval);
  stage_detail::write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  return dir;
}

}  // namespace ou3d
