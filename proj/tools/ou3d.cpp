// ou3d: command-line driver for the open-vocabulary urban segmentation
// pipeline. Run `ou3d --help` for the subcommands.

#include "ou3d/ou3d.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using ou3d::PipelineConfig;

struct Overrides {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<double> alpha;
  std::optional<int> K;
  std::optional<double> A;
  std::optional<double> R;
  std::optional<bool> sbff;
  std::optional<int> splat;
  std::optional<std::string> query;
  std::optional<double> noise;
};

void add_common_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "Run directory (overrides out_dir)");
  cmd->add_option("--seed", o.seed, "Base seed");
  cmd->add_option("--threads", o.threads, "Worker threads (default: OU3D_THREADS or all cores)");
  cmd->add_option("--alpha", o.alpha, "3D feature weight in [0,1]");
  cmd->add_option("--K", o.K, "Local view grid granularity");
  cmd->add_option("--A", o.A, "Orbit angular interval in degrees");
  cmd->add_option("--R", o.R, "Local orbit radius divisor");
  cmd->add_option("--sbff", o.sbff, "Sample-balanced fusion on/off");
  cmd->add_option("--splat", o.splat, "Splat size in pixels (odd)");
  cmd->add_option("--query", o.query, "Free-text query; empty selects every class");
  cmd->add_option("--noise", o.noise, "Oracle feature noise");
}

PipelineConfig resolve(const Overrides& o) {
  PipelineConfig c;
  nlohmann::json j = nlohmann::json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw ou3d::Error("cannot open config '" + o.config_path + "'");
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ou3d::Error("config '" + o.config_path + "': " + e.what());
    }
    c = ou3d::config_from_json(j);
  }
  if (!o.out.empty()) c.out_dir = o.out;
  if (o.seed) c.seed = *o.seed;
  if (o.threads) c.threads = *o.threads;
  if (o.alpha) c.fusion.alpha = *o.alpha;
  if (o.K) c.view.K = *o.K;
  if (o.A) c.view.A_deg = *o.A;
  if (o.R) c.view.R = *o.R;
  if (o.sbff) c.sbff.enabled = *o.sbff;
  if (o.splat) c.splat_px = *o.splat;
  if (o.query) c.query = *o.query;
  if (o.noise) c.oracle_noise = *o.noise;
  c.validate();
  return c;
}

nlohmann::json sweep_grid_json(const Overrides& o) {
  if (o.config_path.empty()) return nlohmann::json::object();
  std::ifstream in(o.config_path);
  const auto j = nlohmann::json::parse(in);
  return j.contains("sweep") ? j["sweep"] : nlohmann::json::object();
}

void emit(const std::string& stage, const std::filesystem::path& dir, nlohmann::json extra = nlohmann::json::object()) {
  extra["stage"] = stage;
  extra["dir"] = dir.string();
  std::cout << extra.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary 3D segmentation of urban point clouds"};
  app.require_subcommand(1);
  Overrides o;
  unsigned concurrency = 1;
  std::string current = "ou3d";

  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"gen-scene", "Generate the synthetic scene (or import input_cloud)"},
      {"render", "Build camera rigs and render views"},
      {"extract", "Produce per-view mask features and the text table"},
      {"lift", "Back-project mask features and fuse them per point"},
      {"distill", "Train the 3D feature field against the 2D library"},
      {"segment", "Label every point for a query"},
      {"eval", "Score predictions against ground truth"},
      {"sweep", "Run an ablation grid"},
      {"end2end", "Run every stage in order"},
  };
  std::map<std::string, CLI::App*> cmds;
  for (const auto& s : subs) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common_flags(cmd, o);
    cmds[s.name] = cmd;
  }
  cmds["sweep"]->add_option("--concurrency", concurrency, "Grid cells run at once")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (const auto& [name, cmd] : cmds)
      if (cmd->parsed()) current = name;
    const auto cfg = resolve(o);

    if (current == "gen-scene") {
      emit(current, ou3d::run_scene_stage(cfg));
    } else if (current == "render") {
      emit(current, ou3d::run_render_stage(cfg));
    } else if (current == "extract") {
      emit(current, ou3d::run_extract_stage(cfg));
    } else if (current == "lift") {
      emit(current, ou3d::run_lift_stage(cfg));
    } else if (current == "distill") {
      emit(current, ou3d::run_distill_stage(cfg));
    } else if (current == "segment") {
      const auto dir = ou3d::run_segment_stage(cfg);
      std::ifstream in(dir / "result.json");
      emit(current, dir, {{"result", nlohmann::json::parse(in)}});
    } else if (current == "eval") {
      const auto dir = ou3d::run_eval_stage(cfg);
      std::ifstream in(dir / "metrics.json");
      const auto m = nlohmann::json::parse(in);
      emit(current, dir, {{"miou", m["miou"]}, {"oa", m["oa"]}});
    } else if (current == "end2end") {
      ou3d::run_scene_stage(cfg);
      ou3d::run_render_stage(cfg);
      ou3d::run_extract_stage(cfg);
      ou3d::run_lift_stage(cfg);
      ou3d::run_distill_stage(cfg);
      ou3d::run_segment_stage(cfg);
      const auto dir = ou3d::run_eval_stage(cfg);
      std::filesystem::copy_file(dir / "metrics.json", std::filesystem::path(cfg.out_dir) / "metrics.json",
                                 std::filesystem::copy_options::overwrite_existing);
      std::ifstream in(dir / "metrics.json");
      const auto m = nlohmann::json::parse(in);
      emit(current, dir, {{"miou", m["miou"]}, {"oa", m["oa"]}, {"S_R", m["S_R"]}});
    } else if (current == "sweep") {
      const auto grid = ou3d::SweepGrid::from_json(sweep_grid_json(o));
      const ou3d::PointCloud cloud =
          cfg.input_cloud.empty() ? ou3d::generate_scene(ou3d::scene_spec_for(cfg)) : ou3d::load_cloud(cfg.input_cloud);
      const auto table = ou3d::text_table_for(cfg, cloud.class_names);
      auto key = ou3d::config_to_json(cfg);
      key.erase("out_dir");
      key.erase("threads");
      key["sweep"] = sweep_grid_json(o);
      char hash[17];
      std::snprintf(hash, sizeof hash, "%016" PRIx64, ou3d::fnv1a(key.dump()));
      const auto dir = std::filesystem::path(cfg.out_dir) / ("sweep-" + std::string(hash, 12));
      std::filesystem::create_directories(dir);
      {
        std::ofstream cfg_out(dir / "config.json");
        cfg_out << key.dump(2) << '\n';
      }
      const auto outcome = ou3d::run_sweep(cloud, table, cfg, grid, {dir / "sweep.csv", dir / "sweep.json", concurrency});
      emit(current, dir,
           {{"rows", outcome.rows.size()}, {"resumed", outcome.resumed}, {"failures", outcome.failures.size()}});
      if (!outcome.failures.empty()) return 3;
    }
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}, {"stage", current}}.dump() << std::endl;
    return 2;
  }
  return 0;
}
