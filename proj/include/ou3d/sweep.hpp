#pragma once

// Ablation grid over view, sampling and fusion parameters with a resumable
// CSV table and a per-class JSON report.

#include "ou3d/pipeline.hpp"

#include <cinttypes>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

namespace ou3d {

struct SweepCell {
  int K = 4;
  double A_deg = 90;
  double R = 0.5;
  double alpha = 0.1;
  bool sbff = true;
  int k_topk = 5;
  int splat_px = 3;

  auto tie() const { return std::tie(K, A_deg, R, alpha, sbff, k_topk, splat_px); }
  bool operator<(const SweepCell& o) const { return tie() < o.tie(); }
  bool operator==(const SweepCell& o) const { return tie() == o.tie(); }

  // Everything but alpha, which only enters inference.
  std::string upstream_key() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "K=%d,A=%.17g,R=%.17g,sbff=%d,k=%d,splat=%d", K, A_deg, R, sbff ? 1 : 0, k_topk,
                  splat_px);
    return buf;
  }
  std::string key() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, ",alpha=%.17g", alpha);
    return upstream_key() + buf;
  }
};

struct SweepGrid {
  std::vector<int> K{4};
  std::vector<double> A_deg{90};
  std::vector<double> R{0.5};
  std::vector<double> alpha{0.1};
  std::vector<bool> sbff{true};
  std::vector<int> k_topk{5};
  std::vector<int> splat_px{3};

  std::vector<SweepCell> cells() const {
    if (K.empty() || A_deg.empty() || R.empty() || alpha.empty() || sbff.empty() || k_topk.empty() ||
        splat_px.empty())
      throw Error("sweep: every grid axis needs at least one value");
    std::set<SweepCell> out;
    for (int k : K)
      for (double a : A_deg)
        for (double r : R)
          for (double al : alpha)
            for (bool s : sbff)
              for (int t : k_topk)
                for (int sp : splat_px) out.insert({k, a, r, al, s, t, sp});
    return {out.begin(), out.end()};
  }

  static SweepGrid from_json(const nlohmann::json& j) {
    SweepGrid g;
    try {
      config_detail::take(j, "K", g.K);
      config_detail::take(j, "A_deg", g.A_deg);
      config_detail::take(j, "R", g.R);
      config_detail::take(j, "alpha", g.alpha);
      config_detail::take(j, "sbff", g.sbff);
      config_detail::take(j, "k_topk", g.k_topk);
      config_detail::take(j, "splat_px", g.splat_px);
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("sweep grid: ") + e.what());
    }
    return g;
  }
};

// The cell's run configuration. Its seed is the base seed XOR a hash of the
// upstream key, so cells differing only in alpha share views and training.
inline PipelineConfig cell_config(const PipelineConfig& base, const SweepCell& cell) {
  PipelineConfig c = base;
  c.view.K = cell.K;
  c.view.A_deg = cell.A_deg;
  c.view.R = cell.R;
  c.fusion.alpha = cell.alpha;
  c.sbff.enabled = cell.sbff;
  c.sbff.k = cell.k_topk;
  c.splat_px = cell.splat_px;
  c.seed = base.seed ^ fnv1a(cell.upstream_key());
  return c;
}

struct SweepRow {
  SweepCell cell;
  double S_R = 0, miou = 0, macc = 0, oa = 0, wall_seconds = 0;
  nlohmann::json per_class_iou = nlohmann::json::object();
};

struct SweepFailure {
  SweepCell cell;
  std::string error;
};

struct SweepOutcome {
  std::vector<SweepRow> rows;  // sorted by cell
  std::vector<SweepFailure> failures;
  std::size_t resumed = 0;
};

inline constexpr const char* kSweepCsvHeader = "K,A_deg,R,alpha,sbff,k_topk,splat_px,S_R,mIoU,mAcc,OA,wall_seconds";

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << kSweepCsvHeader << '\n';
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.cell.K,
                  r.cell.A_deg, r.cell.R, r.cell.alpha, r.cell.sbff ? 1 : 0, r.cell.k_topk, r.cell.splat_px, r.S_R,
                  r.miou, r.macc, r.oa, r.wall_seconds);
    out << buf;
  }
  return out.str();
}

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text, const std::string& name) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kSweepCsvHeader) throw Error(name + ": not a sweep table (bad header)");
  std::vector<SweepRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 12) throw Error(name + ": line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
    try {
      SweepRow r;
      r.cell = {std::stoi(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), f[4] == "1", std::stoi(f[5]),
                std::stoi(f[6])};
      r.S_R = std::stod(f[7]);
      r.miou = std::stod(f[8]);
      r.macc = std::stod(f[9]);
      r.oa = std::stod(f[10]);
      r.wall_seconds = std::stod(f[11]);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw Error(name + ": malformed number on line " + std::to_string(lineno));
    }
  }
  return rows;
}

inline nlohmann::json cell_json(const SweepCell& c) {
  return {{"K", c.K},       {"A_deg", c.A_deg},   {"R", c.R},           {"alpha", c.alpha},
          {"sbff", c.sbff}, {"k_topk", c.k_topk}, {"splat_px", c.splat_px}};
}

inline nlohmann::json sweep_report(const SweepOutcome& o) {
  nlohmann::json cells = nlohmann::json::array(), failures = nlohmann::json::array();
  for (const auto& r : o.rows) {
    auto j = cell_json(r.cell);
    j["S_R"] = r.S_R;
    j["mIoU"] = r.miou;
    j["mAcc"] = r.macc;
    j["OA"] = r.oa;
    j["wall_seconds"] = r.wall_seconds;
    j["per_class_iou"] = r.per_class_iou;
    cells.push_back(std::move(j));
  }
  for (const auto& f : o.failures) {
    auto j = cell_json(f.cell);
    j["error"] = f.error;
    failures.push_back(std::move(j));
  }
  return {{"cells", cells}, {"failures", failures}};
}

struct SweepOptions {
  std::filesystem::path csv_path;   // empty: in-memory only
  std::filesystem::path json_path;  // empty: no report file
  unsigned concurrency = 1;         // cell groups run at once
};

namespace sweep_detail {

inline void save_text(const std::filesystem::path& path, const std::string& text) {
  binio::Writer w;
  w.bytes(text.data(), text.size());
  w.save(path);
}

}  // namespace sweep_detail

// Runs every cell not already present in an existing CSV at
// options.csv_path. A failing cell is reported and left out of the table so
// that a later run retries it.
inline SweepOutcome run_sweep(const PointCloud& cloud, const TextEmbeddingTable& table, const PipelineConfig& base,
                              const SweepGrid& grid, const SweepOptions& options = {}) {
  if (options.concurrency == 0) throw Error("sweep: concurrency must be >= 1");
  const auto cells = grid.cells();
  SweepOutcome out;

  std::map<std::string, nlohmann::json> previous_classes;
  if (!options.json_path.empty() && std::filesystem::exists(options.json_path)) {
    try {
      std::ifstream in(options.json_path);
      const auto report = nlohmann::json::parse(in);
      for (const auto& c : report.at("cells")) {
        SweepCell cell{c.at("K").get<int>(),       c.at("A_deg").get<double>(), c.at("R").get<double>(),
                       c.at("alpha").get<double>(), c.at("sbff").get<bool>(),    c.at("k_topk").get<int>(),
                       c.at("splat_px").get<int>()};
        previous_classes[cell.key()] = c.at("per_class_iou");
      }
    } catch (const nlohmann::json::exception&) {
      warn("sweep: ignoring unreadable report " + options.json_path.string());
    }
  }
  std::set<SweepCell> wanted(cells.begin(), cells.end()), done;
  if (!options.csv_path.empty() && std::filesystem::exists(options.csv_path)) {
    const auto buf = binio::slurp(options.csv_path);
    for (auto& r : parse_sweep_csv(std::string(buf.begin(), buf.end()), options.csv_path.string())) {
      if (!wanted.count(r.cell) || done.count(r.cell)) continue;
      if (auto it = previous_classes.find(r.cell.key()); it != previous_classes.end()) r.per_class_iou = it->second;
      done.insert(r.cell);
      out.rows.push_back(std::move(r));
    }
  }
  out.resumed = out.rows.size();

  std::map<std::string, std::vector<SweepCell>> groups;
  for (const auto& c : cells)
    if (!done.count(c)) groups[c.upstream_key()].push_back(c);
  std::vector<std::vector<SweepCell>> work;
  for (auto& [k, g] : groups) work.push_back(std::move(g));

  const unsigned total_threads = base.resolved_threads();
  const unsigned inner = std::max(1u, total_threads / std::min<unsigned>(options.concurrency, std::max<std::size_t>(work.size(), 1)));
  std::mutex mu;
  auto flush = [&] {
    std::sort(out.rows.begin(), out.rows.end(), [](const auto& a, const auto& b) { return a.cell < b.cell; });
    std::sort(out.failures.begin(), out.failures.end(), [](const auto& a, const auto& b) { return a.cell < b.cell; });
    if (!options.csv_path.empty()) sweep_detail::save_text(options.csv_path, sweep_csv(out.rows));
    if (!options.json_path.empty()) sweep_detail::save_text(options.json_path, sweep_report(out).dump(2) + "\n");
  };

  parallel_for(work.size(), options.concurrency, [&](std::size_t g) {
    std::vector<SweepRow> rows;
    std::vector<SweepFailure> failures;
    try {
      auto cfg = cell_config(base, work[g].front());
      cfg.threads = inner;
      const auto up = run_upstream(cloud, table, cfg);
      for (const auto& cell : work[g]) {
        auto ccfg = cell_config(base, cell);
        ccfg.threads = inner;
        const auto res = score_upstream(up, cloud, table, ccfg);
        SweepRow r;
        r.cell = cell;
        r.S_R = res.up.coverage.ratio;
        r.miou = res.eval_all.miou;
        r.macc = res.eval_all.macc;
        r.oa = res.eval_all.oa;
        r.wall_seconds = res.wall_seconds;
        r.per_class_iou = evaluation_json(res.eval_all, res.eval_classes)["per_class_iou"];
        rows.push_back(std::move(r));
      }
    } catch (const std::exception& e) {
      for (const auto& cell : work[g]) failures.push_back({cell, e.what()});
    }
    std::lock_guard lock(mu);
    for (auto& r : rows) out.rows.push_back(std::move(r));
    for (auto& f : failures) out.failures.push_back(std::move(f));
    flush();
  });
  flush();
  return out;
}

}  // namespace ou3d
