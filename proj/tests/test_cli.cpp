#include "support.hpp"

#include <cstdio>

#ifndef OU3D_CLI_PATH
#error "OU3D_CLI_PATH must point at the ou3d executable"
#endif

using ou3d::testing::TempDir;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

std::string slurp_text(const std::filesystem::path& p) {
  const auto b = ou3d::binio::slurp(p);
  return {b.begin(), b.end()};
}

Run cli(const TempDir& tmp, const std::string& args) {
  const auto out = tmp / "stdout.txt", err = tmp / "stderr.txt";
  const std::string cmd = std::string("\"") + OU3D_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp_text(out);
  r.err = slurp_text(err);
  return r;
}

std::filesystem::path write_config(const TempDir& tmp, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json j = {{"seed", 3},
                      {"threads", 2},
                      {"scene", {{"extent", 16}, {"density", 5}, {"vehicles", 2}}},
                      {"view", {{"K", 2}, {"A_deg", 90}, {"R", 0.5}, {"height", 96}, {"width", 96}}},
                      {"text_table", {{"dim", 16}}},
                      {"train", {{"epochs", 3}, {"levels", 2}, {"voxel_size", 0.5}}}};
  j.merge_patch(extra);
  const auto p = tmp / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

const char* kStages[] = {"gen-scene", "render", "extract", "lift", "distill", "segment", "eval"};

}  // namespace

TEST(Cli, EndToEndEmitsMetrics) {
  TempDir tmp("cli-e2e");
  const auto cfg = write_config(tmp);
  const auto r = cli(tmp, "end2end --config \"" + cfg.string() + "\" --out \"" + (tmp / "run").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_GT(j.at("miou").get<double>(), 0.5);
  const auto metrics = nlohmann::json::parse(slurp_text(tmp / "run" / "metrics.json"));
  EXPECT_TRUE(metrics.contains("variants"));
  EXPECT_EQ(metrics.at("miou"), j.at("miou"));
}

TEST(Cli, ChainedStagesMatchEndToEnd) {
  TempDir tmp("cli-chain");
  const auto cfg = write_config(tmp);
  const std::string c = " --config \"" + cfg.string() + "\" --alpha 0.2 --out ";
  for (const char* s : kStages) {
    const auto r = cli(tmp, std::string(s) + c + "\"" + (tmp / "chain").string() + "\"");
    ASSERT_EQ(r.code, 0) << s << ": " << r.err;
  }
  ASSERT_EQ(cli(tmp, "end2end" + c + "\"" + (tmp / "e2e").string() + "\"").code, 0);
  std::size_t compared = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(tmp / "chain")) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), tmp / "chain");
    if (rel.filename() == "config.json") continue;
    ASSERT_TRUE(std::filesystem::exists(tmp / "e2e" / rel)) << rel;
    EXPECT_EQ(ou3d::binio::slurp(e.path()), ou3d::binio::slurp(tmp / "e2e" / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 20u);
}

TEST(Cli, RenderTwiceIsByteIdentical) {
  TempDir tmp("cli-render");
  const auto cfg = write_config(tmp);
  for (const char* out : {"a", "b"}) {
    const std::string base = " --config \"" + cfg.string() + "\" --out \"" + (tmp / out).string() + "\"";
    ASSERT_EQ(cli(tmp, "gen-scene" + base).code, 0);
    const auto r = cli(tmp, "render" + base);
    ASSERT_EQ(r.code, 0) << r.err;
  }
  std::size_t compared = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(tmp / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "config.json") continue;
    const auto rel = std::filesystem::relative(e.path(), tmp / "a");
    EXPECT_EQ(ou3d::binio::slurp(e.path()), ou3d::binio::slurp(tmp / "b" / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 30u);
}

TEST(Cli, SegmentWithoutDistillReportsMissingCheckpoint) {
  TempDir tmp("cli-ckpt");
  const auto cfg = write_config(tmp);
  const std::string base = " --config \"" + cfg.string() + "\" --out \"" + (tmp / "run").string() + "\"";
  for (const char* s : {"gen-scene", "render", "extract", "lift"}) ASSERT_EQ(cli(tmp, s + base).code, 0) << s;
  const auto r = cli(tmp, "segment --query building --alpha 0.1" + base);
  EXPECT_NE(r.code, 0);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j.at("stage"), "segment");
  EXPECT_NE(j.at("error").get<std::string>().find("missing checkpoint"), std::string::npos);
}

TEST(Cli, InvalidOverrideIsMachineReadable) {
  TempDir tmp("cli-bad");
  const auto cfg = write_config(tmp);
  const auto r = cli(tmp, "render --config \"" + cfg.string() + "\" --A 70 --out \"" + (tmp / "run").string() + "\"");
  EXPECT_NE(r.code, 0);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j.at("stage"), "render");
  EXPECT_NE(j.at("error").get<std::string>().find("divide 360"), std::string::npos);
}

TEST(Cli, SweepWritesAndResumes) {
  TempDir tmp("cli-sweep");
  const auto cfg = write_config(tmp, {{"sweep", {{"K", {1, 2}}, {"alpha", {0, 0.1}}}}});
  const std::string args = "sweep --concurrency 2 --config \"" + cfg.string() + "\" --out \"" + (tmp / "run").string() + "\"";
  const auto first = cli(tmp, args);
  ASSERT_EQ(first.code, 0) << first.err;
  const auto j = nlohmann::json::parse(first.out);
  EXPECT_EQ(j.at("rows"), 4);
  const std::filesystem::path dir = j.at("dir").get<std::string>();
  const auto csv = slurp_text(dir / "sweep.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), ou3d::kSweepCsvHeader);
  const auto again = nlohmann::json::parse(cli(tmp, args).out);
  EXPECT_EQ(again.at("resumed"), 4);
}
