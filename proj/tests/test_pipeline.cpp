#include "support.hpp"

using namespace ou3d;
using ou3d::testing::small_config;
using ou3d::testing::TempDir;

namespace {

struct Inputs {
  PointCloud cloud;
  TextEmbeddingTable table;
};

Inputs inputs_for(const PipelineConfig& c) {
  Inputs in;
  in.cloud = generate_scene(scene_spec_for(c));
  in.table = text_table_for(c, in.cloud.class_names);
  return in;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  auto c = small_config();
  c.fusion.alpha = 0.35;
  c.sbff.enabled = false;
  c.query = "tree";
  c.oracle_noise = 0.2;
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
}

TEST(Config, InvalidValuesRejected) {
  auto j = config_to_json(small_config());
  j["fusion"]["alpha"] = 1.5;
  EXPECT_THROW(config_from_json(j).validate(), Error);
  j = config_to_json(small_config());
  j["view"]["A_deg"] = "ninety";
  EXPECT_THROW(config_from_json(j), Error);
}

TEST(Config, StageSeedsAreDistinct) {
  const auto c = small_config();
  const std::set<std::uint64_t> seeds{c.scene_seed(), c.view_seed(),  c.oracle_seed(),
                                      c.sbff_seed(),  c.train_seed(), c.table_seed()};
  EXPECT_EQ(seeds.size(), 6u);
}

TEST(Pipeline, QueryRestrictsClasses) {
  auto c = small_config();
  const auto in = inputs_for(c);
  c.query = "trees along the road";
  c.lexicon_path = "";
  EXPECT_EQ(resolve_query(c, in.table), (std::vector<std::string>{"road"}));
  c.query = "tree and road";
  EXPECT_EQ(resolve_query(c, in.table), (std::vector<std::string>{"tree", "road"}));
  c.query = "unknown words";
  EXPECT_THROW(resolve_query(c, in.table), Error);
}

TEST(Pipeline, VariantsAndMetricsOnSmallScene) {
  const auto c = small_config();
  const auto in = inputs_for(c);
  const auto r = run_pipeline(in.cloud, in.table, c);
  ASSERT_EQ(r.variants.size(), 4u);
  EXPECT_GT(r.up.coverage.ratio, 0.9);
  EXPECT_GT(r.eval_all.miou, 0.8);
  EXPECT_EQ(r.eval_all.evaluated, in.cloud.size());
  EXPECT_EQ(r.eval_covered.evaluated, r.up.coverage.count);
  EXPECT_LT(r.up.loss_curve.back(), r.up.loss_curve.front());
  // 3d_only is scored on every point, 2d_only on library-covered points.
  EXPECT_EQ(r.variants[1].eval.evaluated, in.cloud.size());
  EXPECT_EQ(r.variants[0].eval.evaluated, r.up.library.covered_count());
}

TEST(Pipeline, ThreadCountDoesNotChangeResults) {
  auto c = small_config();
  const auto in = inputs_for(c);
  c.threads = 1;
  const auto a = run_pipeline(in.cloud, in.table, c);
  c.threads = 3;
  const auto b = run_pipeline(in.cloud, in.table, c);
  EXPECT_EQ(a.up.teacher, b.up.teacher);
  EXPECT_EQ(a.up.f3d, b.up.f3d);
  EXPECT_EQ(a.result, b.result);
}

TEST(Sweep, GridIsSortedAndDeduplicated) {
  SweepGrid g;
  g.K = {3, 2, 3};
  g.alpha = {0.1, 0};
  const auto cells = g.cells();
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_TRUE(std::is_sorted(cells.begin(), cells.end()));
  g.R.clear();
  EXPECT_THROW(g.cells(), Error);
}

TEST(Sweep, CellsDifferingOnlyInAlphaShareUpstream) {
  const auto base = small_config();
  SweepCell a, b;
  b.alpha = 0.7;
  EXPECT_EQ(cell_config(base, a).seed, cell_config(base, b).seed);
  b.K = 3;
  EXPECT_NE(cell_config(base, a).seed, cell_config(base, b).seed);
}

TEST(Sweep, SingleCellEqualsDirectRun) {
  const auto base = small_config();
  const auto in = inputs_for(base);
  SweepGrid g;
  g.K = {2};
  g.alpha = {0.1};
  const auto out = run_sweep(in.cloud, in.table, base, g);
  ASSERT_EQ(out.rows.size(), 1u);
  const auto direct = run_pipeline(in.cloud, in.table, cell_config(base, out.rows[0].cell));
  EXPECT_EQ(out.rows[0].miou, direct.eval_all.miou);
  EXPECT_EQ(out.rows[0].oa, direct.eval_all.oa);
  EXPECT_EQ(out.rows[0].S_R, direct.up.coverage.ratio);
}

TEST(Sweep, ResumesFromExistingTable) {
  TempDir tmp("sweep");
  const auto base = small_config();
  const auto in = inputs_for(base);
  SweepGrid g;
  g.K = {1, 2};
  g.alpha = {0, 0.5};
  const SweepOptions opts{tmp / "s.csv", tmp / "s.json", 2};
  const auto first = run_sweep(in.cloud, in.table, base, g, opts);
  ASSERT_EQ(first.rows.size(), 4u);
  EXPECT_EQ(first.resumed, 0u);

  // Drop one row, as if the run had stopped before finishing it.
  const auto full = ou3d::testing::bytes_of(tmp / "s.csv");
  auto rows = first.rows;
  rows.erase(rows.begin() + 2);
  {
    std::ofstream out(tmp / "s.csv", std::ios::binary);
    out << sweep_csv(rows);
  }
  const auto second = run_sweep(in.cloud, in.table, base, g, opts);
  EXPECT_EQ(second.resumed, 3u);
  ASSERT_EQ(second.rows.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(second.rows[k].cell, first.rows[k].cell);
    EXPECT_EQ(second.rows[k].miou, first.rows[k].miou);
    EXPECT_EQ(second.rows[k].per_class_iou, first.rows[k].per_class_iou);
  }

  g.alpha.push_back(1.0);
  const auto third = run_sweep(in.cloud, in.table, base, g, opts);
  EXPECT_EQ(third.resumed, 4u);
  EXPECT_EQ(third.rows.size(), 6u);
}

TEST(Sweep, CsvRoundTripIsExact) {
  SweepRow r;
  r.cell = {3, 45, 2, 0.1, false, 4, 5};
  r.S_R = 1.0 / 3;
  r.miou = 0.123456789012345678;
  r.macc = 0.5;
  r.oa = 0.9;
  r.wall_seconds = 1.25;
  const auto back = parse_sweep_csv(sweep_csv({r}), "t");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].cell, r.cell);
  EXPECT_EQ(back[0].S_R, r.S_R);
  EXPECT_EQ(back[0].miou, r.miou);
  EXPECT_THROW(parse_sweep_csv("wrong,header\n", "t"), Error);
}

TEST(Sweep, FailingCellIsReportedAndSkipped) {
  const auto base = small_config();
  const auto in = inputs_for(base);
  SweepGrid g;
  g.K = {1};
  g.A_deg = {90, 100};  // 100 does not divide 360
  const auto out = run_sweep(in.cloud, in.table, base, g);
  EXPECT_EQ(out.rows.size(), 1u);
  ASSERT_EQ(out.failures.size(), 1u);
  EXPECT_EQ(out.failures[0].cell.A_deg, 100);
}

TEST(Stages, ChainMatchesInMemoryPipeline) {
  TempDir tmp("stages");
  auto c = small_config();
  c.out_dir = tmp.path().string();
  run_scene_stage(c);
  run_render_stage(c);
  run_extract_stage(c);
  run_lift_stage(c);
  run_distill_stage(c);
  const auto seg = run_segment_stage(c);
  const auto metrics = run_eval_stage_json(c);

  const auto in = inputs_for(c);
  const auto direct = run_pipeline(in.cloud, in.table, c);
  EXPECT_EQ(read_predictions(seg / "predictions.bin").predicted, direct.result.predicted);
  EXPECT_EQ(metrics["miou"].get<double>(), direct.eval_all.miou);
  EXPECT_EQ(metrics["S_R"].get<double>(), direct.up.coverage.ratio);
  EXPECT_TRUE(std::filesystem::exists(seg / "heatmap.ply"));
  EXPECT_TRUE(std::filesystem::exists(stage_dir(c, Stage::Lift) / "config.json"));
}

TEST(Stages, DirectoriesAreContentAddressed) {
  auto a = small_config(), b = a;
  b.fusion.alpha = 0.9;
  EXPECT_EQ(stage_dir(a, Stage::Distill), stage_dir(b, Stage::Distill));
  EXPECT_NE(stage_dir(a, Stage::Segment), stage_dir(b, Stage::Segment));
  b = a;
  b.view.K = 3;
  EXPECT_NE(stage_dir(a, Stage::Render), stage_dir(b, Stage::Render));
  EXPECT_EQ(stage_dir(a, Stage::Scene), stage_dir(b, Stage::Scene));
  b = a;
  b.threads = 7;
  EXPECT_EQ(stage_dir(a, Stage::Eval), stage_dir(b, Stage::Eval));
}

TEST(Stages, RenderIsByteDeterministic) {
  TempDir t1("r1"), t2("r2");
  auto c = small_config();
  c.out_dir = t1.path().string();
  run_scene_stage(c);
  const auto d1 = run_render_stage(c);
  c.out_dir = t2.path().string();
  c.threads = 1;
  run_scene_stage(c);
  const auto d2 = run_render_stage(c);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file() || e.path().filename() == "config.json") continue;
    const auto rel = std::filesystem::relative(e.path(), d1);
    EXPECT_EQ(ou3d::testing::bytes_of(e.path()), ou3d::testing::bytes_of(d2 / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 10u);
}

TEST(Stages, SegmentWithoutCheckpointFails) {
  TempDir tmp("nockpt");
  auto c = small_config();
  c.out_dir = tmp.path().string();
  run_scene_stage(c);
  run_render_stage(c);
  run_extract_stage(c);
  run_lift_stage(c);
  try {
    run_segment_stage(c);
    FAIL() << "segment ran without a checkpoint";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("missing checkpoint"), std::string::npos) << e.what();
  }
}

TEST(Stages, MissingUpstreamNamesProducer) {
  TempDir tmp("noup");
  auto c = small_config();
  c.out_dir = tmp.path().string();
  try {
    run_lift_stage(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("gen-scene"), std::string::npos) << e.what();
  }
}

TEST(Stages, FileProviderReadsMaskFiles) {
  TempDir tmp("files");
  auto c = small_config();
  c.out_dir = (tmp / "oracle").string();
  run_scene_stage(c);
  run_render_stage(c);
  const auto ex = run_extract_stage(c);
  run_lift_stage(c);
  const auto lib = load_stage_library(c, true);

  auto f = c;
  f.out_dir = (tmp / "files").string();
  f.provider = ProviderKind::Files;
  f.masks_dir = (ex / "masks").string();
  f.table_source = TableSource::File;
  f.table_path = (ex / "text_table.ou3t").string();
  run_scene_stage(f);
  run_render_stage(f);
  run_extract_stage(f);
  run_lift_stage(f);
  EXPECT_EQ(load_stage_library(f, true), lib);
}
