#include "support.hpp"

using namespace ou3d;

namespace {

std::vector<double> random_rows(std::size_t rows, std::size_t dim, std::uint64_t seed, bool unit) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> out(rows * dim);
  for (auto& x : out) x = g(rng);
  if (unit)
    for (std::size_t r = 0; r < rows; ++r) normalize_row(std::span<double>(out.data() + r * dim, dim));
  return out;
}

// Two separated blocks of 500 points, one per class.
PointCloud two_block_scene() {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointCloud c;
  c.class_names = {"a", "b"};
  for (int i = 0; i < 1000; ++i) {
    const int cls = i % 2;
    c.positions.emplace_back(float(cls * 3 + 2 * u(rng)), float(2 * u(rng)), float(u(rng)));
    c.colors.push_back({0, 0, 0});
    c.labels.push_back(cls);
  }
  return c;
}

FeatureLibrary class_library(const PointCloud& c, std::uint32_t dim) {
  FeatureLibrary lib;
  lib.num_points = c.size();
  lib.dim = dim;
  lib.covered.assign(c.size(), 1);
  lib.view_count.assign(c.size(), 1);
  lib.features.assign(c.size() * dim, 0.0f);
  for (std::size_t p = 0; p < c.size(); ++p) lib.features[p * dim + static_cast<std::size_t>(c.labels[p])] = 1;
  return lib;
}

}  // namespace

TEST(DistillLoss, Identities) {
  const auto f64 = random_rows(50, 16, 1, true);
  const std::vector<float> F(f64.begin(), f64.end());
  EXPECT_EQ(distill_loss<float>(F, F, 16).loss, 0.0);

  std::vector<float> neg(F.size());
  std::transform(F.begin(), F.end(), neg.begin(), [](float x) { return -x; });
  EXPECT_EQ(distill_loss<float>(F, neg, 16).loss, 2.0);

  std::vector<float> a(8 * 8, 0), b(8 * 8, 0);
  for (int r = 0; r < 8; ++r) {
    a[r * 8 + r] = 1;
    b[r * 8 + (r + 3) % 8] = 1;
  }
  EXPECT_EQ(distill_loss<float>(a, b, 8).loss, 1.0);
}

TEST(DistillLoss, ScaleInvariantInStudent) {
  const auto y = random_rows(10, 8, 2, false), t = random_rows(10, 8, 3, true);
  auto y4 = y;
  for (auto& x : y4) x *= 4;
  EXPECT_NEAR(distill_loss<double>(y, t, 8).loss, distill_loss<double>(y4, t, 8).loss, 1e-14);
}

TEST(DistillLoss, GradientMatchesFiniteDifferences) {
  const std::size_t dim = 12;
  auto y = random_rows(20, dim, 4, false);
  const auto t = random_rows(20, dim, 5, true);
  const auto analytic = distill_loss<double>(y, t, dim).grad;
  const double h = 1e-6;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double y0 = y[i];
    y[i] = y0 + h;
    const double lp = distill_loss<double>(y, t, dim).loss;
    y[i] = y0 - h;
    const double lm = distill_loss<double>(y, t, dim).loss;
    y[i] = y0;
    const double fd = (lp - lm) / (2 * h);
    EXPECT_LE(std::abs(fd - analytic[i]), 1e-4 * std::max(std::abs(fd), 1e-3)) << i;
  }
}

TEST(DistillLoss, ZeroStudentHasZeroGradient) {
  const std::vector<double> y(8, 0.0), t = random_rows(1, 8, 6, true);
  const auto r = distill_loss<double>(y, t, 8);
  EXPECT_EQ(r.loss, 1.0);
  for (double g : r.grad) EXPECT_EQ(g, 0.0);
}

TEST(Field, ParameterGradientMatchesFiniteDifferences) {
  const auto cloud = ou3d::testing::random_cloud(60, 7, 2, 2);
  TrainConfig cfg;
  cfg.voxel_size = 0.5;
  cfg.levels = 2;
  cfg.level_scale = 2;
  cfg.init_sigma = 0.5;
  cfg.seed = 3;
  auto field = make_field<double>(cloud, 6, cfg);
  const auto teacher = random_rows(cloud.size(), 6, 8, true);
  const std::span<const Vec3> pts(cloud.positions);
  const auto analytic = field_loss_grad<double>(field, pts, teacher);
  const double h = 1e-4;
  double worst = 0;
  std::size_t checked = 0;
  for (std::size_t l = 0; l < field.level_count(); ++l) {
    auto& theta = field.level(l).params();
    for (std::size_t k = 0; k < theta.size(); k += 7) {
      const double t0 = theta[k];
      theta[k] = t0 + h;
      const double lp = field_loss_grad<double>(field, pts, teacher).loss;
      theta[k] = t0 - h;
      const double lm = field_loss_grad<double>(field, pts, teacher).loss;
      theta[k] = t0;
      const double fd = (lp - lm) / (2 * h), g = analytic.grad[l][k];
      if (std::abs(fd) < 1e-6 && std::abs(g) < 1e-6) continue;
      worst = std::max(worst, std::abs(fd - g) / std::max(std::abs(fd), std::abs(g)));
      ++checked;
    }
  }
  EXPECT_GT(checked, 50u);
  EXPECT_LT(worst, 1e-3);
}

TEST(Field, TrilinearReproducesLinearFunctions) {
  const auto cloud = ou3d::testing::random_cloud(400, 9, 2, 3);
  VoxelFeatureField<double> field(bounding_box(cloud), 0.4, 1, 1);
  field.activate(cloud.positions, 0, 0);
  auto& g = field.level(0);
  const auto lin = [](const Vec3& p) { return 0.3 + 1.5 * p.x() - 2.0 * p.y() + 0.25 * p.z(); };
  for (std::size_t s = 0; s < g.active_count(); ++s) {
    auto cell = g.active_cells()[s];
    const auto& d = g.dims();
    const std::int64_t i = cell % d[0], j = (cell / d[0]) % d[1], k = cell / (d[0] * d[1]);
    g.params()[s] = lin(g.cell_center(i, j, k));
  }
  double y = 0;
  for (const auto& p : cloud.positions) {
    field.interpolate(p, std::span<double>(&y, 1));
    EXPECT_NEAR(y, lin(p), 1e-9);
  }
}

TEST(Train, ConvergesOnTinyScene) {
  const auto cloud = two_block_scene();
  const auto lib = class_library(cloud, 4);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 256;
  cfg.seed = 1;
  auto field = make_field<float>(cloud, 4, cfg);
  const auto res = train(field, cloud, lib, cfg);
  EXPECT_LT(res.loss_curve.back(), res.loss_curve.front());
  const auto f3d = field_features(field, std::span<const Vec3>(cloud.positions));
  double mean_cos = 0;
  for (std::size_t p = 0; p < cloud.size(); ++p)
    mean_cos += cosine<float>(std::span<const float>(f3d.data() + p * 4, 4), lib.feature(p));
  mean_cos /= double(cloud.size());
  EXPECT_GE(mean_cos, 0.99);
}

TEST(Train, DeterministicAcrossThreadCounts) {
  const auto cloud = two_block_scene();
  const auto lib = class_library(cloud, 4);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 300;
  cfg.seed = 5;
  auto a = make_field<float>(cloud, 4, cfg), b = make_field<float>(cloud, 4, cfg);
  const auto ra = train(a, cloud, lib, cfg, 1);
  const auto rb = train(b, cloud, lib, cfg, 4);
  EXPECT_EQ(ra.loss_curve, rb.loss_curve);
  for (std::size_t l = 0; l < a.level_count(); ++l) EXPECT_EQ(a.level(l).params(), b.level(l).params());
}

TEST(Train, UncoveredLibraryRejected) {
  const auto cloud = two_block_scene();
  auto lib = class_library(cloud, 4);
  std::fill(lib.covered.begin(), lib.covered.end(), 0);
  TrainConfig cfg;
  auto field = make_field<float>(cloud, 4, cfg);
  EXPECT_THROW(train(field, cloud, lib, cfg), Error);
}

TEST(Train, CosineScheduleEndpoints) {
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.final_lr_ratio = 0.1;
  EXPECT_DOUBLE_EQ(cosine_decay_lr(cfg, 0, 11), 0.5);
  EXPECT_DOUBLE_EQ(cosine_decay_lr(cfg, 10, 11), 0.05);
  EXPECT_DOUBLE_EQ(cosine_decay_lr(cfg, 5, 11), 0.275);
}
