#pragma once

// Student feature field: a stack of regular voxel grids at increasing
// resolution, each holding C-dim parameters on its voxel centers. A point's
// feature is the sum over levels of the trilinear interpolation, L2
// normalized. The field is trained against the teacher library with a
// cosine loss; teacher rows are constants and only field parameters receive
// gradients.

#include "ou3d/liftfuse.hpp"

#include <array>
#include <cmath>
#include <numbers>

namespace ou3d {

struct Stencil {
  std::array<std::int64_t, 8> cell{};  // linear cell index per corner
  std::array<double, 8> weight{};
};

// One resolution level. Only cells some activated point interpolates from
// carry parameters; the rest read as zero.
template <typename T>
class VoxelGrid {
public:
  VoxelGrid() = default;

  // Spans the box inflated by one voxel on every side.
  VoxelGrid(const BoundingBox& box, double voxel_size, std::uint32_t dim) : voxel_(voxel_size), dim_(dim) {
    if (!(voxel_size > 0)) throw Error("VoxelGrid: voxel size must be positive");
    if (dim == 0) throw Error("VoxelGrid: feature dimension must be positive");
    origin_ = box.origin - Vec3::Constant(voxel_size);
    const Vec3 ext = box.extents() + Vec3::Constant(2 * voxel_size);
    for (int a = 0; a < 3; ++a)
      dims_[a] = std::max<std::int64_t>(2, static_cast<std::int64_t>(std::ceil(ext[a] / voxel_size)));
    const std::int64_t cells = dims_[0] * dims_[1] * dims_[2];
    if (cells > (std::int64_t(1) << 31)) throw Error("VoxelGrid: grid too large, increase the voxel size");
    slot_.assign(static_cast<std::size_t>(cells), -1);
  }

  double voxel_size() const { return voxel_; }
  const Vec3& origin() const { return origin_; }
  const std::array<std::int64_t, 3>& dims() const { return dims_; }
  std::uint32_t dim() const { return dim_; }
  std::size_t active_count() const { return cells_.size(); }
  const std::vector<std::int64_t>& active_cells() const { return cells_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }

  std::int64_t cell_index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (k * dims_[1] + j) * dims_[0] + i;
  }
  Vec3 cell_center(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return origin_ + voxel_ * Vec3(double(i) + 0.5, double(j) + 0.5, double(k) + 0.5);
  }
  std::int32_t slot(std::int64_t cell) const { return slot_[static_cast<std::size_t>(cell)]; }

  // Trilinear stencil over the 8 surrounding voxel centers. Queries beyond
  // the lattice of centers clamp to it and set `clamped`.
  Stencil stencil(const Vec3& p, bool* clamped = nullptr) const {
    Stencil s;
    std::array<std::int64_t, 3> i0{};
    std::array<double, 3> t{};
    bool out = false;
    for (int a = 0; a < 3; ++a) {
      const double g = (p[a] - origin_[a]) / voxel_ - 0.5;
      const double hi = double(dims_[a] - 1);
      double gc = g;
      if (!(g >= 0)) {
        gc = 0;
        out = true;
      } else if (g > hi) {
        gc = hi;
        out = true;
      }
      i0[a] = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(gc)), dims_[a] - 2);
      t[a] = gc - double(i0[a]);
    }
    for (int c = 0; c < 8; ++c) {
      const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
      s.cell[c] = cell_index(i0[0] + dx, i0[1] + dy, i0[2] + dz);
      s.weight[c] = (dx ? t[0] : 1 - t[0]) * (dy ? t[1] : 1 - t[1]) * (dz ? t[2] : 1 - t[2]);
    }
    if (clamped) *clamped = out;
    return s;
  }

  void activate(std::span<const Vec3> points, std::normal_distribution<double>& g, std::mt19937_64& rng,
                bool random_init) {
    for (const auto& p : points) {
      const Stencil s = stencil(p);
      for (auto cell : s.cell) {
        auto& sl = slot_[static_cast<std::size_t>(cell)];
        if (sl >= 0) continue;
        sl = static_cast<std::int32_t>(cells_.size());
        cells_.push_back(cell);
        for (std::uint32_t c = 0; c < dim_; ++c) params_.push_back(random_init ? static_cast<T>(g(rng)) : T(0));
      }
    }
  }

  // Adds the interpolated parameters to `out`.
  void accumulate(const Stencil& s, std::span<T> out) const {
    for (int c = 0; c < 8; ++c) {
      const auto sl = slot_[static_cast<std::size_t>(s.cell[c])];
      if (sl < 0) continue;
      const T w = static_cast<T>(s.weight[c]);
      const T* theta = params_.data() + std::size_t(sl) * dim_;
      for (std::uint32_t k = 0; k < dim_; ++k) out[k] += w * theta[k];
    }
  }

  // Adds weight * d into `grad` for every active corner of the stencil and
  // reports each slot it wrote to.
  template <typename Fn>
  void scatter(const Stencil& s, const T* d, T* grad, Fn&& on_slot) const {
    for (int c = 0; c < 8; ++c) {
      const auto sl = slot_[static_cast<std::size_t>(s.cell[c])];
      if (sl < 0) continue;
      on_slot(sl);
      const T w = static_cast<T>(s.weight[c]);
      T* g = grad + std::size_t(sl) * dim_;
      for (std::uint32_t k = 0; k < dim_; ++k) g[k] += w * d[k];
    }
  }

  void restore(const Vec3& origin, const std::array<std::int64_t, 3>& dims, double voxel, std::uint32_t dim,
               std::vector<std::int64_t> cells, std::vector<T> params) {
    origin_ = origin;
    dims_ = dims;
    voxel_ = voxel;
    dim_ = dim;
    slot_.assign(static_cast<std::size_t>(dims[0] * dims[1] * dims[2]), -1);
    for (std::size_t s = 0; s < cells.size(); ++s) {
      if (cells[s] < 0 || cells[s] >= std::int64_t(slot_.size()))
        throw Error("field checkpoint: cell index out of range");
      slot_[static_cast<std::size_t>(cells[s])] = static_cast<std::int32_t>(s);
    }
    cells_ = std::move(cells);
    params_ = std::move(params);
  }

private:
  double voxel_ = 0.2;
  std::uint32_t dim_ = 0;
  Vec3 origin_ = Vec3::Zero();
  std::array<std::int64_t, 3> dims_{};
  std::vector<std::int32_t> slot_;
  std::vector<std::int64_t> cells_;
  std::vector<T> params_;
};

template <typename T>
class VoxelFeatureField {
public:
  VoxelFeatureField() = default;

  // Level 0 has voxel size `finest_voxel`; each further level is
  // `level_scale` times coarser.
  VoxelFeatureField(const BoundingBox& box, double finest_voxel, std::uint32_t dim, int levels = 1,
                    double level_scale = 4.0) {
    if (levels < 1) throw Error("VoxelFeatureField: need at least one level");
    if (levels > 1 && !(level_scale > 1)) throw Error("VoxelFeatureField: level scale must exceed 1");
    double v = finest_voxel;
    for (int l = 0; l < levels; ++l, v *= level_scale) levels_.emplace_back(box, v, dim);
  }

  std::uint32_t dim() const { return levels_.empty() ? 0 : levels_.front().dim(); }
  std::size_t level_count() const { return levels_.size(); }
  VoxelGrid<T>& level(std::size_t l) { return levels_[l]; }
  const VoxelGrid<T>& level(std::size_t l) const { return levels_[l]; }
  std::vector<VoxelGrid<T>>& levels() { return levels_; }
  const std::vector<VoxelGrid<T>>& levels() const { return levels_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : levels_) n += g.params().size();
    return n;
  }

  // Allocates cells touched by `points`, in point order per level, with
  // N(0, sigma^2) initial values.
  void activate(std::span<const Vec3> points, double init_sigma, std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, 0xf1e1d));
    std::normal_distribution<double> g(0.0, init_sigma > 0 ? init_sigma : 1.0);
    for (auto& lv : levels_) lv.activate(points, g, rng, init_sigma > 0);
  }

  std::vector<Stencil> stencils(const Vec3& p, bool* clamped = nullptr) const {
    std::vector<Stencil> out;
    out.reserve(levels_.size());
    bool any = false;
    for (const auto& lv : levels_) {
      bool c = false;
      out.push_back(lv.stencil(p, &c));
      any = any || c;
    }
    if (clamped) *clamped = any;
    return out;
  }

  // Raw (unnormalized) feature.
  void interpolate(std::span<const Stencil> st, std::span<T> out) const {
    std::fill(out.begin(), out.end(), T(0));
    for (std::size_t l = 0; l < levels_.size(); ++l) levels_[l].accumulate(st[l], out);
  }

  void interpolate(const Vec3& p, std::span<T> out) const {
    const auto st = stencils(p);
    interpolate(st, out);
  }

private:
  std::vector<VoxelGrid<T>> levels_;
};

template <typename T>
void normalize_row(std::span<T> row) {
  double s = 0;
  for (T x : row) s += double(x) * double(x);
  s = std::sqrt(s);
  if (!(s > 0)) return;
  for (auto& x : row) x = static_cast<T>(double(x) / s);
}

// L2-normalized interpolated features, one row per point. Points whose
// stencil touches no active cell get a zero row.
template <typename T>
std::vector<T> field_features(const VoxelFeatureField<T>& field, std::span<const Vec3> points,
                              std::size_t* clamped_count = nullptr, unsigned threads = 1) {
  const std::uint32_t C = field.dim();
  std::vector<T> out(points.size() * C);
  std::vector<std::uint8_t> clamped(points.size(), 0);
  constexpr std::size_t chunk = 4096;
  const std::size_t chunks = (points.size() + chunk - 1) / chunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t end = std::min(points.size(), (c + 1) * chunk);
    for (std::size_t i = c * chunk; i < end; ++i) {
      bool cl = false;
      const auto st = field.stencils(points[i], &cl);
      clamped[i] = cl;
      std::span<T> row(out.data() + i * C, C);
      field.interpolate(st, row);
      normalize_row(row);
    }
  });
  const auto n_clamped = static_cast<std::size_t>(std::count(clamped.begin(), clamped.end(), 1));
  if (n_clamped) warn("field_features: " + std::to_string(n_clamped) + " queries outside the grid were clamped");
  if (clamped_count) *clamped_count = n_clamped;
  return out;
}

// 1 - cos(y, t) for one row; writes d/dy scaled by `scale` into grad.
template <typename T>
double cosine_loss_row(const T* y, const T* t, std::size_t dim, double scale, T* grad) {
  double yy = 0, tt = 0, yt = 0;
  for (std::size_t c = 0; c < dim; ++c) {
    yy += double(y[c]) * double(y[c]);
    tt += double(t[c]) * double(t[c]);
    yt += double(y[c]) * double(t[c]);
  }
  const double denom = std::sqrt(yy * tt);
  if (!(denom > 0)) {
    // No direction to compare; cos taken as 0 with zero gradient.
    if (grad) std::fill(grad, grad + dim, T(0));
    return 1.0;
  }
  const double cos = yt / denom;
  if (grad) {
    const double ny = std::sqrt(yy), nt = std::sqrt(tt);
    for (std::size_t c = 0; c < dim; ++c)
      grad[c] = static_cast<T>(-scale * (double(t[c]) / (ny * nt) - cos * double(y[c]) / yy));
  }
  return 1 - cos;
}

template <typename T>
struct LossAndGrad {
  double loss = 0;
  std::vector<T> grad;  // same shape as the student batch
};

// mean over rows of (1 - cos(student_i, teacher_i)) and its gradient with
// respect to the student rows. The teacher is treated as a constant.
template <typename T>
LossAndGrad<T> distill_loss(std::span<const T> student, std::span<const T> teacher, std::size_t dim) {
  if (dim == 0 || student.empty()) throw Error("distill_loss: empty batch");
  if (student.size() != teacher.size() || student.size() % dim != 0)
    throw Error("distill_loss: student and teacher batch shapes differ");
  const std::size_t rows = student.size() / dim;
  LossAndGrad<T> r;
  r.grad.assign(student.size(), T(0));
  double total = 0;
  for (std::size_t i = 0; i < rows; ++i)
    total += cosine_loss_row(student.data() + i * dim, teacher.data() + i * dim, dim, 1.0 / double(rows),
                             r.grad.data() + i * dim);
  r.loss = total / double(rows);
  return r;
}

struct TrainConfig {
  int epochs = 60;
  double learning_rate = 1e-2;
  double final_lr_ratio = 0.1;  // cosine decay target, as a fraction of the initial rate
  std::size_t batch_size = 4096;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double voxel_size = 0.2;  // finest level
  int levels = 4;
  double level_scale = 3.0;
  double init_sigma = 1e-2;
  std::uint64_t seed = 0;
  double divergence_factor = 10.0;

  void validate() const {
    if (epochs < 0) throw Error("TrainConfig: epochs must be non-negative");
    if (learning_rate < 0) throw Error("TrainConfig: learning rate must be non-negative");
    if (batch_size == 0) throw Error("TrainConfig: batch size must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw Error("TrainConfig: moment rates must be in [0,1)");
    if (!(voxel_size > 0)) throw Error("TrainConfig: voxel size must be positive");
    if (levels < 1) throw Error("TrainConfig: levels must be >= 1");
    if (levels > 1 && !(level_scale > 1)) throw Error("TrainConfig: level scale must exceed 1");
    if (!(final_lr_ratio >= 0)) throw Error("TrainConfig: final lr ratio must be non-negative");
  }
};

struct TrainResult {
  std::vector<double> loss_curve;  // entry 0 is the loss before training, then one per epoch
  std::size_t steps = 0;
};

namespace detail {

template <typename T>
double covered_loss(const VoxelFeatureField<T>& field, const PointCloud& cloud, const FeatureLibrary& lib,
                    std::span<const std::uint32_t> ids, unsigned threads) {
  constexpr std::size_t chunk = 4096;
  const std::size_t chunks = (ids.size() + chunk - 1) / chunk;
  const std::uint32_t C = field.dim();
  std::vector<double> partial(chunks, 0.0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    std::vector<T> y(C), t(C);
    const std::size_t end = std::min(ids.size(), (c + 1) * chunk);
    for (std::size_t b = c * chunk; b < end; ++b) {
      field.interpolate(cloud.positions[ids[b]], y);
      const auto f = lib.feature(ids[b]);
      std::copy(f.begin(), f.end(), t.begin());
      partial[c] += cosine_loss_row<T>(y.data(), t.data(), C, 0.0, nullptr);
    }
  });
  double s = 0;
  for (double p : partial) s += p;
  return s / double(ids.size());
}

// Adam moments and a dense gradient buffer for one level.
template <typename T>
struct LevelState {
  std::vector<T> m, v, grad;
  std::vector<std::uint8_t> touched_flag;
  std::vector<std::int32_t> touched;
};

}  // namespace detail

inline double cosine_decay_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  const double progress = total_steps > 1 ? double(step) / double(total_steps - 1) : 1.0;
  return cfg.learning_rate *
         (cfg.final_lr_ratio + (1 - cfg.final_lr_ratio) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
}

// Mini-batch training with lazy Adam: only cells touched by a batch update
// their parameters and moments. Per-point gradients may be computed in
// parallel; they are scattered into cells in batch order.
template <typename T>
TrainResult train(VoxelFeatureField<T>& field, const PointCloud& cloud, const FeatureLibrary& lib,
                  const TrainConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  if (lib.num_points != cloud.size()) throw Error("train: feature library does not match the cloud");
  if (lib.dim != field.dim()) throw Error("train: feature library and field disagree on dimension");
  std::vector<std::uint32_t> ids;
  for (std::size_t p = 0; p < lib.num_points; ++p)
    if (lib.covered[p]) ids.push_back(static_cast<std::uint32_t>(p));
  if (ids.empty()) throw Error("train: the feature library covers no points");

  const std::uint32_t C = field.dim();
  const std::size_t L = field.level_count();
  std::vector<detail::LevelState<T>> state(L);
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t n = field.level(l).params().size();
    state[l].m.assign(n, T(0));
    state[l].v.assign(n, T(0));
    state[l].grad.assign(n, T(0));
    state[l].touched_flag.assign(field.level(l).active_count(), 0);
  }

  TrainResult res;
  res.loss_curve.push_back(detail::covered_loss(field, cloud, lib, ids, threads));
  const double initial = res.loss_curve.front();

  const std::size_t steps_per_epoch = (ids.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * std::size_t(cfg.epochs);
  std::vector<Stencil> stencils;
  std::vector<T> dy;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0xe90c, static_cast<std::uint64_t>(epoch)));
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t b0 = 0; b0 < ids.size(); b0 += cfg.batch_size) {
      const std::size_t bn = std::min(cfg.batch_size, ids.size() - b0);
      stencils.resize(bn * L);
      dy.assign(bn * C, T(0));
      constexpr std::size_t chunk = 1024;
      const std::size_t chunks = (bn + chunk - 1) / chunk;
      parallel_for(chunks, threads, [&](std::size_t c) {
        std::vector<T> y(C), t(C);
        const std::size_t end = std::min(bn, (c + 1) * chunk);
        for (std::size_t b = c * chunk; b < end; ++b) {
          const auto p = ids[b0 + b];
          for (std::size_t l = 0; l < L; ++l) stencils[b * L + l] = field.level(l).stencil(cloud.positions[p]);
          field.interpolate(std::span<const Stencil>(stencils.data() + b * L, L), y);
          const auto f = lib.feature(p);
          std::copy(f.begin(), f.end(), t.begin());
          cosine_loss_row<T>(y.data(), t.data(), C, 1.0 / double(bn), dy.data() + b * C);
        }
      });
      for (std::size_t b = 0; b < bn; ++b) {
        const T* d = dy.data() + b * C;
        for (std::size_t l = 0; l < L; ++l) {
          const auto& grid = field.level(l);
          auto& st = state[l];
          grid.scatter(stencils[b * L + l], d, st.grad.data(), [&st](std::int32_t sl) {
            if (!st.touched_flag[sl]) {
              st.touched_flag[sl] = 1;
              st.touched.push_back(sl);
            }
          });
        }
      }
      const double lr = cosine_decay_lr(cfg, res.steps, total_steps);
      ++res.steps;
      const double bc1 = 1 - std::pow(cfg.beta1, double(res.steps));
      const double bc2 = 1 - std::pow(cfg.beta2, double(res.steps));
      for (std::size_t l = 0; l < L; ++l) {
        auto& st = state[l];
        auto& theta = field.level(l).params();
        for (auto sl : st.touched) {
          const std::size_t o = std::size_t(sl) * C;
          for (std::uint32_t k = 0; k < C; ++k) {
            const double g = st.grad[o + k];
            const double mk = cfg.beta1 * double(st.m[o + k]) + (1 - cfg.beta1) * g;
            const double vk = cfg.beta2 * double(st.v[o + k]) + (1 - cfg.beta2) * g * g;
            st.m[o + k] = static_cast<T>(mk);
            st.v[o + k] = static_cast<T>(vk);
            if (lr > 0)
              theta[o + k] =
                  static_cast<T>(double(theta[o + k]) - lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.adam_eps));
            st.grad[o + k] = T(0);
          }
          st.touched_flag[sl] = 0;
        }
        st.touched.clear();
      }
    }
    const double loss = detail::covered_loss(field, cloud, lib, ids, threads);
    res.loss_curve.push_back(loss);
    if (loss > cfg.divergence_factor * initial)
      throw Error("train: diverged at epoch " + std::to_string(epoch + 1) + " (loss " + std::to_string(loss) +
                  " vs initial " + std::to_string(initial) + ")");
  }
  return res;
}

template <typename T>
struct FieldLossGrad {
  double loss = 0;
  std::vector<std::vector<T>> grad;  // per level, shaped like its params()
};

// Mean distillation loss of the field at `points` against `teacher` rows,
// with its gradient with respect to every level's parameters.
template <typename T>
FieldLossGrad<T> field_loss_grad(const VoxelFeatureField<T>& field, std::span<const Vec3> points,
                                 std::span<const T> teacher) {
  const std::uint32_t C = field.dim();
  if (points.empty() || teacher.size() != points.size() * C) throw Error("field_loss_grad: batch shape mismatch");
  FieldLossGrad<T> r;
  for (const auto& g : field.levels()) r.grad.emplace_back(g.params().size(), T(0));
  std::vector<T> y(C), d(C);
  const double scale = 1.0 / double(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto st = field.stencils(points[i]);
    field.interpolate(st, y);
    r.loss += cosine_loss_row<T>(y.data(), teacher.data() + i * C, C, scale, d.data());
    for (std::size_t l = 0; l < field.level_count(); ++l)
      field.level(l).scatter(st[l], d.data(), r.grad[l].data(), [](std::int32_t) {});
  }
  r.loss *= scale;
  return r;
}

// Builds a field over the cloud's box and activates the cells its points use.
template <typename T = float>
VoxelFeatureField<T> make_field(const PointCloud& cloud, std::uint32_t dim, const TrainConfig& cfg) {
  cfg.validate();
  VoxelFeatureField<T> field(bounding_box(cloud), cfg.voxel_size, dim, cfg.levels, cfg.level_scale);
  field.activate(cloud.positions, cfg.init_sigma, cfg.seed);
  return field;
}

// ---------------------------------------------------------------------------
// OU3V checkpoint: "OU3V", u32 version=1, u32 level count, then per level:
// f64 voxel size, f64 origin[3], u32 dims[3], u32 C, u64 active count, and
// per active cell a u64 linear cell index followed by C float32 parameters.

inline constexpr std::uint32_t kFieldVersion = 1;

template <typename T>
void write_field(const std::filesystem::path& path, const VoxelFeatureField<T>& f) {
  binio::Writer w;
  w.magic("OU3V");
  w.put<std::uint32_t>(kFieldVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.level_count()));
  for (const auto& g : f.levels()) {
    w.put<double>(g.voxel_size());
    for (int a = 0; a < 3; ++a) w.put<double>(g.origin()[a]);
    for (int a = 0; a < 3; ++a) w.put<std::uint32_t>(static_cast<std::uint32_t>(g.dims()[a]));
    w.put<std::uint32_t>(g.dim());
    w.put<std::uint64_t>(g.active_count());
    for (std::size_t s = 0; s < g.active_count(); ++s) {
      w.put<std::uint64_t>(static_cast<std::uint64_t>(g.active_cells()[s]));
      for (std::uint32_t k = 0; k < g.dim(); ++k) w.put<float>(static_cast<float>(g.params()[s * g.dim() + k]));
    }
  }
  w.save(path);
}

template <typename T = float>
VoxelFeatureField<T> read_field(const std::filesystem::path& path) {
  auto r = binio::Reader::open(path);
  r.expect_magic("OU3V");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kFieldVersion)
    throw Error(r.name() + ": version mismatch, expected " + std::to_string(kFieldVersion) + " found " +
                std::to_string(version));
  const auto n_levels = r.get<std::uint32_t>("level count");
  if (n_levels == 0) throw Error(r.name() + ": checkpoint has no levels");
  VoxelFeatureField<T> f;
  for (std::uint32_t l = 0; l < n_levels; ++l) {
    const double voxel = r.get<double>("voxel size");
    Vec3 origin;
    for (int a = 0; a < 3; ++a) origin[a] = r.get<double>("origin");
    std::array<std::int64_t, 3> dims{};
    for (int a = 0; a < 3; ++a) dims[a] = r.get<std::uint32_t>("dims");
    const auto C = r.get<std::uint32_t>("C");
    const auto n = r.get<std::uint64_t>("active count");
    if (r.remaining() < n * (8 + 4ull * C))
      throw Error(r.name() + ": payload size mismatch, level " + std::to_string(l) + " header implies " +
                  std::to_string(n * (8 + 4ull * C)) + " bytes but " + std::to_string(r.remaining()) + " remain");
    std::vector<std::int64_t> cells(n);
    std::vector<T> params(n * C);
    std::vector<float> row(C);
    for (std::uint64_t s = 0; s < n; ++s) {
      cells[s] = static_cast<std::int64_t>(r.get<std::uint64_t>("cell"));
      r.get_into(std::span<float>(row), "parameters");
      for (std::uint32_t k = 0; k < C; ++k) params[s * C + k] = static_cast<T>(row[k]);
    }
    VoxelGrid<T> g;
    g.restore(origin, dims, voxel, C, std::move(cells), std::move(params));
    if (!f.levels().empty() && g.dim() != f.dim()) throw Error(r.name() + ": levels disagree on feature dimension");
    f.levels().push_back(std::move(g));
  }
  r.expect_end();
  return f;
}

inline void write_loss_curve(const std::filesystem::path& path, const std::vector<double>& curve) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "epoch,loss\n";
  out.precision(10);
  for (std::size_t e = 0; e < curve.size(); ++e) out << e << ',' << curve[e] << '\n';
}

}  // namespace ou3d
