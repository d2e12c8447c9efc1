#include "tdl/dtm.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

namespace tdl::dtm {

namespace {
constexpr int kTrajDim = 2 * data::kTrajectoryPoints;  // 64
constexpr int kPatch = 8;
constexpr int kPatchDim =
    kPatch * kPatch * world::Observation::kChannels;  // 256
constexpr int kPatchCount =
    (world::Observation::kSize / kPatch) * (world::Observation::kSize / kPatch);
constexpr int kMomentDim = 3 * 8;  // (mass, cx, cy) per blob band
constexpr int kSelDim = 16;        // language-selector channels
}  // namespace

NoiseSchedule make_schedule(int K, double beta_min, double beta_max) {
  if (K < 1 || !(beta_min > 0) || !(beta_min <= beta_max) || !(beta_max < 1))
    throw nc::NumericError("make_schedule: need K >= 1, 0 < beta_min <= "
                           "beta_max < 1");
  NoiseSchedule s;
  s.K = K;
  s.beta.resize(K);
  s.alpha.resize(K);
  s.alpha_bar.resize(K);
  s.sigma.resize(K);
  double prod = 1.0;
  for (int k = 0; k < K; ++k) {
    s.beta[k] = K == 1 ? beta_min
                       : beta_min + (beta_max - beta_min) * k / (K - 1.0);
    s.alpha[k] = 1.0 - s.beta[k];
    prod *= s.alpha[k];
    s.alpha_bar[k] = prod;
    s.sigma[k] = std::sqrt(s.beta[k]);
  }
  s.sigma[0] = 0.0;  // no noise on the final denoising step
  return s;
}

std::vector<double> forward_noise(const std::vector<double>& x0, int k,
                                  const std::vector<double>& eps,
                                  const NoiseSchedule& sched) {
  if (k < 1 || k > sched.K)
    throw nc::NumericError("forward_noise: step k out of range");
  if (x0.size() != eps.size())
    throw nc::NumericError("forward_noise: shape mismatch between x0 and eps");
  const double ab = sched.alpha_bar[k - 1];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

DiffusionTrajectoryModel::DiffusionTrajectoryModel(DtmConfig cfg,
                                                   std::size_t vocab_size,
                                                   std::uint64_t seed)
    : cfg_(cfg), sched_(make_schedule(cfg.K, cfg.beta_min, cfg.beta_max)) {
  std::mt19937_64 rng(seed);
  const int w = cfg_.cond_width, h = cfg_.hidden;
  params_.create("word_emb", {vocab_size, static_cast<std::size_t>(w)}, rng,
                 0.1);
  params_.create("patch_w",
                 {static_cast<std::size_t>(kPatchDim),
                  static_cast<std::size_t>(w)},
                 rng, 0.05);
  params_.create_zeros("patch_b", {static_cast<std::size_t>(w)});
  // Per-patch gates make the pooled encoding position aware: with shared
  // patch weights alone, mean pooling would discard which patch a feature
  // came from, leaving object coordinates unobservable.
  auto gate = params_.create("patch_gate",
                             {static_cast<std::size_t>(kPatchCount),
                              static_cast<std::size_t>(w)},
                             rng, 0.2);
  for (auto& v : gate->data) v += 1.0;
  params_.create("moment_w",
                 {static_cast<std::size_t>(kMomentDim),
                  static_cast<std::size_t>(w)},
                 rng, 0.3);
  // Bilinear language/geometry features: expert waypoints are blob centroids
  // selected by the instruction, so trajectories are (near-)linear in the
  // products of a language selector with the moment vector. A linear path
  // from these products to x0hat extrapolates to fixture positions never
  // seen in training, which pure MLP routing does not.
  params_.create("sel_w",
                 {static_cast<std::size_t>(w),
                  static_cast<std::size_t>(kSelDim)},
                 rng, 0.3);
  params_.create("prod_w",
                 {static_cast<std::size_t>(kSelDim * kMomentDim),
                  static_cast<std::size_t>(w)},
                 rng, 0.1);
  params_.create("in_w",
                 {static_cast<std::size_t>(kTrajDim),
                  static_cast<std::size_t>(h)},
                 rng, 1.0 / std::sqrt(kTrajDim));
  params_.create_zeros("in_b", {static_cast<std::size_t>(h)});
  const int block_in = h + w + cfg_.time_dim;
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    params_.create(p + "w1",
                   {static_cast<std::size_t>(block_in),
                    static_cast<std::size_t>(h)},
                   rng, 1.0 / std::sqrt(block_in));
    params_.create_zeros(p + "b1", {static_cast<std::size_t>(h)});
    params_.create(p + "w2",
                   {static_cast<std::size_t>(h), static_cast<std::size_t>(h)},
                   rng, 0.5 / std::sqrt(h));
    params_.create_zeros(p + "b2", {static_cast<std::size_t>(h)});
  }
  params_.create("out_w",
                 {static_cast<std::size_t>(h),
                  static_cast<std::size_t>(kTrajDim)},
                 rng, 1.0 / std::sqrt(h));
  params_.create_zeros("out_b", {static_cast<std::size_t>(kTrajDim)});
  params_.create_zeros("skip_w", {static_cast<std::size_t>(w),
                                  static_cast<std::size_t>(kTrajDim)});
}

nc::TensorPtr obs_moment_vector(const world::Observation& obs) {
  // The renderer stamps blobs at constant intensities with no antialiasing,
  // so channel 3 takes exactly the five stamp levels: zone 0.2, switch-off
  // 0.4, switch-on 0.6, slider handle 0.8, gripper 1.0 (channels 0-2 hold
  // one block each at 1.0). Mass plus centroid per intensity band hands the
  // denoiser object coordinates it would otherwise have to decode from
  // pooled patch projections.
  const int n = world::Observation::kSize;
  std::vector<double> f(static_cast<std::size_t>(kMomentDim), 0.0);
  std::size_t g = 0;
  auto band = [&](int channel, float lo, float hi) {
    double m = 0, cx = 0, cy = 0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const float v = obs.at(channel, y, x);
        if (v >= lo && v < hi) {
          m += 1;
          cx += x;
          cy += y;
        }
      }
    f[g * 3 + 0] = m / 10.0;
    if (m > 0) {
      f[g * 3 + 1] = 2.0 * (cx / m) / (n - 1) - 1.0;
      f[g * 3 + 2] = 2.0 * (cy / m) / (n - 1) - 1.0;
    }
    ++g;
  };
  for (int c = 0; c < 3; ++c) band(c, 0.5f, 2.0f);
  for (int b = 0; b < 5; ++b) band(3, 0.1f + 0.2f * b, 0.3f + 0.2f * b);
  return nc::make_tensor({1, static_cast<std::size_t>(kMomentDim)},
                         std::move(f));
}

nc::TensorPtr obs_patch_matrix(const world::Observation& obs) {
  const int side = world::Observation::kSize / kPatch;  // 8 patches per axis
  std::vector<double> m(static_cast<std::size_t>(kPatchCount) * kPatchDim);
  std::size_t row = 0;
  for (int py = 0; py < side; ++py)
    for (int px = 0; px < side; ++px, ++row) {
      std::size_t col = 0;
      for (int c = 0; c < world::Observation::kChannels; ++c)
        for (int y = 0; y < kPatch; ++y)
          for (int x = 0; x < kPatch; ++x, ++col)
            m[row * kPatchDim + col] =
                obs.at(c, py * kPatch + y, px * kPatch + x);
    }
  return nc::make_tensor({static_cast<std::size_t>(kPatchCount),
                          static_cast<std::size_t>(kPatchDim)},
                         std::move(m));
}

nc::TensorPtr DiffusionTrajectoryModel::encode_condition(
    const std::vector<std::size_t>& tokens,
    const world::Observation& obs) const {
  auto lang = nc::mean_rows(nc::embedding(params_.get("word_emb"), tokens));
  auto patches = nc::add(
      nc::matmul(obs_patch_matrix(obs), params_.get("patch_w")),
      params_.get("patch_b"));
  auto vis = nc::mean_rows(nc::mul(patches, params_.get("patch_gate")));
  auto moments = obs_moment_vector(obs);
  auto pos = nc::matmul(moments, params_.get("moment_w"));
  auto sel = nc::matmul(lang, params_.get("sel_w"));            // [1,sel]
  auto outer = nc::matmul(nc::transpose(sel), moments);         // [sel,24]
  std::vector<nc::TensorPtr> rows;
  rows.reserve(kSelDim);
  for (int s = 0; s < kSelDim; ++s) rows.push_back(nc::slice(outer, 0, s, s + 1));
  auto prod = nc::matmul(nc::concat(rows, 1), params_.get("prod_w"));
  return nc::add(nc::add(nc::add(lang, vis), pos), prod);
}

nc::TensorPtr DiffusionTrajectoryModel::time_embedding(int k) const {
  const int d = cfg_.time_dim;
  std::vector<double> e(static_cast<std::size_t>(d));
  for (int i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / d);
    e[2 * i] = std::sin(k * freq);
    e[2 * i + 1] = std::cos(k * freq);
  }
  return nc::make_tensor({1, static_cast<std::size_t>(d)}, std::move(e));
}

nc::TensorPtr DiffusionTrajectoryModel::denoise(const nc::TensorPtr& xk, int k,
                                                const nc::TensorPtr& cond) const {
  if (k < 1 || k > cfg_.K)
    throw nc::NumericError("denoise: step k out of range");
  auto temb = time_embedding(k);
  auto h = nc::add(nc::matmul(xk, params_.get("in_w")), params_.get("in_b"));
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    auto inp = nc::concat({h, cond, temb}, 1);
    auto hid = nc::gelu(nc::add(nc::matmul(inp, params_.get(p + "w1")),
                                params_.get(p + "b1")));
    h = nc::add(h, nc::add(nc::matmul(hid, params_.get(p + "w2")),
                           params_.get(p + "b2")));
  }
  auto out = nc::add(nc::matmul(h, params_.get("out_w")), params_.get("out_b"));
  // Conditional skip: in eps space a clean-trajectory estimate enters with
  // gain -sqrt(ab)/sqrt(1-ab), so a linear map from the condition gets that
  // analytic scaling and can extrapolate to unseen object positions. The
  // gain is capped (it diverges as k -> 1) to keep per-sample losses
  // bounded; at those nearly-clean steps the residual MLP, which sees x^k
  // itself, carries the prediction anyway.
  const double ab = sched_.alpha_bar[k - 1];
  const double gain = std::min(std::sqrt(ab / (1.0 - ab)), 3.0);
  return nc::sub(out, nc::scale(nc::matmul(cond, params_.get("skip_w")), gain));
}

nc::TensorPtr DiffusionTrajectoryModel::loss(
    const std::vector<const TrainItem*>& batch, std::uint64_t seed) const {
  if (batch.empty()) throw nc::NumericError("dtm loss: empty batch");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> uk(1, cfg_.K);
  std::normal_distribution<double> gauss(0.0, 1.0);
  nc::TensorPtr total;
  for (const TrainItem* item : batch) {
    const int k = uk(rng);
    std::vector<double> x0(kTrajDim), eps(kTrajDim);
    for (int i = 0; i < data::kTrajectoryPoints; ++i) {
      x0[2 * i] = item->target.points[i][0];
      x0[2 * i + 1] = item->target.points[i][1];
    }
    for (auto& e : eps) e = gauss(rng);
    auto xk = nc::make_tensor({1, static_cast<std::size_t>(kTrajDim)},
                              forward_noise(x0, k, eps, sched_));
    auto cond = encode_condition(item->tokens, item->obs);
    auto pred = denoise(xk, k, cond);
    auto target =
        nc::make_tensor({1, static_cast<std::size_t>(kTrajDim)}, eps);
    auto l = nc::mse(pred, target);
    total = total ? nc::add(total, l) : l;
  }
  return nc::scale(total, 1.0 / static_cast<double>(batch.size()));
}

data::Trajectory2D DiffusionTrajectoryModel::sample(
    const std::vector<std::size_t>& tokens, const world::Observation& obs,
    std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto cond = encode_condition(tokens, obs);
  std::vector<double> x(kTrajDim);
  for (auto& v : x) v = gauss(rng);
  for (int k = cfg_.K; k >= 1; --k) {
    auto xk = nc::make_tensor({1, static_cast<std::size_t>(kTrajDim)}, x);
    auto eps = denoise(xk, k, cond);
    const double a_inv = 1.0 / std::sqrt(sched_.alpha[k - 1]);
    const double gamma =
        (1.0 - sched_.alpha[k - 1]) / std::sqrt(1.0 - sched_.alpha_bar[k - 1]);
    const double sig = k > 1 ? sched_.sigma[k - 1] : 0.0;
    for (int i = 0; i < kTrajDim; ++i) {
      x[i] = a_inv * (x[i] - gamma * eps->data[i]);
      if (sig > 0) x[i] += sig * gauss(rng);
      if (!std::isfinite(x[i]))
        throw nc::NumericError("dtm sample: diverged at step " +
                               std::to_string(k));
    }
  }
  data::Trajectory2D out;
  for (int i = 0; i < data::kTrajectoryPoints; ++i)
    out.points[i] = {std::clamp(x[2 * i], -1.0, 1.0),
                     std::clamp(x[2 * i + 1], -1.0, 1.0)};
  return out;
}

void DiffusionTrajectoryModel::save(
    const std::string& path,
    const std::vector<std::pair<std::string, nc::TensorPtr>>& extra) const {
  std::vector<std::pair<std::string, nc::TensorPtr>> entries;
  for (const auto& p : params_.all()) entries.emplace_back(p->name, p);
  for (const auto& e : extra) entries.push_back(e);
  nc::save_checkpoint(path, entries);
}

void DiffusionTrajectoryModel::load(const std::string& path) {
  auto loaded = nc::load_checkpoint(path);
  for (const auto& p : params_.all()) {
    auto it = loaded.find(p->name);
    if (it == loaded.end())
      throw nc::NumericError("dtm load: missing parameter " + p->name);
    if (it->second->shape != p->shape)
      throw nc::NumericError("dtm load: shape mismatch for " + p->name);
    p->data = it->second->data;
  }
}

// ---------------------------------------------------------------- training

namespace {

struct EpisodeCache {
  std::vector<std::size_t> tokens;
  world::TaskKind kind{};
  int length = 0;
};

// Moves the channel-3 blob whose intensity lies in [lo, hi) by an integer
// pixel offset, zero-filling its old footprint (max-composite on paste, like
// the renderer).
void move_band(world::Observation& obs, float lo, float hi, int dx, int dy) {
  const int n = world::Observation::kSize;
  std::vector<std::pair<int, float>> moved;
  float* ch = obs.data.data() + 3 * n * n;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const float v = ch[y * n + x];
      if (v >= lo && v < hi) {
        moved.emplace_back(y * n + x, v);
        ch[y * n + x] = 0.0f;
      }
    }
  for (const auto& [idx, v] : moved) {
    const int x = idx % n + dx, y = idx / n + dy;
    if (x >= 0 && x < n && y >= 0 && y < n)
      ch[y * n + x] = std::max(ch[y * n + x], v);
  }
}

// Translates the raster by an integer number of observation pixels,
// zero-filling the exposed border.
world::Observation shift_obs(const world::Observation& obs, int dx, int dy) {
  world::Observation out;
  out.data.assign(obs.data.size(), 0.0f);
  const int n = world::Observation::kSize;
  for (int c = 0; c < world::Observation::kChannels; ++c)
    for (int y = 0; y < n; ++y) {
      const int sy = y - dy;
      if (sy < 0 || sy >= n) continue;
      for (int x = 0; x < n; ++x) {
        const int sx = x - dx;
        if (sx < 0 || sx >= n) continue;
        out.data[(c * n + y) * n + x] = obs.at(c, sy, sx);
      }
    }
  return out;
}

data::Trajectory2D label_from_dataset(const data::Dataset& ds, std::size_t id,
                                      int anchor) {
  // labels need only the end-effector path, not the rasters
  const auto& meta = ds.manifest().episodes[id];
  data::Demonstration demo;
  demo.task = meta.task;
  demo.layout_id = meta.layout_id;
  demo.steps.resize(meta.length);
  for (int t = 0; t < static_cast<int>(meta.length); ++t)
    demo.steps[t].ee = ds.load_step(id, t).ee;
  return data::label_trajectory(demo, ds.manifest().camera, anchor);
}

}  // namespace

double train_dtm(DiffusionTrajectoryModel& model, const data::Dataset& dataset,
                 const std::vector<std::size_t>& episode_ids,
                 const TrainConfig& cfg,
                 const std::function<void(int, double)>& logger, int log_every,
                 nc::Adam* optimizer) {
  if (episode_ids.empty()) throw data::DataError("train_dtm: no episodes");
  std::vector<EpisodeCache> cache(episode_ids.size());
  // end-effector paths stay in memory; rasters are read per sample
  std::vector<std::vector<cam::Vec3>> ee_paths(episode_ids.size());
  for (std::size_t i = 0; i < episode_ids.size(); ++i) {
    const auto& meta = dataset.manifest().episodes[episode_ids[i]];
    cache[i].tokens = world::tokenize(meta.task.instruction());
    cache[i].kind = meta.task.kind;
    cache[i].length = static_cast<int>(meta.length);
    ee_paths[i].resize(meta.length);
    for (int t = 0; t < cache[i].length; ++t)
      ee_paths[i][t] = dataset.load_step(episode_ids[i], t).ee;
  }
  const auto& camera = dataset.manifest().camera;
  auto label_at = [&](std::size_t i, int anchor) {
    std::vector<cam::Vec3> pts(ee_paths[i].begin() + anchor,
                               ee_paths[i].end());
    const auto fixed = data::resample_fixed(cam::project_path(pts, camera),
                                            data::kTrajectoryPoints);
    data::Trajectory2D traj;
    traj.anchor = anchor;
    for (int p = 0; p < data::kTrajectoryPoints; ++p) {
      auto q = data::normalize(fixed[p], camera.width, camera.height);
      traj.points[p] = {std::clamp(q[0], -1.0, 1.0),
                        std::clamp(q[1], -1.0, 1.0)};
    }
    return traj;
  };

  std::unique_ptr<nc::Adam> local_opt;
  if (!optimizer) {
    nc::AdamConfig ac;
    ac.lr = cfg.lr;
    local_opt = std::make_unique<nc::Adam>(model.params().all(), ac);
    optimizer = local_opt.get();
  }
  std::mt19937_64 rng(cfg.seed ^ 0xD7u);
  double last_loss = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<TrainItem> items(cfg.batch);
    std::vector<const TrainItem*> batch(cfg.batch);
    for (int b = 0; b < cfg.batch; ++b) {
      const std::size_t i = rng() % episode_ids.size();
      // every anchor is a training item, but whole-episode trajectories are
      // both the hardest targets and the ones a fresh rollout needs first,
      // so anchor 0 gets extra weight
      const int anchor =
          rng() % 2 == 0
              ? 0
              : static_cast<int>(rng() %
                                 static_cast<std::size_t>(cache[i].length));
      items[b].tokens = cache[i].tokens;
      items[b].obs = dataset.load_step(episode_ids[i], anchor).obs;
      items[b].target = label_at(i, anchor);
      if (cfg.augment_jitter > 0) {
        // Counterfactual fixture jitter: the demonstrated path depends only
        // on the gripper, the target object and (for place) the zone, yet
        // with just three training layouts every fixture position predicts
        // every other. Independently relocating the fixtures the instruction
        // does not involve breaks those shortcuts without touching the
        // label. Bands: zone [0.1,0.3), switch [0.3,0.7), handle [0.7,0.9).
        const int span = 2 * cfg.augment_jitter + 1;
        auto jitter = [&](float lo, float hi) {
          if (rng() % 8 == 0) return;  // occasionally keep the original
          move_band(items[b].obs, lo, hi,
                    static_cast<int>(rng() % span) - cfg.augment_jitter,
                    static_cast<int>(rng() % span) - cfg.augment_jitter);
        };
        using world::TaskKind;
        const TaskKind kind = cache[i].kind;
        if (kind != TaskKind::place_block_in_zone) jitter(0.1f, 0.3f);
        if (kind != TaskKind::switch_on && kind != TaskKind::switch_off)
          jitter(0.3f, 0.7f);
        if (kind != TaskKind::slide_left && kind != TaskKind::slide_right)
          jitter(0.7f, 0.9f);
      }
      if (cfg.augment_shift > 0) {
        // Joint translation of the raster and its label puts the fixtures
        // the instruction does involve in fresh places. One observation
        // pixel spans kSize/64 camera pixels, which the normalized label
        // counts as 2/(width-1) each. Shifts that would push the path
        // outside the frame are skipped rather than clamped, so the label
        // always matches the shifted scene.
        const int span = 2 * cfg.augment_shift + 1;
        const int dx = static_cast<int>(rng() % span) - cfg.augment_shift;
        const int dy = static_cast<int>(rng() % span) - cfg.augment_shift;
        const double px = 224.0 / world::Observation::kSize;
        const double sx = 2.0 * dx * px / (camera.width - 1);
        const double sy = 2.0 * dy * px / (camera.height - 1);
        bool inside = dx != 0 || dy != 0;
        for (const auto& p : items[b].target.points)
          inside = inside && std::abs(p[0] + sx) <= 1.0 &&
                   std::abs(p[1] + sy) <= 1.0;
        if (inside) {
          items[b].obs = shift_obs(items[b].obs, dx, dy);
          for (auto& p : items[b].target.points) {
            p[0] += sx;
            p[1] += sy;
          }
        }
      }
      batch[b] = &items[b];
    }
    auto loss = model.loss(batch, rng());
    last_loss = loss->item();
    optimizer->zero_grad();
    nc::backward(loss);
    optimizer->step();
    if (logger && (step % log_every == 0 || step + 1 == cfg.steps))
      logger(step, last_loss);
  }
  return last_loss;
}

double mean_point_distance(const data::Trajectory2D& a,
                           const data::Trajectory2D& b) {
  double acc = 0.0;
  for (int i = 0; i < data::kTrajectoryPoints; ++i)
    acc += std::hypot(a.points[i][0] - b.points[i][0],
                      a.points[i][1] - b.points[i][1]);
  return acc / data::kTrajectoryPoints;
}

double eval_dtm(const DiffusionTrajectoryModel& model,
                const data::Dataset& dataset,
                const std::vector<std::size_t>& episode_ids,
                std::uint64_t seed) {
  if (episode_ids.empty()) throw data::DataError("eval_dtm: no episodes");
  double acc = 0.0;
  for (std::size_t i = 0; i < episode_ids.size(); ++i) {
    const std::size_t id = episode_ids[i];
    const auto& meta = dataset.manifest().episodes[id];
    const auto gt = label_from_dataset(dataset, id, 0);
    const auto tokens = world::tokenize(meta.task.instruction());
    const auto obs = dataset.load_step(id, 0).obs;
    const auto pred = model.sample(tokens, obs, seed + i);
    acc += mean_point_distance(pred, gt);
  }
  return acc / static_cast<double>(episode_ids.size());
}

}  // namespace tdl::dtm
