#include "tdl/dtp.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

namespace tdl::dtp {

namespace {

constexpr int kTrajDim = 2 * data::kTrajectoryPoints;  // 64
constexpr int kPatchDim = 256;
constexpr int kPatchCount = 64;
constexpr int kVideoDim = 64;
constexpr std::uint64_t kVideoProjSeed = 0x7DF00Dull;

std::vector<double> sinusoid(double pos, int d, double amp) {
  std::vector<double> e(static_cast<std::size_t>(d));
  for (int i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / d);
    e[2 * i] = amp * std::sin(pos * freq);
    e[2 * i + 1] = amp * std::cos(pos * freq);
  }
  return e;
}

nc::TensorPtr broadcast_rows(const nc::TensorPtr& row, std::size_t m) {
  auto ones = nc::make_tensor({m, 1}, std::vector<double>(m, 1.0));
  return nc::matmul(ones, row);
}

nc::TensorPtr traj_matrix(const data::Trajectory2D& traj) {
  std::vector<double> m(static_cast<std::size_t>(data::kTrajectoryPoints) * 2);
  for (int i = 0; i < data::kTrajectoryPoints; ++i) {
    m[2 * i] = traj.points[i][0];
    m[2 * i + 1] = traj.points[i][1];
  }
  return nc::make_tensor({static_cast<std::size_t>(data::kTrajectoryPoints), 2},
                         std::move(m));
}

}  // namespace

Policy::Policy(PolicyConfig cfg, std::size_t vocab_size, std::uint64_t seed)
    : cfg_(cfg) {
  if (cfg_.width % 2 != 0 || cfg_.width % cfg_.heads != 0)
    throw nc::NumericError("policy: width must be even and divisible by heads");
  std::mt19937_64 rng(seed);
  const auto w = static_cast<std::size_t>(cfg_.width);
  const double inv_sw = 1.0 / std::sqrt(static_cast<double>(w));

  params_.create("word_emb", {vocab_size, w}, rng, 0.1);
  params_.create("state_w", {4, w}, rng, 0.5);
  params_.create_zeros("state_b", {w});
  params_.create("patch_w", {kPatchDim, w}, rng, 0.05);
  params_.create_zeros("patch_b", {w});
  params_.create("pt_w", {2, w}, rng, 0.5);
  params_.create_zeros("pt_b", {w});

  for (const std::string prefix : {"obs_rs.", "traj_rs."}) {
    params_.create(prefix + "lat",
                   {static_cast<std::size_t>(prefix == "obs_rs."
                                                 ? cfg_.obs_tokens
                                                 : cfg_.traj_tokens),
                    w},
                   rng, 0.1);
    for (const std::string nm : {"wq", "wk", "wv", "wo"})
      params_.create(prefix + nm, {w, w}, rng, inv_sw);
    auto g = params_.create_zeros(prefix + "ln_g", {w});
    std::fill(g->data.begin(), g->data.end(), 1.0);
    params_.create_zeros(prefix + "ln_b", {w});
  }

  params_.create("pad", {1, w}, rng, 0.1);
  params_.create("q_traj", {1, w}, rng, 0.1);
  params_.create("q_act", {1, w}, rng, 0.1);
  params_.create("q_video", {1, w}, rng, 0.1);
  params_.create("role_emb",
                 {static_cast<std::size_t>(cfg_.tokens_per_step()), w}, rng,
                 0.1);

  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string p = "blk" + std::to_string(b) + ".";
    for (const std::string nm : {"ln1_g", "ln2_g"}) {
      auto g = params_.create_zeros(p + nm, {w});
      std::fill(g->data.begin(), g->data.end(), 1.0);
    }
    params_.create_zeros(p + "ln1_b", {w});
    params_.create_zeros(p + "ln2_b", {w});
    for (const std::string nm : {"wq", "wk", "wv"})
      params_.create(p + nm, {w, w}, rng, inv_sw);
    params_.create(p + "wo", {w, w}, rng, 0.5 * inv_sw);
    const auto f = static_cast<std::size_t>(cfg_.ffn);
    params_.create(p + "fw1", {w, f}, rng, inv_sw);
    params_.create_zeros(p + "fb1", {f});
    params_.create(p + "fw2", {f, w}, rng,
                   0.5 / std::sqrt(static_cast<double>(f)));
    params_.create_zeros(p + "fb2", {w});
  }
  auto g = params_.create_zeros("lnf_g", {w});
  std::fill(g->data.begin(), g->data.end(), 1.0);
  params_.create_zeros("lnf_b", {w});

  params_.create("head_traj", {w, kTrajDim}, rng, 0.5 * inv_sw);
  params_.create_zeros("head_traj_b", {kTrajDim});
  params_.create("head_act", {w, static_cast<std::size_t>(4 * cfg_.chunk)},
                 rng, 0.5 * inv_sw);
  params_.create_zeros("head_act_b", {static_cast<std::size_t>(4 * cfg_.chunk)});
  params_.create("head_video", {w, kVideoDim}, rng, 0.5 * inv_sw);
  params_.create_zeros("head_video_b", {kVideoDim});

  // frozen projection shared by every policy instance; never trained, so the
  // video target is stable across checkpoint save/load
  std::mt19937_64 frozen(kVideoProjSeed);
  video_proj_ = nc::randn({kPatchDim, kVideoDim}, frozen,
                          1.0 / std::sqrt(static_cast<double>(kPatchDim)));

  std::vector<double> grid(static_cast<std::size_t>(kPatchCount) * w);
  for (int p = 0; p < kPatchCount; ++p) {
    const auto row = sinusoid(p / 8, cfg_.width / 2, 0.5);
    const auto col = sinusoid(p % 8, cfg_.width / 2, 0.5);
    std::copy(row.begin(), row.end(), grid.begin() + p * cfg_.width);
    std::copy(col.begin(), col.end(),
              grid.begin() + p * cfg_.width + cfg_.width / 2);
  }
  grid_pos_ = nc::make_tensor({kPatchCount, w}, std::move(grid));

  std::vector<double> tp(static_cast<std::size_t>(data::kTrajectoryPoints) * w);
  for (int p = 0; p < data::kTrajectoryPoints; ++p) {
    const auto e = sinusoid(p, cfg_.width, 0.5);
    std::copy(e.begin(), e.end(), tp.begin() + p * cfg_.width);
  }
  traj_pos_ = nc::make_tensor(
      {static_cast<std::size_t>(data::kTrajectoryPoints), w}, std::move(tp));
}

nc::TensorPtr Policy::resample(const std::string& prefix,
                               const nc::TensorPtr& inputs) const {
  auto lat = params_.get(prefix + "lat");
  auto q = nc::matmul(lat, params_.get(prefix + "wq"));
  auto k = nc::matmul(inputs, params_.get(prefix + "wk"));
  auto v = nc::matmul(inputs, params_.get(prefix + "wv"));
  auto att = nc::softmax(nc::scale(nc::matmul(q, nc::transpose(k)),
                                   1.0 / std::sqrt(cfg_.width)));
  auto out = nc::add(
      lat, nc::matmul(nc::matmul(att, v), params_.get(prefix + "wo")));
  return nc::layer_norm(out, params_.get(prefix + "ln_g"),
                        params_.get(prefix + "ln_b"));
}

nc::TensorPtr Policy::encode_step(const StepInput& step) const {
  const auto traj_n = static_cast<std::size_t>(cfg_.traj_tokens);
  nc::TensorPtr ctx;
  if (step.padded) {
    ctx = broadcast_rows(params_.get("pad"),
                         static_cast<std::size_t>(cfg_.context_per_step()));
  } else {
    auto lang =
        nc::mean_rows(nc::embedding(params_.get("word_emb"), step.tokens));
    auto state_in = nc::make_tensor(
        {1, 4}, {step.state[0], step.state[1], step.state[2], step.state[3]});
    auto state =
        nc::add(nc::matmul(state_in, params_.get("state_w")),
                params_.get("state_b"));
    auto patches =
        nc::add(nc::add(nc::matmul(dtm::obs_patch_matrix(step.obs),
                                   params_.get("patch_w")),
                        params_.get("patch_b")),
                grid_pos_);
    auto obs_tok = resample("obs_rs.", patches);
    nc::TensorPtr traj_tok;
    if (cfg_.use_trajectory) {
      auto pts = nc::add(
          nc::add(nc::matmul(traj_matrix(step.traj), params_.get("pt_w")),
                  params_.get("pt_b")),
          traj_pos_);
      traj_tok = resample("traj_rs.", pts);
    } else {
      traj_tok = broadcast_rows(params_.get("pad"), traj_n);
    }
    ctx = nc::concat({lang, state, obs_tok, traj_tok}, 0);
  }
  auto full = nc::concat(
      {ctx, params_.get("q_traj"), params_.get("q_act"), params_.get("q_video")},
      0);
  full = nc::add(full, params_.get("role_emb"));
  auto pos = nc::make_tensor({1, static_cast<std::size_t>(cfg_.width)},
                             sinusoid(step.step_index, cfg_.width, 0.5));
  return nc::add(full, pos);
}

const nc::TensorPtr& Policy::mask(bool block_traj_to_action) const {
  auto& cached = block_traj_to_action ? mask_blocked_ : mask_;
  if (cached) return cached;
  const int tps = cfg_.tokens_per_step();
  const int cps = cfg_.context_per_step();
  const int total = cfg_.h * tps;
  const int traj_lo = 2 + cfg_.obs_tokens;        // first trajectory token
  const int traj_hi = traj_lo + cfg_.traj_tokens;  // one past the last
  std::vector<double> m(static_cast<std::size_t>(total) * total, -1e9);
  for (int i = 0; i < total; ++i) {
    const int si = i / tps;
    for (int j = 0; j < total; ++j) {
      const int sj = j / tps, tj = j % tps;
      bool ok;
      if (tj >= cps) {
        ok = j == i;  // queries attend to themselves, never to each other
      } else {
        ok = sj <= si;
      }
      if (block_traj_to_action && i % tps == cps + 1 && tj >= traj_lo &&
          tj < traj_hi)
        ok = false;
      if (ok) m[static_cast<std::size_t>(i) * total + j] = 0.0;
    }
  }
  cached = nc::make_tensor({static_cast<std::size_t>(total),
                            static_cast<std::size_t>(total)},
                           std::move(m));
  return cached;
}

Policy::ForwardResult Policy::forward_window(
    const std::vector<StepInput>& steps, bool block_traj_to_action) const {
  if (static_cast<int>(steps.size()) != cfg_.h)
    throw nc::NumericError("policy forward: window must hold exactly " +
                           std::to_string(cfg_.h) + " steps");
  std::vector<nc::TensorPtr> rows;
  rows.reserve(steps.size());
  for (const auto& s : steps) rows.push_back(encode_step(s));
  auto x = nc::concat(rows, 0);

  const auto& msk = mask(block_traj_to_action);
  const int dh = cfg_.width / cfg_.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string p = "blk" + std::to_string(b) + ".";
    auto xn = nc::layer_norm(x, params_.get(p + "ln1_g"),
                             params_.get(p + "ln1_b"));
    auto q = nc::matmul(xn, params_.get(p + "wq"));
    auto k = nc::matmul(xn, params_.get(p + "wk"));
    auto v = nc::matmul(xn, params_.get(p + "wv"));
    std::vector<nc::TensorPtr> heads;
    heads.reserve(cfg_.heads);
    for (int hh = 0; hh < cfg_.heads; ++hh) {
      const std::size_t lo = static_cast<std::size_t>(hh) * dh, hi = lo + dh;
      auto scores = nc::add(
          nc::scale(nc::matmul(nc::slice(q, 1, lo, hi),
                               nc::transpose(nc::slice(k, 1, lo, hi))),
                    att_scale),
          msk);
      heads.push_back(nc::matmul(nc::softmax(scores), nc::slice(v, 1, lo, hi)));
    }
    x = nc::add(x, nc::matmul(nc::concat(heads, 1), params_.get(p + "wo")));
    auto xn2 = nc::layer_norm(x, params_.get(p + "ln2_g"),
                              params_.get(p + "ln2_b"));
    auto hid = nc::gelu(nc::add(nc::matmul(xn2, params_.get(p + "fw1")),
                                params_.get(p + "fb1")));
    x = nc::add(x, nc::add(nc::matmul(hid, params_.get(p + "fw2")),
                           params_.get(p + "fb2")));
  }
  x = nc::layer_norm(x, params_.get("lnf_g"), params_.get("lnf_b"));

  ForwardResult out;
  const int tps = cfg_.tokens_per_step();
  const int cps = cfg_.context_per_step();
  for (int s = 0; s < cfg_.h; ++s) {
    const auto base = static_cast<std::size_t>(s) * tps + cps;
    auto read = [&](int off, const char* head, const char* bias) {
      return nc::add(
          nc::matmul(nc::slice(x, 0, base + off, base + off + 1),
                     params_.get(head)),
          params_.get(bias));
    };
    out.traj_out.push_back(read(0, "head_traj", "head_traj_b"));
    out.act_out.push_back(read(1, "head_act", "head_act_b"));
    out.video_out.push_back(read(2, "head_video", "head_video_b"));
  }
  return out;
}

PolicyOutput Policy::forward(const std::vector<StepInput>& steps,
                             bool block_traj_to_action) const {
  return decode(forward_window(steps, block_traj_to_action), cfg_.h - 1);
}

LossParts Policy::loss(const ForwardResult& out,
                       const std::vector<StepTargets>& targets) const {
  if (static_cast<int>(targets.size()) != cfg_.h)
    throw nc::NumericError("policy loss: need one target slot per step");
  const int c3 = 3 * cfg_.chunk;
  nc::TensorPtr lt_sum, la_sum, lv_sum;
  auto acc = [](nc::TensorPtr& sum, const nc::TensorPtr& term) {
    sum = sum ? nc::add(sum, term) : term;
  };
  int n = 0;
  for (int s = 0; s < cfg_.h; ++s) {
    const auto& tgt = targets[s];
    if (!tgt.valid) continue;
    ++n;
    if (cfg_.use_trajectory) {
      std::vector<double> t(kTrajDim);
      for (int i = 0; i < data::kTrajectoryPoints; ++i) {
        t[2 * i] = tgt.traj.points[i][0];
        t[2 * i + 1] = tgt.traj.points[i][1];
      }
      acc(lt_sum, nc::mse(out.traj_out[s],
                          nc::make_tensor({1, kTrajDim}, std::move(t))));
    }
    if (static_cast<int>(tgt.action_chunk.size()) != cfg_.chunk)
      throw nc::NumericError("policy loss: action chunk size mismatch");
    std::vector<double> xyz(static_cast<std::size_t>(c3));
    std::vector<double> grip(static_cast<std::size_t>(cfg_.chunk));
    for (int c = 0; c < cfg_.chunk; ++c) {
      for (int j = 0; j < 3; ++j)
        xyz[3 * c + j] = tgt.action_chunk[c][j] / world::kActionClip;
      grip[c] = tgt.action_chunk[c][3];
    }
    auto act = out.act_out[s];
    acc(la_sum,
        nc::add(nc::mse(nc::slice(act, 1, 0, c3),
                        nc::make_tensor({1, static_cast<std::size_t>(c3)},
                                        std::move(xyz))),
                nc::bce_with_logits(
                    nc::slice(act, 1, c3, c3 + cfg_.chunk),
                    nc::make_tensor({1, static_cast<std::size_t>(cfg_.chunk)},
                                    std::move(grip)))));
    if (tgt.video_feature.size() != kVideoDim)
      throw nc::NumericError("policy loss: video feature size mismatch");
    acc(lv_sum, nc::mse(out.video_out[s],
                        nc::make_tensor({1, kVideoDim}, tgt.video_feature)));
  }
  if (n == 0) throw nc::NumericError("policy loss: no valid target steps");
  LossParts parts;
  const double inv = 1.0 / n;
  nc::TensorPtr total;
  for (const auto& sum : {lt_sum, la_sum, lv_sum})
    if (sum) total = total ? nc::add(total, sum) : sum;
  parts.total = nc::scale(total, inv);
  parts.trajectory = lt_sum ? lt_sum->item() * inv : 0.0;
  parts.action = la_sum ? la_sum->item() * inv : 0.0;
  parts.video = lv_sum ? lv_sum->item() * inv : 0.0;
  return parts;
}

std::vector<double> Policy::video_feature(const world::Observation& obs) const {
  nc::NoGradGuard guard;
  auto v = nc::mean_rows(nc::matmul(dtm::obs_patch_matrix(obs), video_proj_));
  return v->data;
}

PolicyOutput Policy::decode(const ForwardResult& out, int step) const {
  if (step < 0 || step >= cfg_.h)
    throw nc::NumericError("policy decode: step index out of range");
  PolicyOutput o;
  const auto& tr = out.traj_out[step]->data;
  for (int i = 0; i < data::kTrajectoryPoints; ++i)
    o.trajectory.points[i] = {tr[2 * i], tr[2 * i + 1]};
  const auto& ac = out.act_out[step]->data;
  const int c3 = 3 * cfg_.chunk;
  o.actions.resize(cfg_.chunk);
  for (int c = 0; c < cfg_.chunk; ++c) {
    for (int j = 0; j < 3; ++j)
      o.actions[c][j] = ac[3 * c + j] * world::kActionClip;
    o.actions[c][3] = ac[c3 + c];  // gripper logit, sign decides
  }
  const auto& vd = out.video_out[step]->data;
  std::copy(vd.begin(), vd.end(), o.video.begin());
  return o;
}

void Policy::save(
    const std::string& path,
    const std::vector<std::pair<std::string, nc::TensorPtr>>& extra) const {
  std::vector<std::pair<std::string, nc::TensorPtr>> entries;
  for (const auto& p : params_.all()) entries.emplace_back(p->name, p);
  for (const auto& e : extra) entries.push_back(e);
  nc::save_checkpoint(path, entries);
}

void Policy::load(const std::string& path) {
  auto loaded = nc::load_checkpoint(path);
  for (const auto& p : params_.all()) {
    auto it = loaded.find(p->name);
    if (it == loaded.end())
      throw nc::NumericError("policy load: missing parameter " + p->name);
    if (it->second->shape != p->shape)
      throw nc::NumericError("policy load: shape mismatch for " + p->name);
    p->data = it->second->data;
  }
}

nc::TensorPtr resample_tokens(const Policy& policy,
                              const data::Trajectory2D& traj) {
  auto pts = nc::add(
      nc::add(nc::matmul(traj_matrix(traj), policy.params_.get("pt_w")),
              policy.params_.get("pt_b")),
      policy.traj_pos_);
  return policy.resample("traj_rs.", pts);
}

world::Action temporal_ensemble(const std::vector<ChunkRecord>& chunks,
                                int current_step, double decay) {
  double wsum = 0, dx = 0, dy = 0, dz = 0, close_w = 0, open_w = 0;
  for (const auto& rec : chunks) {
    const int idx = current_step - rec.birth_step;
    if (idx < 0 || idx >= static_cast<int>(rec.actions.size())) continue;
    const double w = std::exp(-decay * idx);
    const auto& a = rec.actions[static_cast<std::size_t>(idx)];
    wsum += w;
    dx += w * a[0];
    dy += w * a[1];
    dz += w * a[2];
    (a[3] > 0 ? close_w : open_w) += w;
  }
  world::Action act;
  if (wsum > 0) {
    act.dx = dx / wsum;
    act.dy = dy / wsum;
    act.dz = dz / wsum;
    act.close = close_w > open_w;
  }
  return act;
}

// ------------------------------------------------------------------- agent

DtpAgent::DtpAgent(const Policy& policy,
                   const dtm::DiffusionTrajectoryModel* dtm,
                   const cam::CameraParams& camera, std::uint64_t seed)
    : policy_(policy), dtm_(dtm), camera_(camera), rng_(seed) {}

void DtpAgent::replan(const world::WorldState& state,
                      const world::Observation& obs) {
  (void)state;
  current_traj_ = dtm_->sample(tokens_, obs, rng_());
  steps_since_replan_ = 0;
}

void DtpAgent::start_task(const world::WorldState& state,
                          const world::TaskSpec& task) {
  history_.clear();
  chunk_history_.clear();
  step_counter_ = 0;
  steps_since_replan_ = 0;
  current_traj_ = data::Trajectory2D{};
  tokens_ = world::tokenize(task.instruction());
  if (dtm_) replan(state, world::render_features(state, camera_));
}

world::Action DtpAgent::act(const world::WorldState& state,
                            const world::TaskSpec& task) {
  (void)task;
  auto obs = world::render_features(state, camera_);
  const int replan_every = policy_.config().replan;
  if (dtm_ && replan_every > 0 && steps_since_replan_ >= replan_every)
    replan(state, obs);

  StepInput in;
  in.tokens = tokens_;
  in.obs = std::move(obs);
  in.state = {state.gx, state.gy, state.gz,
              state.gripper_closed ? 1.0 : 0.0};
  in.traj = current_traj_;
  in.step_index = step_counter_;
  history_.push_back(std::move(in));
  const int h = policy_.config().h;
  while (static_cast<int>(history_.size()) > h) history_.pop_front();

  std::vector<StepInput> window;
  window.reserve(static_cast<std::size_t>(h));
  for (int i = static_cast<int>(history_.size()); i < h; ++i) {
    StepInput pad;
    pad.padded = true;
    window.push_back(std::move(pad));
  }
  window.insert(window.end(), history_.begin(), history_.end());

  nc::NoGradGuard guard;
  const auto out = policy_.forward(window);

  world::Action act;
  if (policy_.config().chunk == 1) {
    act.dx = out.actions[0][0];
    act.dy = out.actions[0][1];
    act.dz = out.actions[0][2];
    act.close = out.actions[0][3] > 0;
  } else {
    chunk_history_.push_back({step_counter_, out.actions});
    while (!chunk_history_.empty() &&
           chunk_history_.front().birth_step + policy_.config().chunk <=
               step_counter_)
      chunk_history_.erase(chunk_history_.begin());
    act = temporal_ensemble(chunk_history_, step_counter_);
  }
  ++step_counter_;
  ++steps_since_replan_;
  return act;
}

// ---------------------------------------------------------------- training

namespace {

struct PolicyEpisodeCache {
  std::vector<std::size_t> tokens;
  int length = 0;
  std::vector<std::array<double, 4>> states, actions;
  std::vector<cam::Vec3> ee;
};

}  // namespace

double train_policy(Policy& policy, const data::Dataset& dataset,
                    const std::vector<std::size_t>& episode_ids,
                    const TrainPolicyConfig& cfg,
                    const std::function<void(int, double)>& logger,
                    int log_every, nc::Adam* optimizer) {
  if (episode_ids.empty()) throw data::DataError("train_policy: no episodes");
  const auto& camera = dataset.manifest().camera;
  const int h = policy.config().h;
  const int chunk = policy.config().chunk;

  std::vector<PolicyEpisodeCache> cache(episode_ids.size());
  for (std::size_t i = 0; i < episode_ids.size(); ++i) {
    const auto& meta = dataset.manifest().episodes[episode_ids[i]];
    auto& c = cache[i];
    c.tokens = world::tokenize(meta.task.instruction());
    c.length = static_cast<int>(meta.length);
    c.states.resize(meta.length);
    c.actions.resize(meta.length);
    c.ee.resize(meta.length);
    for (int t = 0; t < c.length; ++t) {
      auto rec = dataset.load_step(episode_ids[i], t);
      c.states[t] = rec.state;
      c.actions[t] = rec.action;
      c.ee[t] = rec.ee;
    }
    if (c.length < 2)
      throw data::DataError("train_policy: episode too short to supervise");
  }

  auto label_at = [&](std::size_t i, int anchor) {
    std::vector<cam::Vec3> pts(cache[i].ee.begin() + anchor,
                               cache[i].ee.end());
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
    local_opt = std::make_unique<nc::Adam>(policy.params().all(), ac);
    optimizer = local_opt.get();
  }

  std::mt19937_64 rng(cfg.seed ^ 0xD7Bu);
  double last_loss = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    nc::TensorPtr batch_loss;
    for (int b = 0; b < cfg.batch; ++b) {
      const std::size_t i = rng() % episode_ids.size();
      const auto& c = cache[i];
      const int t =
          static_cast<int>(rng() % static_cast<std::size_t>(c.length - 1));
      std::vector<StepInput> window(static_cast<std::size_t>(h));
      std::vector<StepTargets> targets(static_cast<std::size_t>(h));
      // obs rasters for steps t-h+1 .. t+1; the extra one feeds video targets
      std::vector<world::Observation> rasters(static_cast<std::size_t>(h) + 1);
      for (int s = t - h + 1; s <= t + 1; ++s)
        if (s >= 0)
          rasters[static_cast<std::size_t>(s - (t - h + 1))] =
              dataset.load_step(episode_ids[i], s).obs;
      for (int w = 0; w < h; ++w) {
        const int s = t - h + 1 + w;
        auto& in = window[static_cast<std::size_t>(w)];
        if (s < 0) {
          in.padded = true;
          continue;
        }
        in.tokens = c.tokens;
        in.obs = rasters[static_cast<std::size_t>(w)];
        in.state = c.states[static_cast<std::size_t>(s)];
        // teacher forcing: the trajectory channel is always the dataset label
        in.traj = label_at(i, s);
        in.step_index = s;
        auto& tgt = targets[static_cast<std::size_t>(w)];
        tgt.valid = true;
        tgt.traj = in.traj;
        tgt.action_chunk.resize(static_cast<std::size_t>(chunk));
        for (int ce = 0; ce < chunk; ++ce)
          tgt.action_chunk[static_cast<std::size_t>(ce)] =
              c.actions[static_cast<std::size_t>(
                  std::min(s + ce, c.length - 1))];
        tgt.video_feature =
            policy.video_feature(rasters[static_cast<std::size_t>(w) + 1]);
      }
      auto parts = policy.loss(policy.forward_window(window), targets);
      batch_loss =
          batch_loss ? nc::add(batch_loss, parts.total) : parts.total;
    }
    auto loss = nc::scale(batch_loss, 1.0 / cfg.batch);
    last_loss = loss->item();
    optimizer->zero_grad();
    nc::backward(loss);
    optimizer->step();
    if (logger && (step % log_every == 0 || step + 1 == cfg.steps))
      logger(step, last_loss);
  }
  return last_loss;
}

}  // namespace tdl::dtp
