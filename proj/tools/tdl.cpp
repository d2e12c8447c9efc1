#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "tdl/camera.hpp"
#include "tdl/config.hpp"
#include "tdl/data.hpp"
#include "tdl/dtm.hpp"
#include "tdl/dtp.hpp"
#include "tdl/eval.hpp"
#include "tdl/tensor.hpp"
#include "tdl/world.hpp"

namespace fs = std::filesystem;
using namespace tdl;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

int worker_threads() {
  const char* env = std::getenv("TDL_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return std::max(1, n);
}

void write_resolved_config(const config::RunConfig& cfg,
                           const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir + "/config.resolved");
  if (!os)
    throw data::DataError("cannot write " + out_dir + "/config.resolved");
  config::dump_config(cfg, os);
}

// ----------------------------------------------------------------- gen-data

int cmd_gen_data(const config::RunConfig& cfg, const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  const auto camera = cam::default_camera();
  const std::string path = out_dir + "/" + cfg.data_path;
  data::DatasetWriter writer(path, camera);

  struct Spec {
    world::TaskSpec task;
    int layout = 0;
    std::uint64_t base_seed = 0;
  };
  std::vector<Spec> specs;
  for (int kind = 0; kind < world::kNumTaskKinds; ++kind)
    for (int layout = 0; layout < world::kNumLayouts; ++layout)
      for (int ep = 0; ep < cfg.data_episodes_per_task_layout; ++ep) {
        Spec s;
        s.task.kind = static_cast<world::TaskKind>(kind);
        if (s.task.kind == world::TaskKind::grasp_block ||
            s.task.kind == world::TaskKind::place_block_in_zone)
          s.task.color = ep % world::kNumColors;
        s.layout = layout;
        s.base_seed = mix(cfg.seed, (kind * 97ull + layout) * 131071ull + ep);
        specs.push_back(s);
      }

  const int threads = worker_threads();
  std::int64_t attempts = 0, discards = 0, total_steps = 0;
  std::map<std::string, int> fail_reasons;
  constexpr int kMaxAttempts = 20;

  auto record_one = [&camera](const Spec& s, int* tries,
                              std::string* last_fail)
      -> std::optional<data::Demonstration> {
    for (int a = 0; a < kMaxAttempts; ++a) {
      ++*tries;
      std::string reason;
      auto demo = data::record_demo(s.task, mix(s.base_seed, a), s.layout,
                                    camera, &reason);
      if (demo) return demo;
      *last_fail = reason;
    }
    return std::nullopt;
  };

  for (std::size_t lo = 0; lo < specs.size();
       lo += static_cast<std::size_t>(threads)) {
    const std::size_t hi =
        std::min(specs.size(), lo + static_cast<std::size_t>(threads));
    std::vector<std::optional<data::Demonstration>> demos(hi - lo);
    std::vector<int> tries(hi - lo, 0);
    std::vector<std::string> fails(hi - lo);
    if (threads == 1) {
      demos[0] = record_one(specs[lo], &tries[0], &fails[0]);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t i = lo; i < hi; ++i)
        pool.emplace_back([&, i] {
          demos[i - lo] = record_one(specs[i], &tries[i - lo], &fails[i - lo]);
        });
      for (auto& t : pool) t.join();
    }
    for (std::size_t i = lo; i < hi; ++i) {
      attempts += tries[i - lo];
      discards += tries[i - lo] - (demos[i - lo] ? 1 : 0);
      if (!demos[i - lo]) {
        std::cerr << "gen-data: giving up on " << specs[i].task.instruction()
                  << " layout " << specs[i].layout << ": " << fails[i - lo]
                  << "\n";
        ++fail_reasons[fails[i - lo]];
        continue;
      }
      if (!fails[i - lo].empty()) ++fail_reasons[fails[i - lo]];
      total_steps += demos[i - lo]->length();
      writer.add(*demos[i - lo]);
    }
    if (attempts > 50 &&
        static_cast<double>(discards) > 0.10 * static_cast<double>(attempts)) {
      std::cerr << "gen-data: expert failure rate "
                << 100.0 * discards / attempts << "% exceeds 10%; aborting\n";
      for (const auto& [reason, n] : fail_reasons)
        std::cerr << "  " << n << "x " << reason << "\n";
      return 2;
    }
  }
  writer.finalize();
  std::cout << "gen-data: wrote " << writer.count() << " episodes, "
            << total_steps << " steps, " << discards << " discards ("
            << attempts << " attempts) to " << path << "\n";
  return 0;
}

// ----------------------------------------------------------------- training

data::Split make_split(const config::RunConfig& cfg,
                       const data::Dataset& dataset) {
  data::SplitSpec spec;
  if (cfg.split_scheme == "seen")
    spec.scheme = data::SplitScheme::seen;
  else if (cfg.split_scheme == "unseen")
    spec.scheme = data::SplitScheme::unseen;
  else if (cfg.split_scheme == "fraction")
    spec.scheme = data::SplitScheme::fraction;
  else
    throw data::DataError("unknown split.scheme '" + cfg.split_scheme + "'");
  spec.fraction = cfg.split_fraction;
  return data::split(dataset.manifest(), spec, cfg.seed);
}

// Optimizer state rides along in the checkpoint so resumed runs continue
// with matching step count and moments.
void save_with_optimizer(const std::function<void(
                             const std::string&,
                             const std::vector<std::pair<std::string,
                                                         nc::TensorPtr>>&)>&
                             save_model,
                         const nc::Adam& opt, const std::string& path) {
  std::vector<std::pair<std::string, nc::TensorPtr>> extra;
  extra.emplace_back("opt.step",
                     nc::scalar(static_cast<double>(opt.step_count())));
  auto& mut = const_cast<nc::Adam&>(opt);
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const auto& p = opt.params()[i];
    extra.emplace_back("opt.m." + p->name,
                       nc::make_tensor(p->shape, mut.moment1(i)));
    extra.emplace_back("opt.v." + p->name,
                       nc::make_tensor(p->shape, mut.moment2(i)));
  }
  const std::string tmp = path + ".tmp";
  save_model(tmp, extra);
  fs::rename(tmp, path);
}

// Returns the training step to resume from (opt.step of the checkpoint).
int load_optimizer(nc::Adam& opt, const std::string& path) {
  auto loaded = nc::load_checkpoint(path);
  auto it = loaded.find("opt.step");
  if (it == loaded.end())
    throw data::DataError("checkpoint " + path + " has no optimizer state");
  opt.set_step_count(static_cast<std::int64_t>(it->second->item()));
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const auto& p = opt.params()[i];
    for (const auto& [key, dst] :
         {std::pair{"opt.m." + p->name, &opt.moment1(i)},
          std::pair{"opt.v." + p->name, &opt.moment2(i)}}) {
      auto jt = loaded.find(key);
      if (jt == loaded.end())
        throw data::DataError("checkpoint missing " + key);
      *dst = jt->second->data;
    }
  }
  return static_cast<int>(opt.step_count());
}

template <typename TrainChunk, typename SaveModel>
int run_training(const config::RunConfig& cfg, const std::string& out_dir,
                 const std::string& ckpt_name, const std::string& csv_name,
                 int total_steps, nc::Adam& opt, TrainChunk train_chunk,
                 SaveModel save_model, int resume_step) {
  const std::string ckpt = out_dir + "/" + ckpt_name;
  std::ofstream csv(out_dir + "/" + csv_name,
                    resume_step > 0 ? std::ios::app : std::ios::trunc);
  if (resume_step == 0) csv << "step,loss\n";
  const int cadence = std::max(1, cfg.checkpoint_every);
  int step = resume_step;
  double last = 0.0;
  while (step < total_steps) {
    const int chunk = std::min(cadence - step % cadence, total_steps - step);
    last = train_chunk(step, chunk, [&](int local, double loss) {
      csv << step + local << ',' << loss << '\n';
    });
    step += chunk;
    save_with_optimizer(save_model, opt, ckpt);
    std::cout << ckpt_name << ": step " << step << "/" << total_steps
              << " loss " << last << "\n";
  }
  std::cout << "final loss " << last << "; checkpoint at " << ckpt << "\n";
  return 0;
}

int cmd_train_dtm(const config::RunConfig& cfg, const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  auto dataset = data::Dataset::open(cfg.data_path);
  const auto split = make_split(cfg, dataset);
  dtm::DtmConfig mc;
  mc.K = cfg.dtm_k;
  mc.beta_min = cfg.dtm_beta_min;
  mc.beta_max = cfg.dtm_beta_max;
  mc.cond_width = cfg.dtm_cond_width;
  mc.hidden = cfg.dtm_hidden;
  mc.time_dim = cfg.dtm_time_dim;
  mc.blocks = cfg.dtm_blocks;
  dtm::DiffusionTrajectoryModel model(mc, dataset.manifest().vocab.size(),
                                      cfg.seed);
  nc::AdamConfig ac;
  ac.lr = cfg.dtm_lr;
  nc::Adam opt(model.params().all(), ac);
  int resume_step = 0;
  const std::string ckpt = out_dir + "/dtm.ckpt";
  if (cfg.resume && fs::exists(ckpt)) {
    model.load(ckpt);
    resume_step = load_optimizer(opt, ckpt);
    std::cout << "resuming from step " << resume_step << "\n";
  }
  return run_training(
      cfg, out_dir, "dtm.ckpt", "loss_dtm.csv", cfg.dtm_steps, opt,
      [&](int start, int chunk, const std::function<void(int, double)>& log) {
        dtm::TrainConfig tc;
        tc.steps = chunk;
        tc.batch = cfg.dtm_batch;
        tc.lr = cfg.dtm_lr;
        tc.augment_shift = cfg.dtm_augment_shift;
        tc.augment_jitter = cfg.dtm_augment_jitter;
        tc.seed = mix(cfg.seed, 0xD7ull * 1000 + start);
        return dtm::train_dtm(model, dataset, split.train, tc, log, 100,
                              &opt);
      },
      [&](const std::string& path, const auto& extra) {
        model.save(path, extra);
      },
      resume_step);
}

dtp::PolicyConfig policy_config(const config::RunConfig& cfg) {
  dtp::PolicyConfig pc;
  pc.h = cfg.policy_h;
  pc.width = cfg.policy_width;
  pc.blocks = cfg.policy_blocks;
  pc.heads = cfg.policy_heads;
  pc.ffn = cfg.policy_ffn;
  pc.obs_tokens = cfg.policy_obs_tokens;
  pc.traj_tokens = cfg.policy_traj_tokens;
  pc.chunk = cfg.policy_chunk;
  pc.replan = cfg.policy_replan;
  pc.use_trajectory = cfg.policy_use_trajectory;
  return pc;
}

int cmd_train_policy(const config::RunConfig& cfg,
                     const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  auto dataset = data::Dataset::open(cfg.data_path);
  const auto split = make_split(cfg, dataset);
  dtp::Policy policy(policy_config(cfg), dataset.manifest().vocab.size(),
                     cfg.seed);
  nc::AdamConfig ac;
  ac.lr = cfg.policy_lr;
  nc::Adam opt(policy.params().all(), ac);
  int resume_step = 0;
  const std::string ckpt = out_dir + "/policy.ckpt";
  if (cfg.resume && fs::exists(ckpt)) {
    policy.load(ckpt);
    resume_step = load_optimizer(opt, ckpt);
    std::cout << "resuming from step " << resume_step << "\n";
  }
  return run_training(
      cfg, out_dir, "policy.ckpt", "loss_policy.csv", cfg.policy_steps, opt,
      [&](int start, int chunk, const std::function<void(int, double)>& log) {
        dtp::TrainPolicyConfig tc;
        tc.steps = chunk;
        tc.batch = cfg.policy_batch;
        tc.lr = cfg.policy_lr;
        tc.seed = mix(cfg.seed, 0xD7Bull * 1000 + start);
        return dtp::train_policy(policy, dataset, split.train, tc, log, 50,
                                 &opt);
      },
      [&](const std::string& path, const auto& extra) {
        policy.save(path, extra);
      },
      resume_step);
}

// --------------------------------------------------------------------- eval

int cmd_eval(const config::RunConfig& cfg, const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  cam::CameraParams camera = cam::default_camera();
  std::size_t vocab_size = world::vocabulary().size();
  if (fs::exists(cfg.data_path)) {
    auto dataset = data::Dataset::open(cfg.data_path);
    camera = dataset.manifest().camera;
    vocab_size = dataset.manifest().vocab.size();
  }

  std::unique_ptr<eval::Agent> agent;
  std::unique_ptr<dtp::Policy> policy;
  std::unique_ptr<dtm::DiffusionTrajectoryModel> model;
  std::string fingerprint = cfg.eval_agent;
  if (cfg.eval_agent == "expert") {
    agent = std::make_unique<eval::ExpertAgent>();
  } else if (cfg.eval_agent == "random") {
    agent = std::make_unique<eval::RandomAgent>(cfg.seed);
  } else if (cfg.eval_agent == "policy") {
    if (cfg.policy_checkpoint.empty() || !fs::exists(cfg.policy_checkpoint))
      throw data::DataError("eval: policy checkpoint not found: '" +
                            cfg.policy_checkpoint + "'");
    policy = std::make_unique<dtp::Policy>(policy_config(cfg), vocab_size,
                                           cfg.seed);
    policy->load(cfg.policy_checkpoint);
    fingerprint += ":" + cfg.policy_checkpoint;
    if (cfg.policy_use_trajectory) {
      if (cfg.dtm_checkpoint.empty() || !fs::exists(cfg.dtm_checkpoint))
        throw data::DataError("eval: dtm checkpoint not found: '" +
                              cfg.dtm_checkpoint + "'");
      dtm::DtmConfig mc;
      mc.K = cfg.dtm_k;
      mc.beta_min = cfg.dtm_beta_min;
      mc.beta_max = cfg.dtm_beta_max;
      mc.cond_width = cfg.dtm_cond_width;
      mc.hidden = cfg.dtm_hidden;
      mc.time_dim = cfg.dtm_time_dim;
      mc.blocks = cfg.dtm_blocks;
      model = std::make_unique<dtm::DiffusionTrajectoryModel>(mc, vocab_size,
                                                              cfg.seed);
      model->load(cfg.dtm_checkpoint);
      fingerprint += "+" + cfg.dtm_checkpoint;
    }
    agent = std::make_unique<dtp::DtpAgent>(*policy, model.get(), camera,
                                            cfg.seed);
  } else {
    throw data::DataError("eval: unknown agent '" + cfg.eval_agent + "'");
  }

  std::ofstream csv(out_dir + "/chains.csv");
  auto report = eval::run_chains(*agent, cfg.eval_chains, cfg.eval_layout,
                                 cfg.seed, cfg.eval_max_steps, &csv);
  report.config_fingerprint = fingerprint;

  std::ofstream txt(out_dir + "/report.txt");
  for (std::ostream* os : {static_cast<std::ostream*>(&txt), &std::cout}) {
    *os << "config: " << report.config_fingerprint << "\n"
        << "chains: " << report.counts.size() << " (layout "
        << cfg.eval_layout << ")\n";
    for (int i = 0; i < 5; ++i)
      *os << "  r_" << i + 1 << " = " << report.rates[i] << "\n";
    *os << "avg len: " << report.avg_len << "\n";
  }
  return 0;
}

// --------------------------------------------------------------------- plot

void write_ppm(const std::string& path, const std::vector<unsigned char>& rgb,
               int w, int h) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data::DataError("plot: cannot write " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), rgb.size());
}

void draw_polyline(std::vector<unsigned char>& rgb, int w, int h,
                   const std::vector<cam::Pixel>& pts, unsigned char r,
                   unsigned char g, unsigned char b) {
  auto plot = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    auto* p = &rgb[(static_cast<std::size_t>(y) * w + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  };
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const double x0 = pts[i][0], y0 = pts[i][1];
    const double x1 = pts[i + 1][0], y1 = pts[i + 1][1];
    const int n =
        std::max(1, static_cast<int>(std::ceil(
                        std::max(std::abs(x1 - x0), std::abs(y1 - y0)))));
    for (int s = 0; s <= n; ++s) {
      const double t = static_cast<double>(s) / n;
      plot(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
           static_cast<int>(std::lround(y0 + t * (y1 - y0))));
    }
  }
}

int cmd_plot(const config::RunConfig& cfg, const std::string& out_dir) {
  write_resolved_config(cfg, out_dir);
  auto dataset = data::Dataset::open(cfg.data_path);
  if (cfg.plot_episode < 0 ||
      static_cast<std::size_t>(cfg.plot_episode) >= dataset.count())
    throw data::DataError("plot: episode id out of range");
  const std::size_t ep = static_cast<std::size_t>(cfg.plot_episode);
  const auto& camera = dataset.manifest().camera;
  const int W = camera.width, H = camera.height;

  // background: the 64x64 feature raster upsampled to camera resolution
  const auto obs = dataset.load_step(ep, 0).obs;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(W) * H * 3, 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int oy = y * world::Observation::kSize / H;
      const int ox = x * world::Observation::kSize / W;
      const double fx = obs.at(3, oy, ox) * 90.0;
      auto* p = &rgb[(static_cast<std::size_t>(y) * W + x) * 3];
      p[0] = static_cast<unsigned char>(
          std::min(255.0, obs.at(0, oy, ox) * 200.0 + fx));
      p[1] = static_cast<unsigned char>(
          std::min(255.0, obs.at(2, oy, ox) * 200.0 + fx));
      p[2] = static_cast<unsigned char>(
          std::min(255.0, obs.at(1, oy, ox) * 200.0 + fx));
    }

  auto to_pixels = [&](const data::Trajectory2D& traj) {
    std::vector<cam::Pixel> pts(data::kTrajectoryPoints);
    for (int i = 0; i < data::kTrajectoryPoints; ++i)
      pts[i] = data::denormalize(traj.points[i], W, H);
    return pts;
  };

  const auto demo = dataset.load_episode(ep);
  const auto gt = data::label_trajectory(demo, camera, 0);
  draw_polyline(rgb, W, H, to_pixels(gt), 255, 220, 0);

  if (!cfg.dtm_checkpoint.empty()) {
    if (!fs::exists(cfg.dtm_checkpoint))
      throw data::DataError("plot: dtm checkpoint not found: " +
                            cfg.dtm_checkpoint);
    dtm::DtmConfig mc;
    mc.K = cfg.dtm_k;
    mc.beta_min = cfg.dtm_beta_min;
    mc.beta_max = cfg.dtm_beta_max;
    mc.cond_width = cfg.dtm_cond_width;
    mc.hidden = cfg.dtm_hidden;
    mc.time_dim = cfg.dtm_time_dim;
    mc.blocks = cfg.dtm_blocks;
    dtm::DiffusionTrajectoryModel model(
        mc, dataset.manifest().vocab.size(), cfg.seed);
    model.load(cfg.dtm_checkpoint);
    const auto tokens =
        world::tokenize(dataset.manifest().episodes[ep].task.instruction());
    const unsigned char palette[][3] = {
        {0, 255, 255}, {255, 0, 255}, {120, 255, 120},
        {255, 140, 0}, {160, 160, 255}};
    for (int s = 0; s < cfg.plot_samples; ++s) {
      const auto sample = model.sample(tokens, obs, mix(cfg.seed, s));
      const auto& c = palette[s % 5];
      draw_polyline(rgb, W, H, to_pixels(sample), c[0], c[1], c[2]);
    }
  }

  const std::string path = out_dir + "/plot_ep" +
                           std::to_string(cfg.plot_episode) + "_seed" +
                           std::to_string(cfg.seed) + ".ppm";
  write_ppm(path, rgb, W, H);
  std::cout << "plot: wrote " << path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory-guided manipulation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // accept the global flags after the subcommand too

  std::string config_path, out_dir = "out";
  std::optional<std::uint64_t> seed_override;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--seed", seed_override, "seed override");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--set", overrides,
                 "config override, key=value (repeatable, applied after "
                 "--config)");

  auto* gen = app.add_subcommand("gen-data", "record expert demonstrations");
  auto* tdtm = app.add_subcommand("train-dtm", "train the trajectory model");
  auto* tpol = app.add_subcommand("train-policy", "train the policy");
  auto* ev = app.add_subcommand("eval", "run chain evaluation");
  auto* plot = app.add_subcommand("plot", "render trajectory overlays");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    config::RunConfig cfg;
    if (!config_path.empty()) cfg = config::load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw data::DataError("--set expects key=value, got '" + kv + "'");
      config::apply_key_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed_override) cfg.seed = *seed_override;
    if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
    if (tdtm->parsed()) return cmd_train_dtm(cfg, out_dir);
    if (tpol->parsed()) return cmd_train_policy(cfg, out_dir);
    if (ev->parsed()) return cmd_eval(cfg, out_dir);
    if (plot->parsed()) return cmd_plot(cfg, out_dir);
    return 1;
  } catch (const data::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const world::WorldError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nc::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const cam::ProjectionError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
