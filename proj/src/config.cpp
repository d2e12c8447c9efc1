#include "tdl/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "tdl/data.hpp"

namespace tdl::config {

namespace {

struct Entry {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
T parse_value(const std::string& key, const std::string& raw);

template <>
std::string parse_value<std::string>(const std::string&,
                                     const std::string& raw) {
  return raw;
}

template <>
std::uint64_t parse_value<std::uint64_t>(const std::string& key,
                                         const std::string& raw) {
  try {
    // stoull would happily wrap a negative literal around
    if (raw.find('-') != std::string::npos) throw std::invalid_argument(raw);
    std::size_t used = 0;
    auto v = std::stoull(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw data::DataError("config: bad unsigned value for " + key + ": '" +
                          raw + "'");
  }
}

template <>
int parse_value<int>(const std::string& key, const std::string& raw) {
  try {
    std::size_t used = 0;
    int v = std::stoi(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw data::DataError("config: bad integer value for " + key + ": '" +
                          raw + "'");
  }
}

template <>
double parse_value<double>(const std::string& key, const std::string& raw) {
  try {
    std::size_t used = 0;
    double v = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw data::DataError("config: bad number for " + key + ": '" + raw +
                          "'");
  }
}

template <>
bool parse_value<bool>(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  throw data::DataError("config: bad boolean for " + key + ": '" + raw + "'");
}

std::string format_value(const std::string& v) { return v; }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(int v) { return std::to_string(v); }
std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    auto field = [&t](const char* key, auto member) {
      using T = std::decay_t<decltype(RunConfig{}.*member)>;
      t.push_back({key,
                   [member, key](RunConfig& c, const std::string& raw) {
                     c.*member = parse_value<T>(key, raw);
                   },
                   [member](const RunConfig& c) {
                     return format_value(c.*member);
                   }});
    };
    field("seed", &RunConfig::seed);
    field("data.episodes_per_task_layout",
          &RunConfig::data_episodes_per_task_layout);
    field("data.path", &RunConfig::data_path);
    field("split.scheme", &RunConfig::split_scheme);
    field("split.fraction", &RunConfig::split_fraction);
    field("dtm.k", &RunConfig::dtm_k);
    field("dtm.beta_min", &RunConfig::dtm_beta_min);
    field("dtm.beta_max", &RunConfig::dtm_beta_max);
    field("dtm.cond_width", &RunConfig::dtm_cond_width);
    field("dtm.hidden", &RunConfig::dtm_hidden);
    field("dtm.time_dim", &RunConfig::dtm_time_dim);
    field("dtm.blocks", &RunConfig::dtm_blocks);
    field("dtm.steps", &RunConfig::dtm_steps);
    field("dtm.batch", &RunConfig::dtm_batch);
    field("dtm.lr", &RunConfig::dtm_lr);
    field("dtm.augment_shift", &RunConfig::dtm_augment_shift);
    field("dtm.augment_jitter", &RunConfig::dtm_augment_jitter);
    field("policy.h", &RunConfig::policy_h);
    field("policy.width", &RunConfig::policy_width);
    field("policy.blocks", &RunConfig::policy_blocks);
    field("policy.heads", &RunConfig::policy_heads);
    field("policy.ffn", &RunConfig::policy_ffn);
    field("policy.obs_tokens", &RunConfig::policy_obs_tokens);
    field("policy.traj_tokens", &RunConfig::policy_traj_tokens);
    field("policy.chunk", &RunConfig::policy_chunk);
    field("policy.replan", &RunConfig::policy_replan);
    field("policy.use_trajectory", &RunConfig::policy_use_trajectory);
    field("policy.steps", &RunConfig::policy_steps);
    field("policy.batch", &RunConfig::policy_batch);
    field("policy.lr", &RunConfig::policy_lr);
    field("train.checkpoint_every", &RunConfig::checkpoint_every);
    field("train.dtm_checkpoint", &RunConfig::dtm_checkpoint);
    field("train.policy_checkpoint", &RunConfig::policy_checkpoint);
    field("train.resume", &RunConfig::resume);
    field("eval.agent", &RunConfig::eval_agent);
    field("eval.chains", &RunConfig::eval_chains);
    field("eval.layout", &RunConfig::eval_layout);
    field("eval.max_steps", &RunConfig::eval_max_steps);
    field("plot.episode", &RunConfig::plot_episode);
    field("plot.samples", &RunConfig::plot_samples);
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_key_value(RunConfig& cfg, const std::string& key,
                     const std::string& value) {
  for (const auto& e : entries()) {
    if (key == e.key) {
      e.set(cfg, value);
      return;
    }
  }
  throw data::DataError("config: unknown key '" + key + "'");
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw data::DataError("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw data::DataError("config: line " + std::to_string(lineno) +
                            " of " + path + " is not key = value");
    apply_key_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void dump_config(const RunConfig& cfg, std::ostream& os) {
  for (const auto& e : entries()) os << e.key << " = " << e.get(cfg) << "\n";
}

}  // namespace tdl::config
