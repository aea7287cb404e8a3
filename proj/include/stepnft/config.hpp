#pragma once

// Training configuration.
//
// Config files are INI: `[section]` headers and `key = value` lines, `;` or
// `#` comments. Every setting has a canonical name `section.key` and a
// default; a file only needs to list what it changes. Command-line overrides
// (`--set key=value`) accept the canonical name, a bare key when it is unique
// across sections, or one of the short aliases below, and are applied after
// the file. The resolved settings print back as canonical INI (`echo`), which
// parses to the same configuration; the config hash is FNV-1a 64 of that text.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "stepnft/environment.hpp"
#include "stepnft/errors.hpp"
#include "stepnft/flow_solver.hpp"
#include "stepnft/objective.hpp"
#include "stepnft/policy_net.hpp"
#include "stepnft/rollout.hpp"

namespace stepnft {

enum class TargetKind { StepWise, Terminal };

inline std::string to_string(TargetKind k) { return k == TargetKind::StepWise ? "step" : "terminal"; }

inline TargetKind parse_target(const std::string& s) {
  if (s == "step") return TargetKind::StepWise;
  if (s == "terminal") return TargetKind::Terminal;
  throw ConfigError("unknown target '" + s + "' (expected step|terminal)");
}

enum class AlphaScheduleKind { Constant, Linear };

inline std::string to_string(AlphaScheduleKind k) { return k == AlphaScheduleKind::Constant ? "constant" : "linear"; }

inline AlphaScheduleKind parse_alpha_schedule(const std::string& s) {
  if (s == "constant") return AlphaScheduleKind::Constant;
  if (s == "linear") return AlphaScheduleKind::Linear;
  throw ConfigError("unknown alpha schedule '" + s + "' (expected constant|linear)");
}

enum class OptimizerKind { Adam, Sgd };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam|sgd)");
}

enum class EnvKind { Bandit, Reach };

inline std::string to_string(EnvKind k) { return k == EnvKind::Bandit ? "bandit" : "reach"; }

inline EnvKind parse_env(const std::string& s) {
  if (s == "bandit") return EnvKind::Bandit;
  if (s == "reach") return EnvKind::Reach;
  throw ConfigError("unknown env '" + s + "' (expected bandit|reach)");
}

struct SettingSpec {
  const char* key;
  const char* default_value;
};

// Order here is the order of the echoed config.
inline const std::vector<SettingSpec>& setting_specs() {
  static const std::vector<SettingSpec> specs = {
      {"task.env", "bandit"},
      {"task.reward", "binary"},
      {"task.success_radius", "0.15"},
      {"task.horizon", "2"},
      {"task.chunk", "5"},
      {"task.max_displacement", "0.4"},
      {"policy.hidden", "64,64"},
      {"policy.activation", "tanh"},
      {"sampler.mode", "sde"},
      {"sampler.steps", "4"},
      {"sampler.sigma", "0.2"},
      {"sampler.noise_shape", "constant"},
      {"sampler.final_step_noise", "false"},
      {"objective.kind", "ranking"},
      {"objective.beta", "1.0"},
      {"objective.lambda_tr", "0"},
      {"objective.target", "step"},
      {"objective.mean_correction", "true"},
      {"ema.schedule", "linear"},
      {"ema.alpha_start", "0.1"},
      {"ema.alpha_end", "0.995"},
      {"optimizer.kind", "adam"},
      {"optimizer.lr", "1e-3"},
      {"optimizer.batch_size", "128"},
      {"optimizer.update_epochs", "2"},
      {"rollout.parallel_envs", "64"},
      {"rollout.rollout_epochs", "8"},
      {"rollout.step_select", "uniform"},
      {"rollout.record_all_steps", "false"},
      {"train.iterations", "400"},
      {"train.seed", "0"},
      {"train.eval_episodes", "512"},
      {"train.eval_every", "10"},
      {"sft.demos", "32"},
      {"sft.demo_noise", "0.1"},
      {"sft.steps", "1500"},
      {"sft.lr", "1e-3"},
      {"sft.batch_size", "64"},
      {"output.wallclock", "false"},
  };
  return specs;
}

inline const std::map<std::string, std::string>& setting_aliases() {
  static const std::map<std::string, std::string> aliases = {
      {"objective", "objective.kind"},  {"sampler", "sampler.mode"},
      {"target", "objective.target"},   {"env", "task.env"},
      {"reward", "task.reward"},        {"credit", "task.reward"},
      {"alpha", "ema.schedule"},        {"lr", "optimizer.lr"},
      {"K", "sampler.steps"},           {"step_select", "rollout.step_select"},
  };
  return aliases;
}

// Resolved key/value settings in canonical order.
class Settings {
 public:
  Settings() {
    for (const auto& s : setting_specs()) values_.emplace_back(s.key, s.default_value);
  }

  static std::string canonical_key(const std::string& raw) {
    for (const auto& s : setting_specs()) {
      if (raw == s.key) return raw;
    }
    if (auto it = setting_aliases().find(raw); it != setting_aliases().end()) return it->second;
    std::string match;
    for (const auto& s : setting_specs()) {
      const std::string k = s.key;
      if (k.substr(k.find('.') + 1) == raw) {
        if (!match.empty()) throw ConfigError("ambiguous setting '" + raw + "'; use section.key");
        match = k;
      }
    }
    if (match.empty()) throw ConfigError("unknown setting '" + raw + "'");
    return match;
  }

  void set(const std::string& raw_key, const std::string& value) {
    const std::string key = canonical_key(raw_key);
    for (auto& [k, v] : values_) {
      if (k == key) v = value;
    }
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : values_) {
      if (k == key) return v;
    }
    throw ConfigError("unknown setting '" + key + "'");
  }

  // "key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void merge_ini(std::istream& is) {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::read_ini(is, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("setting '" + section + "' must be inside a [section]");
      for (const auto& [key, value] : body) {
        const std::string full = section + "." + key;
        bool known = false;
        for (const auto& s : setting_specs()) known = known || full == s.key;
        if (!known) throw ConfigError("unknown setting '" + full + "'");
        set(full, value.data());
      }
    }
  }

  void merge_ini_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file: " + path);
    merge_ini(is);
  }

  std::string echo() const {
    std::ostringstream os;
    std::string section;
    for (const auto& [k, v] : values_) {
      const std::string sec = k.substr(0, k.find('.'));
      if (sec != section) {
        os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
        section = sec;
      }
      os << k.substr(k.find('.') + 1) << " = " << v << '\n';
    }
    return os.str();
  }

  const std::vector<std::pair<std::string, std::string>>& values() const { return values_; }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
  }

 private:
  std::vector<std::pair<std::string, std::string>> values_;
};

inline std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const Settings& s) { return hex64(fnv1a64(s.echo())); }

struct TrainConfig {
  // task
  EnvKind env = EnvKind::Bandit;
  RewardMode reward = RewardMode::Binary;
  double success_radius = 0.15;
  std::size_t horizon = 2;
  std::size_t chunk = 5;
  double max_displacement = 0.4;
  // policy
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::Tanh;
  // sampler
  SamplerMode sampler = SamplerMode::SDE;
  std::size_t steps = 4;
  double sigma = 0.2;
  NoiseShape noise_shape = NoiseShape::Constant;
  bool final_step_noise = false;
  // objective
  ObjectiveKind objective = ObjectiveKind::Ranking;
  double beta = 1.0;
  double lambda_tr = 0.0;
  TargetKind target = TargetKind::StepWise;
  bool mean_correction = true;
  // ema
  AlphaScheduleKind alpha_schedule = AlphaScheduleKind::Linear;
  double alpha_start = 0.1;
  double alpha_end = 0.995;
  // optimizer
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  std::size_t batch_size = 128;
  std::size_t update_epochs = 2;
  // rollout
  std::size_t parallel_envs = 64;
  std::size_t rollout_epochs = 8;
  StepSelector step_select;
  bool record_all_steps = false;
  // train
  std::size_t iterations = 400;
  std::uint64_t seed = 0;
  std::size_t eval_episodes = 512;
  std::size_t eval_every = 10;
  // sft
  std::size_t sft_demos = 32;
  double sft_demo_noise = 0.1;
  std::size_t sft_steps = 1500;
  double sft_lr = 1e-3;
  std::size_t sft_batch_size = 64;
  // output
  bool wallclock = false;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("objective.beta: must be > 0");
    if (!(sigma >= 0.0)) throw ConfigError("sampler.sigma: must be >= 0");
    if (steps < 1) throw ConfigError("sampler.steps: K must be >= 1");
    if (!(alpha_start >= 0.0 && alpha_start <= alpha_end && alpha_end < 1.0)) {
      throw ConfigError("ema: need 0 <= alpha_start <= alpha_end < 1");
    }
    if (!(lambda_tr >= 0.0)) throw ConfigError("objective.lambda_tr: must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("optimizer.lr: must be > 0");
    if (batch_size == 0) throw ConfigError("optimizer.batch_size: must be >= 1");
    if (parallel_envs == 0) throw ConfigError("rollout.parallel_envs: must be >= 1");
    if (rollout_epochs == 0) throw ConfigError("rollout.rollout_epochs: must be >= 1");
    if (step_select.kind == StepSelector::Kind::Fixed && step_select.index >= steps) {
      throw ConfigError("rollout.step_select: fixed index must be < sampler.steps");
    }
    if (eval_every == 0) throw ConfigError("train.eval_every: must be >= 1");
    if (!(success_radius > 0.0)) throw ConfigError("task.success_radius: must be > 0");
    if (sft_batch_size == 0) throw ConfigError("sft.batch_size: must be >= 1");
    if (!(sft_lr > 0.0)) throw ConfigError("sft.lr: must be > 0");
    if (!(sft_demo_noise >= 0.0)) throw ConfigError("sft.demo_noise: must be >= 0");
    for (auto h : hidden) {
      if (h == 0) throw ConfigError("policy.hidden: widths must be >= 1");
    }
  }

  SolverSchedule schedule() const {
    return SolverSchedule::uniform(steps, sampler == SamplerMode::SDE ? sigma : 0.0, final_step_noise,
                                   noise_shape);
  }

  std::unique_ptr<Environment> make_env() const {
    if (env == EnvKind::Bandit) {
      BanditParams p;
      p.success_radius = success_radius;
      p.reward_mode = reward;
      return std::make_unique<BanditEnv>(p);
    }
    ReachParams p;
    p.horizon = horizon;
    p.chunk = chunk;
    p.max_displacement = max_displacement;
    p.success_radius = success_radius;
    p.reward_mode = reward;
    return std::make_unique<ReachEnv>(p);
  }

  Architecture architecture() const {
    const auto e = make_env();
    return make_architecture(e->action_dim(), e->context_dim(), e->observation_dim(), hidden, activation);
  }
};

namespace detail {

template <class T>
T parse_number(const Settings& s, const std::string& key) {
  const std::string& text = s.get(key);
  std::istringstream is(text);
  T v{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!text.empty() && text.front() == '-') throw ConfigError(key + ": expected a nonnegative integer, got '" + text + "'");
  }
  if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError(key + ": cannot parse '" + text + "'");
  return v;
}

inline bool parse_bool(const Settings& s, const std::string& key) {
  const std::string& v = s.get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true|false, got '" + v + "'");
}

template <class F>
auto with_key(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(key, 0) == 0) throw;
    throw ConfigError(key + ": " + msg);
  }
}

}  // namespace detail

inline TrainConfig parse_config(const Settings& s) {
  using detail::parse_bool;
  using detail::parse_number;
  using detail::with_key;
  TrainConfig c;
  c.env = with_key("task.env", [&] { return parse_env(s.get("task.env")); });
  c.reward = with_key("task.reward", [&] { return parse_reward_mode(s.get("task.reward")); });
  c.success_radius = parse_number<double>(s, "task.success_radius");
  c.horizon = parse_number<std::size_t>(s, "task.horizon");
  c.chunk = parse_number<std::size_t>(s, "task.chunk");
  c.max_displacement = parse_number<double>(s, "task.max_displacement");
  c.hidden.clear();
  {
    std::istringstream is(s.get("policy.hidden"));
    for (std::string item; std::getline(is, item, ',');) {
      const std::string t = Settings::trim(item);
      if (t.empty()) continue;
      if (t.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError("policy.hidden: expected comma-separated widths, got '" + s.get("policy.hidden") + "'");
      }
      c.hidden.push_back(std::stoul(t));
    }
  }
  c.activation = with_key("policy.activation", [&] { return parse_activation(s.get("policy.activation")); });
  c.sampler = with_key("sampler.mode", [&] { return parse_sampler_mode(s.get("sampler.mode")); });
  c.steps = parse_number<std::size_t>(s, "sampler.steps");
  c.sigma = parse_number<double>(s, "sampler.sigma");
  c.noise_shape = with_key("sampler.noise_shape", [&] { return parse_noise_shape(s.get("sampler.noise_shape")); });
  c.final_step_noise = parse_bool(s, "sampler.final_step_noise");
  c.objective = with_key("objective.kind", [&] { return parse_objective(s.get("objective.kind")); });
  c.beta = parse_number<double>(s, "objective.beta");
  c.lambda_tr = parse_number<double>(s, "objective.lambda_tr");
  c.target = with_key("objective.target", [&] { return parse_target(s.get("objective.target")); });
  c.mean_correction = parse_bool(s, "objective.mean_correction");
  c.alpha_schedule = with_key("ema.schedule", [&] { return parse_alpha_schedule(s.get("ema.schedule")); });
  c.alpha_start = parse_number<double>(s, "ema.alpha_start");
  c.alpha_end = parse_number<double>(s, "ema.alpha_end");
  c.optimizer = with_key("optimizer.kind", [&] { return parse_optimizer(s.get("optimizer.kind")); });
  c.lr = parse_number<double>(s, "optimizer.lr");
  c.batch_size = parse_number<std::size_t>(s, "optimizer.batch_size");
  c.update_epochs = parse_number<std::size_t>(s, "optimizer.update_epochs");
  c.parallel_envs = parse_number<std::size_t>(s, "rollout.parallel_envs");
  c.rollout_epochs = parse_number<std::size_t>(s, "rollout.rollout_epochs");
  c.step_select = with_key("rollout.step_select", [&] { return parse_step_selector(s.get("rollout.step_select")); });
  c.record_all_steps = parse_bool(s, "rollout.record_all_steps");
  c.iterations = parse_number<std::size_t>(s, "train.iterations");
  c.seed = parse_number<std::uint64_t>(s, "train.seed");
  c.eval_episodes = parse_number<std::size_t>(s, "train.eval_episodes");
  c.eval_every = parse_number<std::size_t>(s, "train.eval_every");
  c.sft_demos = parse_number<std::size_t>(s, "sft.demos");
  c.sft_demo_noise = parse_number<double>(s, "sft.demo_noise");
  c.sft_steps = parse_number<std::size_t>(s, "sft.steps");
  c.sft_lr = parse_number<double>(s, "sft.lr");
  c.sft_batch_size = parse_number<std::size_t>(s, "sft.batch_size");
  c.wallclock = parse_bool(s, "output.wallclock");
  c.validate();
  // Environment parameters are validated by constructing one.
  with_key("task", [&] {
    c.make_env();
    return 0;
  });
  return c;
}

inline TrainConfig parse_config(const std::string& ini_text) {
  Settings s;
  std::istringstream is(ini_text);
  s.merge_ini(is);
  return parse_config(s);
}

}  // namespace stepnft
