#pragma once

// Command-line front end: train, ablate, verify, eval, sample.
//
// Every command writes into a fresh run directory
//   <out>/<command>-<YYYYmmdd-HHMMSS>-<config hash prefix>[-<n>]
// under --out, else $STEPNFT_OUT, else ./runs, and always leaves a
// manifest.json there. Exit codes: 0 success, 1 failed checks or runtime
// error, 2 usage or configuration error.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stepnft/ablation.hpp"
#include "stepnft/config.hpp"
#include "stepnft/errors.hpp"
#include "stepnft/flow_solver.hpp"
#include "stepnft/policy_net.hpp"
#include "stepnft/trainer.hpp"
#include "stepnft/verify.hpp"

namespace stepnft {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kCodeVersion = "0.1.0";

// Usage errors detected after parsing.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace fs = std::filesystem;

inline std::string utc_timestamp(const char* format) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, format, &tm);
  return buf;
}

inline fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("STEPNFT_OUT"); env && *env) return env;
  return "runs";
}

inline fs::path make_run_dir(const fs::path& root, const std::string& command, const std::string& hash) {
  fs::create_directories(root);
  const std::string stem = command + "-" + utc_timestamp("%Y%m%d-%H%M%S") + "-" + hash.substr(0, 8);
  fs::path dir = root / stem;
  for (int n = 1; !fs::create_directory(dir); ++n) dir = root / (stem + "-" + std::to_string(n));
  return dir;
}

struct RunManifest {
  std::string command;
  std::string config;  // canonical INI echo
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::string started;
  std::string finished;
  std::map<std::string, std::string> artifacts;
  std::string status = "ok";

  nlohmann::json to_json() const {
    return {{"format_version", kManifestVersion},
            {"code_version", kCodeVersion},
            {"command", command},
            {"config", config},
            {"config_hash", config_hash},
            {"seeds", seeds},
            {"started", started},
            {"finished", finished},
            {"artifacts", artifacts},
            {"status", status}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    if (j.at("format_version").get<int>() != kManifestVersion) throw FormatError("manifest: unknown format version");
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.started = j.at("started").get<std::string>();
    m.finished = j.at("finished").get<std::string>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.status = j.value("status", "ok");
    return m;
  }

  bool hash_matches() const { return hex64(fnv1a64(config)) == config_hash; }
};

inline void write_manifest(const fs::path& dir, RunManifest m) {
  m.finished = utc_timestamp("%Y-%m-%dT%H:%M:%SZ");
  std::ofstream os(dir / "manifest.json");
  os << m.to_json().dump(2) << '\n';
}

inline RunManifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read manifest: " + path.string());
  return RunManifest::from_json(nlohmann::json::parse(is));
}

// Opens a run: resolves the directory and fills the manifest header.
struct Run {
  fs::path dir;
  RunManifest manifest;
};

inline Run open_run(const std::string& out_flag, const std::string& command, const std::string& config_text,
                    std::vector<std::uint64_t> seeds) {
  Run run;
  run.manifest.command = command;
  run.manifest.config = config_text;
  run.manifest.config_hash = hex64(fnv1a64(config_text));
  run.manifest.seeds = std::move(seeds);
  run.manifest.started = utc_timestamp("%Y-%m-%dT%H:%M:%SZ");
  run.dir = make_run_dir(output_root(out_flag), command, run.manifest.config_hash);
  return run;
}

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

inline Settings resolve_settings(const CommonOptions& o) {
  Settings s;
  if (!o.config_path.empty()) s.merge_ini_file(o.config_path);
  for (const auto& kv : o.overrides) s.apply_override(kv);
  if (o.seed) s.set("train.seed", std::to_string(*o.seed));
  parse_config(s);  // validate before any directory is created
  return s;
}

// Wilson score interval at 95%.
inline std::pair<double, double> wilson_interval(double successes, double n) {
  const double z = 1.959963984540054;
  const double p = successes / n;
  const double denom = 1.0 + z * z / n;
  const double centre = (p + z * z / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

// ---------------------------------------------------------------------------

inline int cmd_train(const CommonOptions& opt, std::ostream& out = std::cout) {
  const Settings settings = resolve_settings(opt);
  const TrainConfig config = parse_config(settings);
  Run run = open_run(opt.out, "train", settings.echo(), {config.seed});
  {
    std::ofstream(run.dir / "config.ini") << settings.echo();
  }
  std::ofstream metrics(run.dir / "metrics.csv");
  metrics << kMetricsHeader << '\n';
  run.manifest.artifacts = {{"config", "config.ini"}, {"metrics", "metrics.csv"}};
  TrainResult result;
  try {
    result = run_training(config, [&](const MetricsRow& row) {
      write_metrics_row(metrics, row);
      metrics.flush();
    });
  } catch (const NonFiniteLossError& e) {
    std::ofstream(run.dir / "nonfinite_batch.txt") << e.what() << '\n';
    run.manifest.artifacts["diagnostic"] = "nonfinite_batch.txt";
    run.manifest.status = "non-finite loss";
    write_manifest(run.dir, run.manifest);
    throw;
  }
  save_checkpoint((run.dir / "checkpoint.bin").string(), result.policy);
  save_checkpoint((run.dir / "init.bin").string(), result.initial);
  save_checkpoint((run.dir / "rollout_policy.bin").string(), result.rollout_policy);
  run.manifest.artifacts["checkpoint"] = "checkpoint.bin";
  run.manifest.artifacts["init_checkpoint"] = "init.bin";
  run.manifest.artifacts["rollout_checkpoint"] = "rollout_policy.bin";
  write_manifest(run.dir, run.manifest);
  out << "run directory " << run.dir.string() << '\n'
      << "initial success_rate " << result.initial_success << '\n'
      << "final success_rate " << result.final_success << '\n';
  return 0;
}

inline int cmd_ablate(const CommonOptions& opt, const std::string& axis, std::size_t seed_count,
                      std::ostream& out = std::cout) {
  const Settings settings = resolve_settings(opt);
  const TrainConfig base = parse_config(settings);
  const auto arms = ablation_arms(axis, base);  // unknown axis throws before any work
  if (seed_count == 0) throw UsageError("--seeds must be >= 1");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < seed_count; ++i) seeds.push_back(base.seed + i);
  Run run = open_run(opt.out, "ablate-" + axis, settings.echo(), seeds);
  std::ofstream(run.dir / "config.ini") << settings.echo();
  run.manifest.artifacts = {{"config", "config.ini"}, {"comparison", "ablation.csv"}};
  const auto result = run_ablation(settings, axis, seeds,
                                   [&](const Arm& arm, std::uint64_t seed, const TrainConfig&, const TrainResult& r) {
                                     const fs::path d = run.dir / arm.name / ("seed_" + std::to_string(seed));
                                     fs::create_directories(d);
                                     std::ofstream m(d / "metrics.csv");
                                     m << kMetricsHeader << '\n';
                                     for (const auto& row : r.rows) write_metrics_row(m, row);
                                     out << axis << ' ' << arm.name << " seed " << seed << " initial "
                                         << r.initial_success << " final " << r.final_success << std::endl;
                                   });
  for (const auto& arm : arms) run.manifest.artifacts["arm:" + arm.name] = arm.name;
  std::ofstream csv(run.dir / "ablation.csv");
  write_ablation_csv(csv, result);
  write_manifest(run.dir, run.manifest);
  out << "run directory " << run.dir.string() << '\n';
  for (const auto& a : result.arms) {
    out << a.name << " mean initial " << a.mean_initial() << " mean final " << a.mean_final() << '\n';
  }
  return 0;
}

inline int cmd_verify(std::uint64_t seed, std::size_t trials, std::size_t samples, const std::string& out_flag,
                      std::ostream& out = std::cout) {
  if (trials == 0 || samples == 0) throw UsageError("--trials and --samples must be >= 1");
  VerifyOptions vo;
  vo.seed = seed;
  vo.trials = trials;
  vo.gradient_trials = std::min<std::size_t>(trials, 100);
  vo.samples = samples;
  vo.fd_instances = std::min<std::size_t>(trials, 50);
  vo.chains = std::min<std::size_t>(samples, 100000);
  const std::string echo = "[verify]\nseed = " + std::to_string(seed) + "\ntrials = " + std::to_string(trials) +
                           "\nsamples = " + std::to_string(samples) + "\n";
  Run run = open_run(out_flag, "verify", echo, {seed});
  const auto reports = run_verify_suite(vo);
  std::ofstream csv(run.dir / "verify.csv");
  write_report_csv(csv, reports);
  run.manifest.artifacts = {{"report", "verify.csv"}};
  const bool ok = all_passed(reports);
  run.manifest.status = ok ? "ok" : "checks failed";
  write_manifest(run.dir, run.manifest);
  write_report_summary(out, reports);
  out << (ok ? "all checks passed" : "CHECKS FAILED") << " (" << run.dir.string() << ")\n";
  return ok ? 0 : 1;
}

inline int cmd_eval(const CommonOptions& opt, const std::string& checkpoint, const std::string& policy,
                    std::size_t episodes, std::ostream& out = std::cout) {
  if (episodes == 0) throw UsageError("--episodes must be >= 1");
  if (checkpoint.empty() == policy.empty()) throw UsageError("give exactly one of --checkpoint or --policy");
  const Settings settings = resolve_settings(opt);
  const TrainConfig config = parse_config(settings);
  const auto env = config.make_env();
  EvalResult res;
  std::optional<VelocityField> field;
  if (!checkpoint.empty()) {
    field = load_checkpoint(checkpoint);
    const auto& a = field->architecture();
    if (a.state_dim() != env->action_dim() || a.context_dim != env->context_dim() ||
        a.observation_dim != env->observation_dim()) {
      throw ConfigError("checkpoint dimensions do not match the " + env->name() + " task");
    }
  } else if (policy != "expert" && policy != "random") {
    throw UsageError("--policy must be expert or random");
  }
  Run run = open_run(opt.out, "eval", settings.echo(), {config.seed});
  if (field) {
    res = evaluate(*field, *env, config.steps, episodes, config.seed);
  } else if (policy == "expert") {
    res = evaluate_expert(*env, episodes, config.seed);
  } else {
    res = evaluate_random(*env, episodes, config.seed);
  }
  {
    std::ofstream csv(run.dir / "eval.csv");
    csv.precision(17);
    csv << "episode,reward,success\n";
    for (std::size_t k = 0; k < res.episodes; ++k) {
      csv << k << ',' << res.rewards[k] << ',' << (res.successes[k] ? 1 : 0) << '\n';
    }
  }
  run.manifest.artifacts = {{"episodes", "eval.csv"}};
  if (!checkpoint.empty()) run.manifest.artifacts["checkpoint"] = fs::absolute(checkpoint).string();
  write_manifest(run.dir, run.manifest);
  const auto [lo, hi] = wilson_interval(res.success_rate * static_cast<double>(episodes), static_cast<double>(episodes));
  out << "success_rate " << res.success_rate << " (95% CI [" << lo << ", " << hi << "], " << episodes
      << " episodes)\n";
  return 0;
}

inline int cmd_sample(const CommonOptions& opt, const std::string& checkpoint, const std::string& mode_name,
                      std::ostream& out = std::cout) {
  const Settings settings = resolve_settings(opt);
  const TrainConfig config = parse_config(settings);
  const SamplerMode mode = parse_sampler_mode(mode_name);
  const VelocityField field = load_checkpoint(checkpoint);
  auto env = config.make_env();
  if (field.architecture().state_dim() != env->action_dim()) {
    throw ConfigError("checkpoint dimensions do not match the " + env->name() + " task");
  }
  Run run = open_run(opt.out, "sample", settings.echo(), {config.seed});
  const auto obs = env->reset(config.seed);
  auto rng = CounterRng::keyed(config.seed, StreamTag::Chain);
  const Eigen::VectorXd x1 = rng.normal_vector(static_cast<Eigen::Index>(env->action_dim()));
  const auto schedule = mode == SamplerMode::SDE ? config.schedule() : SolverSchedule::uniform(config.steps, 0.0);
  const auto chain = run_chain(field, schedule, x1, obs.context, obs.observation, rng, mode);
  {
    std::ofstream os(run.dir / "chain.txt");
    write_chain_dump(os, chain, schedule, config.seed, mode);
  }
  run.manifest.artifacts = {{"chain", "chain.txt"}, {"checkpoint", fs::absolute(checkpoint).string()}};
  write_manifest(run.dir, run.manifest);
  out << "terminal sample";
  for (Eigen::Index i = 0; i < chain.terminal().size(); ++i) out << ' ' << chain.terminal()[i];
  out << "\nrun directory " << run.dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

inline int cli_main(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Step-wise contrastive fine-tuning of flow policies on toy control tasks"};
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", common.config_path, "INI config file")->check(CLI::ExistingFile);
      sub->add_option("--set", common.overrides, "override KEY=VALUE (repeatable)");
    }
    sub->add_option("--seed", common.seed, "seed");
    sub->add_option("--out", common.out, "output root (default $STEPNFT_OUT or ./runs)");
  };

  auto* train = app.add_subcommand("train", "fine-tune from a fresh warm start");
  add_common(train, true);

  auto* ablate = app.add_subcommand("ablate", "run every arm of one ablation axis");
  add_common(ablate, true);
  std::string axis;
  std::size_t seed_count = 5;
  ablate->add_option("--axis", axis, "sampler|target|objective|credit|sigma|beta|alpha|step_select")->required();
  ablate->add_option("--seeds", seed_count, "number of consecutive seeds starting at the config seed");

  auto* verify = app.add_subcommand("verify", "run the identity and Monte Carlo check suite");
  add_common(verify, false);
  std::size_t trials = 10000, samples = 1000000;
  verify->add_option("--trials", trials, "random trials per identity check");
  verify->add_option("--samples", samples, "Monte Carlo samples for the alignment check");

  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint or a reference policy");
  add_common(eval, true);
  std::string checkpoint, policy;
  std::size_t episodes = 512;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file");
  eval->add_option("--policy", policy, "reference policy: expert|random");
  eval->add_option("--episodes", episodes, "episodes");

  auto* sample = app.add_subcommand("sample", "dump one sampler chain from a checkpoint");
  add_common(sample, true);
  std::string mode = "sde";
  sample->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  sample->add_option("--mode", mode, "ode|sde");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(common, out);
    if (*ablate) return cmd_ablate(common, axis, seed_count, out);
    if (*verify) return cmd_verify(common.seed.value_or(0), trials, samples, common.out, out);
    if (*eval) return cmd_eval(common, checkpoint, policy, episodes, out);
    if (*sample) return cmd_sample(common, checkpoint, mode, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace stepnft
