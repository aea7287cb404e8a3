#pragma once

// Ablation arms. Each axis expands a base configuration into named arms,
// expressed as setting overrides; every arm runs on the same seed list, so
// arms sharing a seed share the warm start and the evaluation episodes.

#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "stepnft/config.hpp"
#include "stepnft/errors.hpp"
#include "stepnft/trainer.hpp"

namespace stepnft {

struct Arm {
  std::string name;
  std::vector<std::string> overrides;
};

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"sampler", "target", "objective", "credit",
                                                "sigma",   "beta",   "alpha",     "step_select"};
  return axes;
}

inline std::vector<Arm> ablation_arms(const std::string& axis, const TrainConfig& base) {
  if (axis == "sampler") {
    return {
        {"ode_terminal", {"sampler.mode=ode", "objective.target=terminal"}},
        {"sde_naive", {"sampler.mode=sde", "objective.target=terminal", "objective.mean_correction=false"}},
        {"sde_mean_corrected", {"sampler.mode=sde", "objective.target=terminal", "objective.mean_correction=true"}},
        {"sde_stepwise", {"sampler.mode=sde", "objective.target=step", "objective.mean_correction=true"}},
    };
  }
  if (axis == "target") {
    return {{"terminal", {"objective.target=terminal"}}, {"step", {"objective.target=step"}}};
  }
  if (axis == "objective") {
    return {{"ranking", {"objective.kind=ranking"}},
            {"wmse", {"objective.kind=wmse"}},
            {"positive_only", {"objective.kind=positive_only"}},
            {"negative_only", {"objective.kind=negative_only"}}};
  }
  if (axis == "credit") {
    return {{"binary", {"task.reward=binary"}}, {"shaped", {"task.reward=shaped"}}};
  }
  if (axis == "sigma") {
    return {{"sigma_0.05", {"sampler.sigma=0.05"}}, {"sigma_0.2", {"sampler.sigma=0.2"}},
            {"sigma_0.5", {"sampler.sigma=0.5"}}};
  }
  if (axis == "beta") {
    return {{"beta_0.5", {"objective.beta=0.5"}}, {"beta_1", {"objective.beta=1.0"}},
            {"beta_2", {"objective.beta=2.0"}}};
  }
  if (axis == "alpha") {
    return {
        {"constant_0.1", {"ema.schedule=constant", "ema.alpha_start=0.1", "ema.alpha_end=0.1"}},
        {"constant_0.995", {"ema.schedule=constant", "ema.alpha_start=0.995", "ema.alpha_end=0.995"}},
        {"linear", {"ema.schedule=linear", "ema.alpha_start=0.1", "ema.alpha_end=0.995"}},
    };
  }
  if (axis == "step_select") {
    std::vector<Arm> arms{{"uniform", {"rollout.step_select=uniform"}}};
    for (std::size_t j = 0; j < base.steps; ++j) {
      arms.push_back({"fixed_" + std::to_string(j), {"rollout.step_select=fixed:" + std::to_string(j)}});
    }
    return arms;
  }
  throw ConfigError("unknown ablation axis '" + axis +
                    "' (expected sampler|target|objective|credit|sigma|beta|alpha|step_select)");
}

struct ArmResult {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<double> initial_success;
  std::vector<double> final_success;

  double mean_final() const {
    return final_success.empty() ? 0.0
                                 : std::accumulate(final_success.begin(), final_success.end(), 0.0) /
                                       static_cast<double>(final_success.size());
  }
  double mean_initial() const {
    return initial_success.empty() ? 0.0
                                   : std::accumulate(initial_success.begin(), initial_success.end(), 0.0) /
                                         static_cast<double>(initial_success.size());
  }
};

struct AblationResult {
  std::string axis;
  std::vector<ArmResult> arms;

  const ArmResult& arm(const std::string& name) const {
    for (const auto& a : arms) {
      if (a.name == name) return a;
    }
    throw ContractError("no ablation arm named '" + name + "'");
  }
};

using ArmObserver =
    std::function<void(const Arm&, std::uint64_t seed, const TrainConfig&, const TrainResult&)>;

inline Settings arm_settings(const Settings& base, const Arm& arm, std::uint64_t seed) {
  Settings s = base;
  for (const auto& o : arm.overrides) s.apply_override(o);
  s.set("train.seed", std::to_string(seed));
  return s;
}

inline AblationResult run_ablation(const Settings& base, const std::string& axis,
                                   const std::vector<std::uint64_t>& seeds, const ArmObserver& observer = {}) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  const auto arms = ablation_arms(axis, parse_config(base));
  AblationResult result{axis, {}};
  for (const auto& arm : arms) {
    ArmResult ar{arm.name, {}, {}, {}};
    for (auto seed : seeds) {
      const auto config = parse_config(arm_settings(base, arm, seed));
      const auto run = run_training(config);
      ar.seeds.push_back(seed);
      ar.initial_success.push_back(run.initial_success);
      ar.final_success.push_back(run.final_success);
      if (observer) observer(arm, seed, config, run);
    }
    result.arms.push_back(std::move(ar));
  }
  return result;
}

// Columns: axis,arm,seed,initial_success_rate,final_success_rate. Each arm
// ends with a row whose seed column is "mean".
inline void write_ablation_csv(std::ostream& os, const AblationResult& result) {
  const auto old_precision = os.precision(17);
  os << "axis,arm,seed,initial_success_rate,final_success_rate\n";
  for (const auto& a : result.arms) {
    for (std::size_t i = 0; i < a.seeds.size(); ++i) {
      os << result.axis << ',' << a.name << ',' << a.seeds[i] << ',' << a.initial_success[i] << ','
         << a.final_success[i] << '\n';
    }
    os << result.axis << ',' << a.name << ",mean," << a.mean_initial() << ',' << a.mean_final() << '\n';
  }
  os.precision(old_precision);
}

}  // namespace stepnft
