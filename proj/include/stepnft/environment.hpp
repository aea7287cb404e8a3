#pragma once

// Toy control tasks with sparse terminal rewards.
//
// BanditEnv: one environment step. A context c ~ U[-1,1]^2 fixes the target
// action a*(c) = scale * R(angle) c; the episode succeeds when the 2-D action
// lands within `success_radius` of the target.
//
// ReachEnv: a point agent in the arena [-1,1]^2 must end within
// `success_radius` of a goal after `horizon` environment steps. Each step
// consumes an action chunk of `chunk` displacement pairs, applied one after
// another, each clipped to length `max_displacement`, the position clamped to
// the arena. Observation = (position, goal, step / horizon); no context.
//
// Rewards are emitted only when the episode ends; intermediate steps give 0.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepnft/errors.hpp"
#include "stepnft/rng.hpp"

namespace stepnft {

enum class RewardMode { Binary, Shaped };

inline std::string to_string(RewardMode m) { return m == RewardMode::Binary ? "binary" : "shaped"; }

inline RewardMode parse_reward_mode(const std::string& s) {
  if (s == "binary") return RewardMode::Binary;
  if (s == "shaped") return RewardMode::Shaped;
  throw ConfigError("unknown reward mode '" + s + "' (expected binary|shaped)");
}

// Binary: 1 inside the success ball, else 0. Shaped: exp(-dist^2 / (2 radius^2)),
// a bounded success score in (0, 1].
inline double terminal_reward(double distance, double radius, RewardMode mode) {
  if (mode == RewardMode::Binary) return distance <= radius ? 1.0 : 0.0;
  return std::exp(-distance * distance / (2.0 * radius * radius));
}

struct EnvObservation {
  Eigen::VectorXd observation;
  Eigen::VectorXd context;
};

struct StepOutcome {
  EnvObservation next;
  bool done = false;
  double reward = 0.0;
  bool success = false;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string name() const = 0;
  virtual std::size_t action_dim() const = 0;
  virtual std::size_t context_dim() const = 0;
  virtual std::size_t observation_dim() const = 0;
  virtual std::size_t horizon() const = 0;

  virtual EnvObservation reset(std::uint64_t seed) = 0;
  virtual StepOutcome step(const Eigen::VectorXd& action) = 0;

  // Straight-to-goal action for the current state with Gaussian noise of
  // standard deviation `noise` per action coordinate.
  virtual Eigen::VectorXd expert_action(double noise, CounterRng& rng) const = 0;

  virtual std::unique_ptr<Environment> clone() const = 0;
};

struct BanditParams {
  double success_radius = 0.15;
  double target_scale = 0.5;
  double target_angle = 0.6;  // radians
  RewardMode reward_mode = RewardMode::Binary;
};

class BanditEnv final : public Environment {
 public:
  static constexpr double kArenaHalfWidth = 1.0;

  explicit BanditEnv(BanditParams params = {}) : params_(params) {
    if (!(params_.success_radius > 0.0)) throw ConfigError("bandit success radius must be > 0");
    // The success ball must sit inside the arena for every context.
    if (params_.target_scale * std::sqrt(2.0) + params_.success_radius > kArenaHalfWidth) {
      throw ConfigError("bandit target map plus success radius leaves the arena");
    }
  }

  std::string name() const override { return "bandit"; }
  std::size_t action_dim() const override { return 2; }
  std::size_t context_dim() const override { return 2; }
  std::size_t observation_dim() const override { return 0; }
  std::size_t horizon() const override { return 1; }
  const BanditParams& params() const { return params_; }

  Eigen::Vector2d target(const Eigen::VectorXd& context) const {
    detail::require_same_dim(context.size(), 2, "bandit target");
    const double c = std::cos(params_.target_angle), s = std::sin(params_.target_angle);
    return params_.target_scale * Eigen::Vector2d(c * context[0] - s * context[1],
                                                  s * context[0] + c * context[1]);
  }

  EnvObservation reset(std::uint64_t seed) override {
    auto rng = CounterRng::keyed(seed, StreamTag::EnvReset, 1);
    context_ = Eigen::Vector2d(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    done_ = false;
    return current();
  }

  StepOutcome step(const Eigen::VectorXd& action) override {
    detail::require_same_dim(action.size(), action_dim(), "bandit step action");
    if (done_) throw ContractError("bandit step after episode end");
    done_ = true;
    const double dist = (action - target(context_)).norm();
    StepOutcome out;
    out.next = current();
    out.done = true;
    out.success = dist <= params_.success_radius;
    out.reward = terminal_reward(dist, params_.success_radius, params_.reward_mode);
    return out;
  }

  Eigen::VectorXd expert_action(double noise, CounterRng& rng) const override {
    Eigen::VectorXd a = target(context_);
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] += noise * rng.normal();
    return a;
  }

  std::unique_ptr<Environment> clone() const override { return std::make_unique<BanditEnv>(*this); }

 private:
  EnvObservation current() const { return {Eigen::VectorXd(0), context_}; }

  BanditParams params_;
  Eigen::VectorXd context_ = Eigen::Vector2d::Zero();
  bool done_ = true;
};

struct ReachParams {
  std::size_t horizon = 2;
  std::size_t chunk = 5;
  double max_displacement = 0.4;
  double success_radius = 0.1;
  double spawn_half_width = 0.9;
  RewardMode reward_mode = RewardMode::Binary;
};

class ReachEnv final : public Environment {
 public:
  static constexpr double kArenaHalfWidth = 1.0;

  explicit ReachEnv(ReachParams params = {}) : params_(params) {
    if (params_.horizon == 0 || params_.chunk == 0) throw ConfigError("reach horizon and chunk must be >= 1");
    if (!(params_.max_displacement > 0.0)) throw ConfigError("reach max displacement must be > 0");
    if (!(params_.success_radius > 0.0)) throw ConfigError("reach success radius must be > 0");
    if (!(params_.spawn_half_width > 0.0 && params_.spawn_half_width <= kArenaHalfWidth)) {
      throw ConfigError("reach spawn region must lie inside the arena");
    }
  }

  std::string name() const override { return "reach"; }
  std::size_t action_dim() const override { return 2 * params_.chunk; }
  std::size_t context_dim() const override { return 0; }
  std::size_t observation_dim() const override { return 5; }
  std::size_t horizon() const override { return params_.horizon; }
  const ReachParams& params() const { return params_; }
  const Eigen::Vector2d& position() const { return position_; }
  const Eigen::Vector2d& goal() const { return goal_; }

  EnvObservation reset(std::uint64_t seed) override {
    auto rng = CounterRng::keyed(seed, StreamTag::EnvReset, 2);
    const double h = params_.spawn_half_width;
    position_ = Eigen::Vector2d(rng.uniform(-h, h), rng.uniform(-h, h));
    goal_ = Eigen::Vector2d(rng.uniform(-h, h), rng.uniform(-h, h));
    step_ = 0;
    return current();
  }

  StepOutcome step(const Eigen::VectorXd& action) override {
    detail::require_same_dim(action.size(), action_dim(), "reach step action");
    if (step_ >= params_.horizon) throw ContractError("reach step after episode end");
    for (std::size_t k = 0; k < params_.chunk; ++k) {
      Eigen::Vector2d d = action.segment<2>(static_cast<Eigen::Index>(2 * k));
      const double len = d.norm();
      if (len > params_.max_displacement) d *= params_.max_displacement / len;
      position_ = (position_ + d).cwiseMax(-kArenaHalfWidth).cwiseMin(kArenaHalfWidth);
    }
    ++step_;
    StepOutcome out;
    out.next = current();
    out.done = step_ == params_.horizon;
    if (out.done) {
      const double dist = (position_ - goal_).norm();
      out.success = dist <= params_.success_radius;
      out.reward = terminal_reward(dist, params_.success_radius, params_.reward_mode);
    }
    return out;
  }

  Eigen::VectorXd expert_action(double noise, CounterRng& rng) const override {
    const auto remaining = static_cast<double>(params_.chunk * (params_.horizon - step_));
    const Eigen::Vector2d d = (goal_ - position_) / remaining;
    Eigen::VectorXd a(action_dim());
    for (std::size_t k = 0; k < params_.chunk; ++k) a.segment<2>(static_cast<Eigen::Index>(2 * k)) = d;
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] += noise * rng.normal();
    return a;
  }

  std::unique_ptr<Environment> clone() const override { return std::make_unique<ReachEnv>(*this); }

 private:
  EnvObservation current() const {
    Eigen::VectorXd obs(5);
    obs << position_, goal_, static_cast<double>(step_) / static_cast<double>(params_.horizon);
    return {obs, Eigen::VectorXd(0)};
  }

  ReachParams params_;
  Eigen::Vector2d position_ = Eigen::Vector2d::Zero();
  Eigen::Vector2d goal_ = Eigen::Vector2d::Zero();
  std::size_t step_ = 0;
};

// One (observation, context) -> action pair from the expert.
struct Demonstration {
  Eigen::VectorXd observation;
  Eigen::VectorXd context;
  Eigen::VectorXd action;
};

// Runs `episodes` noisy expert episodes; episode k resets with seed
// mix(seed, k). The noisy action is both recorded and executed.
inline std::vector<Demonstration> expert_demonstrations(const Environment& prototype,
                                                        std::size_t episodes, double noise,
                                                        std::uint64_t seed) {
  std::vector<Demonstration> demos;
  auto env = prototype.clone();
  for (std::size_t k = 0; k < episodes; ++k) {
    auto obs = env->reset(stream_id({seed, static_cast<std::uint64_t>(StreamTag::Demo), k}));
    auto rng = CounterRng::keyed(seed, StreamTag::Demo, k);
    for (bool done = false; !done;) {
      Eigen::VectorXd action = env->expert_action(noise, rng);
      demos.push_back({obs.observation, obs.context, action});
      auto out = env->step(action);
      obs = out.next;
      done = out.done;
    }
  }
  return demos;
}

// Golden trajectory text: the reset state and the noise-free expert episode.
//   # stepnft-golden v1 <env name> seed <seed>
//   reset obs <values> | ctx <values>
//   step <i> action <values> | obs <values> | done <0|1> reward <r>
inline void write_golden_trajectory(std::ostream& os, Environment& env, std::uint64_t seed) {
  const auto old_precision = os.precision(17);
  auto put = [&os](const Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) os << ' ' << v[i];
  };
  os << "# stepnft-golden v1 " << env.name() << " seed " << seed << '\n';
  auto obs = env.reset(seed);
  os << "reset obs";
  put(obs.observation);
  os << " | ctx";
  put(obs.context);
  os << '\n';
  CounterRng unused(seed, 0);
  for (std::size_t i = 0;; ++i) {
    const Eigen::VectorXd a = env.expert_action(0.0, unused);
    const auto out = env.step(a);
    os << "step " << i << " action";
    put(a);
    os << " | obs";
    put(out.next.observation);
    os << " | done " << (out.done ? 1 : 0) << " reward " << out.reward << '\n';
    if (out.done) break;
  }
  os.precision(old_precision);
}

}  // namespace stepnft
