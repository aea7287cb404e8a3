#pragma once

// Training loop: supervised warm start, then repeated
//   collect with theta_old -> optimize theta on the buffer -> EMA-sync theta_old
// with greedy ODE evaluation of theta along the way.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepnft/config.hpp"
#include "stepnft/environment.hpp"
#include "stepnft/errors.hpp"
#include "stepnft/flow_solver.hpp"
#include "stepnft/objective.hpp"
#include "stepnft/policy_net.hpp"
#include "stepnft/rng.hpp"
#include "stepnft/rollout.hpp"

namespace stepnft {

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, std::size_t parameter_count)
      : kind_(kind), lr_(lr) {
    if (!(lr > 0.0)) throw ConfigError("optimizer learning rate must be > 0");
    if (kind == OptimizerKind::Adam) {
      m_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count));
      v_ = m_;
    }
  }

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    detail::require_same_dim(params.size(), grad.size(), "optimizer step");
    if (kind_ == OptimizerKind::Sgd) {
      params -= lr_ * grad;
      return;
    }
    ++t_;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    m_ = b1 * m_ + (1.0 - b1) * grad;
    v_ = b2 * v_ + (1.0 - b2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
  }

  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_;
  double lr_;
  Eigen::VectorXd m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// EMA synchronization

inline double alpha_schedule(std::size_t iteration, std::size_t total, AlphaScheduleKind kind,
                             double alpha_start, double alpha_end) {
  if (iteration > total) throw ContractError("alpha_schedule: iteration beyond total");
  if (kind == AlphaScheduleKind::Constant || total == 0) return alpha_start;
  const double f = static_cast<double>(iteration) / static_cast<double>(total);
  return alpha_start + (alpha_end - alpha_start) * f;
}

inline double alpha_schedule(std::size_t iteration, std::size_t total, const TrainConfig& c) {
  return alpha_schedule(iteration, total, c.alpha_schedule, c.alpha_start, c.alpha_end);
}

inline void ema_update(VelocityField& theta_old, const VelocityField& theta, double alpha) {
  detail::require_same_dim(theta_old.parameters().size(), theta.parameters().size(), "ema_update");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ContractError("ema_update: alpha must lie in [0, 1)");
  theta_old.parameters() = alpha * theta_old.parameters() + (1.0 - alpha) * theta.parameters();
}

// ---------------------------------------------------------------------------
// Evaluation: greedy (ODE) rollouts on a held-out reset set.
//   reset seed  stream_id(seed, Evaluation, episode)
//   x_1         CounterRng(seed, Evaluation, episode, env_step)

struct EvalResult {
  std::size_t episodes = 0;
  double success_rate = 0.0;
  double mean_reward = 0.0;
  std::vector<double> rewards;
  std::vector<bool> successes;
};

// Batch policy: (x1 samples, contexts, observations) -> actions, all column-wise.
using BatchPolicy = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                                                  const Eigen::MatrixXd&)>;

inline EvalResult evaluate_policy(const BatchPolicy& policy, const Environment& prototype,
                                  std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw ConfigError("evaluation needs at least one episode");
  const auto ad = static_cast<Eigen::Index>(prototype.action_dim());
  std::vector<std::unique_ptr<Environment>> envs;
  std::vector<EnvObservation> obs(episodes);
  std::vector<std::size_t> active;
  EvalResult res;
  res.episodes = episodes;
  res.rewards.assign(episodes, 0.0);
  res.successes.assign(episodes, false);
  for (std::size_t k = 0; k < episodes; ++k) {
    envs.push_back(prototype.clone());
    obs[k] = envs[k]->reset(stream_id({seed, static_cast<std::uint64_t>(StreamTag::Evaluation), k}));
    active.push_back(k);
  }
  for (std::size_t env_step = 0; !active.empty(); ++env_step) {
    const auto n = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd x1(ad, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      auto rng = CounterRng::keyed(seed, StreamTag::Evaluation, active[static_cast<std::size_t>(c)], env_step);
      x1.col(c) = rng.normal_vector(ad);
    }
    const Eigen::MatrixXd actions =
        policy(x1, detail::gather(obs, active, true, prototype.context_dim()),
               detail::gather(obs, active, false, prototype.observation_dim()));
    std::vector<std::size_t> still;
    for (Eigen::Index c = 0; c < n; ++c) {
      const std::size_t k = active[static_cast<std::size_t>(c)];
      const auto out = envs[k]->step(actions.col(c));
      obs[k] = out.next;
      if (out.done) {
        res.rewards[k] = out.reward;
        res.successes[k] = out.success;
      } else {
        still.push_back(k);
      }
    }
    active = std::move(still);
  }
  double s = 0.0, r = 0.0;
  for (std::size_t k = 0; k < episodes; ++k) {
    s += res.successes[k] ? 1.0 : 0.0;
    r += res.rewards[k];
  }
  res.success_rate = s / static_cast<double>(episodes);
  res.mean_reward = r / static_cast<double>(episodes);
  return res;
}

inline EvalResult evaluate(const VelocityField& field, const Environment& prototype,
                           std::size_t steps, std::size_t episodes, std::uint64_t seed) {
  const auto schedule = SolverSchedule::uniform(steps, 0.0);
  BatchPolicy policy = [&](const Eigen::MatrixXd& x1, const Eigen::MatrixXd& c, const Eigen::MatrixXd& o) {
    return run_chains(field, schedule, x1, c, o, {}, SamplerMode::ODE).terminal();
  };
  return evaluate_policy(policy, prototype, episodes, seed);
}

// Noise-free expert, one env at a time through the environment's own rule.
inline EvalResult evaluate_expert(const Environment& prototype, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw ConfigError("evaluation needs at least one episode");
  EvalResult res;
  res.episodes = episodes;
  CounterRng unused(seed, 0);
  double s = 0.0, r = 0.0;
  for (std::size_t k = 0; k < episodes; ++k) {
    auto env = prototype.clone();
    env->reset(stream_id({seed, static_cast<std::uint64_t>(StreamTag::Evaluation), k}));
    for (;;) {
      const auto out = env->step(env->expert_action(0.0, unused));
      if (out.done) {
        res.rewards.push_back(out.reward);
        res.successes.push_back(out.success);
        s += out.success ? 1.0 : 0.0;
        r += out.reward;
        break;
      }
    }
  }
  res.success_rate = s / static_cast<double>(episodes);
  res.mean_reward = r / static_cast<double>(episodes);
  return res;
}

// Actions drawn uniformly from [-1, 1]^action_dim.
inline EvalResult evaluate_random(const Environment& prototype, std::size_t episodes, std::uint64_t seed) {
  std::uint64_t call = 0;  // one stream per environment step
  BatchPolicy policy = [&](const Eigen::MatrixXd& x1, const Eigen::MatrixXd&, const Eigen::MatrixXd&) {
    Eigen::MatrixXd a(x1.rows(), x1.cols());
    auto rng = CounterRng::keyed(seed, StreamTag::Evaluation, ~0ull, call++);
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, c) = rng.uniform(-1.0, 1.0);
    }
    return a;
  };
  return evaluate_policy(policy, prototype, episodes, seed);
}

// ---------------------------------------------------------------------------
// Supervised warm start: conditional flow matching on noisy expert demos.
// x_t = t x_1 + (1 - t) a with x_1 ~ N(0, I), regression target x_1 - a.

struct SftOptions {
  std::size_t demos = 32;
  double demo_noise = 0.1;
  std::size_t steps = 1500;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

inline SftOptions sft_options(const TrainConfig& c) {
  return {c.sft_demos, c.sft_demo_noise, c.sft_steps, c.sft_lr, c.sft_batch_size, c.seed};
}

struct SftResult {
  VelocityField field;
  double final_loss = 0.0;
  std::size_t demo_count = 0;
};

inline SftResult sft_train(VelocityField field, const Environment& prototype, const SftOptions& opt) {
  const auto demos = expert_demonstrations(prototype, opt.demos, opt.demo_noise, opt.seed);
  SftResult res{std::move(field), 0.0, demos.size()};
  if (demos.empty() || opt.steps == 0) return res;
  const auto& arch = res.field.architecture();
  const auto d = static_cast<Eigen::Index>(arch.state_dim());
  const auto b = static_cast<Eigen::Index>(opt.batch_size);
  Optimizer optimizer(OptimizerKind::Adam, opt.lr, res.field.parameter_count());
  Eigen::MatrixXd x(d, b), u(d, b), ctx(static_cast<Eigen::Index>(arch.context_dim), b),
      ob(static_cast<Eigen::Index>(arch.observation_dim), b);
  Eigen::RowVectorXd times(b);
  for (std::size_t s = 0; s < opt.steps; ++s) {
    auto rng = CounterRng::keyed(opt.seed, StreamTag::Sft, s);
    for (Eigen::Index c = 0; c < b; ++c) {
      const auto& demo = demos[rng.below(demos.size())];
      const double t = rng.uniform();
      const Eigen::VectorXd x1 = rng.normal_vector(d);
      x.col(c) = t * x1 + (1.0 - t) * demo.action;
      u.col(c) = x1 - demo.action;
      times[c] = t;
      ctx.col(c) = demo.context;
      ob.col(c) = demo.observation;
    }
    ForwardCache cache;
    const Eigen::MatrixXd v = res.field.velocity_batch(x, times, ctx, ob, &cache);
    const Eigen::MatrixXd diff = v - u;
    res.final_loss = diff.squaredNorm() / static_cast<double>(b);
    optimizer.step(res.field.parameters(), res.field.backward(cache, (2.0 / static_cast<double>(b)) * diff));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Per-record supervision model.
//
// Step-wise target x_{t_{j+1}}: the one-step Gaussian with the affine mean
// (Euler coefficients U = 1, B = -delta when mean correction is off).
//
// Terminal target x_{t_K} (our derivation): extrapolate the remaining chain
// with the recorded velocity after the noisy step j, giving
//   mean = U_j x_t + (B_j - t_{j+1}) v,
// and accumulate the injected variance of steps k >= j through later U's,
//   var = sum_{k >= j} sigma_k^2 delta_k prod_{m > k} U_m^2.
// Without mean correction the mean is x_t - t_j v with unit covariance.
// A zero variance (ODE rollouts) falls back to unit covariance.

struct SupervisionTarget {
  const Eigen::VectorXd* state = nullptr;
  TransitionModel model;
};

inline SupervisionTarget supervision_target(const TransitionRecord& rec, TargetKind target,
                                            bool mean_correction, const SolverSchedule& schedule,
                                            SamplerMode mode) {
  SupervisionTarget out;
  auto coefficients = [&](double t, double delta, double sigma) {
    if (mean_correction && sigma > 0.0) return affine_coefficients(t, delta, sigma);
    return AffineCoefficients{1.0, -delta};
  };
  if (target == TargetKind::StepWise) {
    out.state = &rec.x_next;
    out.model.coefficients = coefficients(rec.t, rec.delta, rec.sigma);
    out.model.variance = rec.sigma * rec.sigma * rec.delta;
  } else {
    out.state = &rec.terminal;
    const std::size_t j = rec.provenance.solver_index;
    if (j >= schedule.steps()) throw ContractError("record solver index beyond schedule");
    if (mean_correction) {
      const auto c = coefficients(rec.t, rec.delta, rec.sigma);
      out.model.coefficients = {c.state, c.velocity - schedule.time(j + 1)};
      double var = 0.0;
      for (std::size_t k = j; k < schedule.steps(); ++k) {
        const double sk = k == j ? rec.sigma : (mode == SamplerMode::SDE ? schedule.sigma(k) : 0.0);
        double term = sk * sk * schedule.delta(k);
        for (std::size_t m = k + 1; m < schedule.steps(); ++m) {
          const double sm = mode == SamplerMode::SDE ? schedule.sigma(m) : 0.0;
          const double um = 1.0 - sm * sm * schedule.delta(m) / (2.0 * schedule.time(m));
          term *= um * um;
        }
        var += term;
      }
      out.model.variance = var;
    } else {
      out.model.coefficients = {1.0, -rec.t};
      out.model.variance = 1.0;
    }
  }
  if (!(out.model.variance > 0.0)) out.model.variance = 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// One optimization phase over a buffer.

struct UpdateStats {
  double loss_mean = 0.0;
  double e_plus_mean = 0.0;
  double e_minus_mean = 0.0;
  double delta_v_norm = 0.0;
  double grad_norm = 0.0;
  std::size_t records = 0;
  std::size_t batches = 0;
};

struct ObjectiveSettings {
  ObjectiveKind kind = ObjectiveKind::Ranking;
  double beta = 1.0;
  double lambda_tr = 0.0;
  TargetKind target = TargetKind::StepWise;
  bool mean_correction = true;
  SamplerMode mode = SamplerMode::SDE;
  std::size_t batch_size = 128;
  std::size_t update_epochs = 2;
  std::uint64_t seed = 0;
};

inline ObjectiveSettings objective_settings(const TrainConfig& c) {
  return {c.objective, c.beta,        c.lambda_tr,     c.target, c.mean_correction,
          c.sampler,   c.batch_size, c.update_epochs, c.seed};
}

namespace detail {

inline std::string describe_batch(const std::vector<const TransitionRecord*>& batch, std::size_t bad) {
  std::ostringstream os;
  os.precision(17);
  os << "non-finite loss at batch record " << bad << "\n";
  auto put = [&os](const char* name, const Eigen::VectorXd& v) {
    os << "  " << name;
    for (Eigen::Index i = 0; i < v.size(); ++i) os << ' ' << v[i];
    os << '\n';
  };
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = *batch[i];
    os << "record " << i << " env " << r.provenance.env_index << " step " << r.provenance.env_step << " j "
       << r.provenance.solver_index << " t " << r.t << " delta " << r.delta << " sigma " << r.sigma << " r "
       << r.reward << '\n';
    put("x_t", r.x_t);
    put("x_next", r.x_next);
    put("v_old", r.v_old);
  }
  return os.str();
}

}  // namespace detail

inline UpdateStats optimize_iteration(VelocityField& theta, Optimizer& optimizer, const RolloutBuffer& buffer,
                                      const ObjectiveSettings& settings, const SolverSchedule& schedule,
                                      std::uint64_t iteration) {
  if (buffer.empty()) throw ContractError("optimize_iteration: empty buffer");
  if (settings.batch_size == 0) throw ConfigError("batch size must be >= 1");
  const auto& arch = theta.architecture();
  const auto d = static_cast<Eigen::Index>(arch.state_dim());
  const auto cd = static_cast<Eigen::Index>(arch.context_dim);
  const auto od = static_cast<Eigen::Index>(arch.observation_dim);
  const std::size_t n = buffer.records.size();

  UpdateStats stats;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < settings.update_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = CounterRng::keyed(settings.seed, StreamTag::Shuffle, iteration, epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    for (std::size_t start = 0; start < n; start += settings.batch_size) {
      const std::size_t end = std::min(n, start + settings.batch_size);
      const auto b = static_cast<Eigen::Index>(end - start);
      std::vector<const TransitionRecord*> batch;
      Eigen::MatrixXd x(d, b), ctx(cd, b), ob(od, b);
      Eigen::RowVectorXd times(b);
      for (Eigen::Index c = 0; c < b; ++c) {
        const auto& r = buffer.records[order[start + static_cast<std::size_t>(c)]];
        batch.push_back(&r);
        x.col(c) = r.x_t;
        times[c] = r.t;
        ctx.col(c) = r.context;
        ob.col(c) = r.observation;
      }
      ForwardCache cache;
      const Eigen::MatrixXd v = theta.velocity_batch(x, times, ctx, ob, &cache);
      Eigen::MatrixXd g(d, b);
      for (Eigen::Index c = 0; c < b; ++c) {
        const auto& r = *batch[static_cast<std::size_t>(c)];
        const auto branches = mirror(r.v_old, v.col(c), settings.beta);
        const auto target = supervision_target(r, settings.target, settings.mean_correction, schedule, settings.mode);
        const auto errors = step_errors(*target.state, branches, r.x_t, target.model);
        const auto value = evaluate_objective(settings.kind, errors, r.reward, branches.delta_v, settings.lambda_tr);
        if (!std::isfinite(value.breakdown.total) || !value.velocity_gradient.allFinite()) {
          throw NonFiniteLossError(detail::describe_batch(batch, static_cast<std::size_t>(c)));
        }
        g.col(c) = value.velocity_gradient / static_cast<double>(b);
        stats.loss_mean += value.breakdown.total;
        stats.e_plus_mean += errors.e_plus;
        stats.e_minus_mean += errors.e_minus;
        stats.delta_v_norm += branches.delta_v.norm();
      }
      const Eigen::VectorXd grad = theta.backward(cache, g);
      stats.grad_norm += grad.norm();
      optimizer.step(theta.parameters(), grad);
      stats.records += static_cast<std::size_t>(b);
      ++stats.batches;
    }
  }
  if (stats.records > 0) {
    const auto m = static_cast<double>(stats.records);
    stats.loss_mean /= m;
    stats.e_plus_mean /= m;
    stats.e_minus_mean /= m;
    stats.delta_v_norm /= m;
  }
  if (stats.batches > 0) stats.grad_norm /= static_cast<double>(stats.batches);
  return stats;
}

// ---------------------------------------------------------------------------
// Full run.

struct MetricsRow {
  std::size_t iteration = 0;
  double success_rate = 0.0;
  double loss_mean = 0.0;
  double e_plus_mean = 0.0;
  double e_minus_mean = 0.0;
  double delta_v_norm = 0.0;
  double grad_norm = 0.0;
  double alpha = 0.0;
  double seconds = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "iter,success_rate,loss_mean,e_plus_mean,e_minus_mean,delta_v_norm,grad_norm,alpha,seconds";

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  const auto old_precision = os.precision(17);
  os << r.iteration << ',' << r.success_rate << ',' << r.loss_mean << ',' << r.e_plus_mean << ','
     << r.e_minus_mean << ',' << r.delta_v_norm << ',' << r.grad_norm << ',' << r.alpha << ',' << r.seconds
     << '\n';
  os.precision(old_precision);
}

struct TrainResult {
  VelocityField initial;  // after the warm start
  VelocityField policy;   // final theta
  VelocityField rollout_policy;  // final theta_old
  std::vector<MetricsRow> rows;
  double initial_success = 0.0;
  double final_success = 0.0;
  double sft_loss = 0.0;
};

using MetricsSink = std::function<void(const MetricsRow&)>;

// Evaluation uses the seed of the run, so every arm of an ablation sharing a
// seed sees the same held-out episodes and the same warm start.
inline TrainResult run_training(const TrainConfig& config, const MetricsSink& sink = {}) {
  config.validate();
  const auto env = config.make_env();
  const auto schedule = config.schedule();
  const auto eval_seed = stream_id({config.seed, static_cast<std::uint64_t>(StreamTag::Evaluation)});

  TrainResult res;
  auto sft = sft_train(init_field(config.architecture(), config.seed), *env, sft_options(config));
  res.initial = sft.field;
  res.sft_loss = sft.final_loss;
  res.initial_success = evaluate(res.initial, *env, config.steps, config.eval_episodes, eval_seed).success_rate;
  res.final_success = res.initial_success;

  VelocityField theta = res.initial;
  VelocityField theta_old = res.initial;
  Optimizer optimizer(config.optimizer, config.lr, theta.parameter_count());
  const auto settings = objective_settings(config);
  CollectOptions collect_opts;
  collect_opts.parallel_envs = config.parallel_envs;
  collect_opts.rollout_epochs = config.rollout_epochs;
  collect_opts.selector = config.step_select;
  collect_opts.record_all_steps = config.record_all_steps;
  collect_opts.mode = config.sampler;
  collect_opts.seed = config.seed;

  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t total = config.iterations == 0 ? 0 : config.iterations - 1;
  double last_success = res.initial_success;
  for (std::size_t m = 0; m < config.iterations; ++m) {
    collect_opts.iteration = m;
    UpdateStats stats;
    try {
      const auto buffer = collect(theta_old, *env, schedule, collect_opts);
      stats = optimize_iteration(theta, optimizer, buffer, settings, schedule, m);
    } catch (const NonFiniteLossError& e) {
      throw NonFiniteLossError("iteration " + std::to_string(m) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ContractError("iteration " + std::to_string(m) + ": " + e.what());
    }
    const double alpha = alpha_schedule(m, total, config);
    ema_update(theta_old, theta, alpha);
    const bool last = m + 1 == config.iterations;
    if (last || (m + 1) % config.eval_every == 0) {
      last_success = evaluate(theta, *env, config.steps, config.eval_episodes, eval_seed).success_rate;
    }
    MetricsRow row{m,          last_success,       stats.loss_mean, stats.e_plus_mean, stats.e_minus_mean,
                   stats.delta_v_norm, stats.grad_norm, alpha, 0.0};
    if (config.wallclock) {
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    res.rows.push_back(row);
    if (sink) sink(row);
  }
  res.final_success = last_success;
  res.policy = std::move(theta);
  res.rollout_policy = std::move(theta_old);
  return res;
}

}  // namespace stepnft
