#pragma once

// Discretized flow-matching samplers.
//
// Time runs from t = 1 (noise) to t = 0 (action). One solver step goes from
// t to t - delta. The Euler ODE step is x - delta * v. The Euler-Maruyama
// step of the marginal-preserving reverse SDE is
//
//   x' = x - delta * [v + sigma^2 / (2t) * (x + (1 - t) v)] + sigma * sqrt(delta) * eps
//
// whose mean is affine in the velocity: mu = U x + B v with
//   U = 1 - sigma^2 delta / (2t),   B = -delta - (1 - t) sigma^2 delta / (2t),
// and whose covariance is sigma^2 delta I.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepnft/errors.hpp"
#include "stepnft/rng.hpp"

namespace stepnft {

enum class SamplerMode { ODE, SDE };

inline std::string to_string(SamplerMode m) { return m == SamplerMode::ODE ? "ode" : "sde"; }

inline SamplerMode parse_sampler_mode(const std::string& s) {
  if (s == "ode") return SamplerMode::ODE;
  if (s == "sde") return SamplerMode::SDE;
  throw ConfigError("unknown sampler mode '" + s + "' (expected ode|sde)");
}

// How the per-step noise level varies with solver time.
enum class NoiseShape { Constant, ScaledByTime };

inline std::string to_string(NoiseShape s) {
  return s == NoiseShape::Constant ? "constant" : "scaled_by_time";
}

inline NoiseShape parse_noise_shape(const std::string& s) {
  if (s == "constant") return NoiseShape::Constant;
  if (s == "scaled_by_time") return NoiseShape::ScaledByTime;
  throw ConfigError("unknown noise shape '" + s + "' (expected constant|scaled_by_time)");
}

struct SolverSchedule {
  std::vector<double> times;         // t_0 = 1 > ... > t_K = 0
  std::vector<double> noise_levels;  // sigma for the transition t_j -> t_{j+1}

  std::size_t steps() const { return noise_levels.size(); }
  double time(std::size_t j) const { return times.at(j); }
  double delta(std::size_t j) const { return times.at(j) - times.at(j + 1); }
  double sigma(std::size_t j) const { return noise_levels.at(j); }

  void validate() const {
    if (noise_levels.empty()) throw ConfigError("schedule needs at least one step");
    if (times.size() != noise_levels.size() + 1) {
      throw ConfigError("schedule: need K+1 times for K noise levels");
    }
    if (times.front() != 1.0 || times.back() != 0.0) {
      throw ConfigError("schedule times must start at exactly 1 and end at exactly 0");
    }
    for (std::size_t j = 0; j + 1 < times.size(); ++j) {
      if (!(times[j] > times[j + 1])) throw ConfigError("schedule times must be strictly decreasing");
    }
    for (double s : noise_levels) {
      if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("noise levels must be finite and >= 0");
    }
  }

  // Uniform grid delta = 1/K. The final transition into t = 0 carries no noise
  // unless `final_step_noise` is set; the drift correction there is evaluated
  // at t_{K-1} > 0, so every evaluated time stays strictly positive.
  static SolverSchedule uniform(std::size_t steps, double sigma, bool final_step_noise = false,
                                NoiseShape shape = NoiseShape::Constant) {
    if (steps == 0) throw ConfigError("schedule needs K >= 1");
    SolverSchedule s;
    s.times.resize(steps + 1);
    for (std::size_t j = 0; j <= steps; ++j) {
      s.times[j] = 1.0 - static_cast<double>(j) / static_cast<double>(steps);
    }
    s.times.front() = 1.0;
    s.times.back() = 0.0;
    s.noise_levels.resize(steps);
    for (std::size_t j = 0; j < steps; ++j) {
      s.noise_levels[j] = shape == NoiseShape::Constant ? sigma : sigma * s.times[j];
    }
    if (!final_step_noise) s.noise_levels.back() = 0.0;
    s.validate();
    return s;
  }

  static SolverSchedule from_times(std::vector<double> times, std::vector<double> noise) {
    SolverSchedule s{std::move(times), std::move(noise)};
    s.validate();
    return s;
  }
};

struct AffineCoefficients {
  double state = 1.0;     // U_t
  double velocity = 0.0;  // B_t
};

inline void check_step_arguments(double t, double delta, double sigma) {
  if (!(t > 0.0)) throw DomainError("affine coefficients need t > 0 (sigma^2/(2t) is singular at 0)");
  if (!(delta > 0.0)) throw ContractError("step size delta must be > 0");
  if (!(sigma >= 0.0)) throw ContractError("noise level sigma must be >= 0");
}

inline AffineCoefficients affine_coefficients(double t, double delta, double sigma) {
  check_step_arguments(t, delta, sigma);
  const double drift = sigma * sigma * delta / (2.0 * t);
#ifdef STEPNFT_MUTATE_FLIP_B
  // Deliberate sign error, compiled only into the mutation smoke test.
  return {1.0 - drift, delta + (1.0 - t) * drift};
#else
  return {1.0 - drift, -delta - (1.0 - t) * drift};
#endif
}

// Same coefficients via the endpoint mixture: the mean mixes the predicted
// endpoints x_t - t v and x_t + (1 - t) v with weights w0 and w1.
inline AffineCoefficients affine_coefficients_from_endpoint_weights(double t, double delta,
                                                                    double sigma) {
  check_step_arguments(t, delta, sigma);
  const double w0 = 1.0 - t + delta;
  const double w1 = (t - delta) - sigma * sigma * delta / (2.0 * t);
  return {w0 + w1, -t * w0 + (1.0 - t) * w1};
}

struct GaussianStep {
  Eigen::VectorXd mean;
  double variance = 0.0;  // Sigma_t = variance * I
  double t = 0.0;
  double delta = 0.0;
  double sigma = 0.0;
};

inline Eigen::VectorXd ode_step(const Eigen::VectorXd& x, const Eigen::VectorXd& v, double delta) {
  detail::require_same_dim(x.size(), v.size(), "ode_step");
  if (!(delta > 0.0)) throw ContractError("ode_step: delta must be > 0");
  return x - v * delta;
}

struct SdeStep {
  Eigen::VectorXd next;
  GaussianStep step;
};

inline SdeStep sde_step(const Eigen::VectorXd& x, const Eigen::VectorXd& v, double t, double delta,
                        double sigma, const Eigen::VectorXd& eps) {
  detail::require_same_dim(x.size(), v.size(), "sde_step velocity");
  detail::require_same_dim(x.size(), eps.size(), "sde_step noise");
  const auto c = affine_coefficients(t, delta, sigma);
  SdeStep out;
  out.step.mean = c.state * x + c.velocity * v;
  out.step.variance = sigma * sigma * delta;
  out.step.t = t;
  out.step.delta = delta;
  out.step.sigma = sigma;
  out.next = out.step.mean + sigma * std::sqrt(delta) * eps;
  return out;
}

// Termwise evaluation of the Euler-Maruyama update, kept separate from the
// affine form so the two can be cross-checked.
inline Eigen::VectorXd sde_step_direct(const Eigen::VectorXd& x, const Eigen::VectorXd& v,
                                       double t, double delta, double sigma,
                                       const Eigen::VectorXd& eps) {
  check_step_arguments(t, delta, sigma);
  const Eigen::VectorXd drift = v + (sigma * sigma / (2.0 * t)) * (x + (1.0 - t) * v);
  return x + drift * (-delta) + sigma * std::sqrt(delta) * eps;
}

// Anything that evaluates velocities for a batch of states at a shared time.
template <class F>
concept VelocityModel = requires(const F& f, const Eigen::MatrixXd& m, double t) {
  { f.velocity_batch(m, t, m, m) } -> std::convertible_to<Eigen::MatrixXd>;
};

// One step of a batch of chains (states are columns).
inline Eigen::MatrixXd advance_batch(const Eigen::MatrixXd& x, const Eigen::MatrixXd& v,
                                     const SolverSchedule& schedule, std::size_t j,
                                     SamplerMode mode, const Eigen::MatrixXd* eps) {
  const double t = schedule.time(j);
  const double delta = schedule.delta(j);
  if (mode == SamplerMode::ODE) return x - v * delta;
  const double sigma = schedule.sigma(j);
  const auto c = affine_coefficients(t, delta, sigma);
  Eigen::MatrixXd next = c.state * x + c.velocity * v;
  if (eps) next += (sigma * std::sqrt(delta)) * (*eps);
  return next;
}

struct SamplerChain {
  std::vector<Eigen::VectorXd> states;      // K + 1
  std::vector<Eigen::VectorXd> velocities;  // K
  std::vector<Eigen::VectorXd> noise;       // K (zeros in ODE mode)

  const Eigen::VectorXd& terminal() const { return states.back(); }
};

// Batched chains: column i of every matrix belongs to chain i.
struct ChainBatch {
  std::vector<Eigen::MatrixXd> states;
  std::vector<Eigen::MatrixXd> velocities;
  std::vector<Eigen::MatrixXd> noise;

  const Eigen::MatrixXd& terminal() const { return states.back(); }

  SamplerChain chain(Eigen::Index i) const {
    SamplerChain c;
    for (const auto& s : states) c.states.push_back(s.col(i));
    for (const auto& v : velocities) c.velocities.push_back(v.col(i));
    for (const auto& e : noise) c.noise.push_back(e.col(i));
    return c;
  }
};

// Runs a batch of chains with caller-supplied noise (one d x n matrix per
// step; ignored in ODE mode).
template <VelocityModel Field>
ChainBatch run_chains(const Field& field, const SolverSchedule& schedule,
                      const Eigen::MatrixXd& x1, const Eigen::MatrixXd& contexts,
                      const Eigen::MatrixXd& observations, const std::vector<Eigen::MatrixXd>& noise,
                      SamplerMode mode) {
  const std::size_t steps = schedule.steps();
  if (mode == SamplerMode::SDE && noise.size() != steps) {
    throw ContractError("run_chains: need one noise matrix per solver step");
  }
  ChainBatch out;
  out.states.reserve(steps + 1);
  out.states.push_back(x1);
  for (std::size_t j = 0; j < steps; ++j) {
    const Eigen::MatrixXd& x = out.states.back();
    Eigen::MatrixXd v = field.velocity_batch(x, schedule.time(j), contexts, observations);
    detail::require_same_dim(v.rows(), x.rows(), "run_chains velocity");
    const Eigen::MatrixXd* eps = nullptr;
    if (mode == SamplerMode::SDE) {
      if (noise[j].rows() != x.rows() || noise[j].cols() != x.cols()) {
        throw ContractError("run_chains: noise matrix shape mismatch");
      }
      eps = &noise[j];
    }
    out.states.push_back(advance_batch(x, v, schedule, j, mode, eps));
    out.velocities.push_back(std::move(v));
    out.noise.push_back(eps ? *eps : Eigen::MatrixXd::Zero(x.rows(), x.cols()));
  }
  return out;
}

// Single chain drawing its noise sequentially from `rng`.
template <VelocityModel Field>
SamplerChain run_chain(const Field& field, const SolverSchedule& schedule,
                       const Eigen::VectorXd& x1, const Eigen::VectorXd& context,
                       const Eigen::VectorXd& observation, CounterRng& rng, SamplerMode mode) {
  std::vector<Eigen::MatrixXd> noise;
  if (mode == SamplerMode::SDE) {
    for (std::size_t j = 0; j < schedule.steps(); ++j) noise.emplace_back(rng.normal_vector(x1.size()));
  }
  return run_chains(field, schedule, x1, context, observation, noise, mode).chain(0);
}

// Rebuilds the states from recorded velocities and noise without the field.
inline std::vector<Eigen::VectorXd> replay_chain(const SolverSchedule& schedule,
                                                 const SamplerChain& chain, SamplerMode mode) {
  if (chain.velocities.size() != schedule.steps() || chain.noise.size() != schedule.steps()) {
    throw ContractError("replay_chain: recorded chain does not match schedule");
  }
  std::vector<Eigen::VectorXd> states{chain.states.front()};
  for (std::size_t j = 0; j < schedule.steps(); ++j) {
    const Eigen::MatrixXd eps = chain.noise[j];
    states.push_back(advance_batch(states.back(), chain.velocities[j], schedule, j, mode,
                                   mode == SamplerMode::SDE ? &eps : nullptr)
                         .col(0));
  }
  return states;
}

// ---------------------------------------------------------------------------
// Chain dump, line-oriented text:
//   # stepnft-chain v1
//   # seed <u64>
//   # mode <ode|sde>
//   # times <t_0> ... <t_K>
//   # sigmas <s_0> ... <s_{K-1}>
//   <x_{t_0} coordinates>
//   ...
//   <x_{t_K} coordinates>
// Numbers are written with 17 significant digits so they parse back exactly.

inline void write_chain_dump(std::ostream& os, const SamplerChain& chain,
                             const SolverSchedule& schedule, std::uint64_t seed, SamplerMode mode) {
  const auto old_precision = os.precision(17);
  os << "# stepnft-chain v1\n# seed " << seed << "\n# mode " << to_string(mode) << "\n# times";
  for (double t : schedule.times) os << ' ' << t;
  os << "\n# sigmas";
  for (double s : schedule.noise_levels) os << ' ' << s;
  os << '\n';
  for (const auto& x : chain.states) {
    for (Eigen::Index i = 0; i < x.size(); ++i) os << (i ? " " : "") << x[i];
    os << '\n';
  }
  os.precision(old_precision);
}

struct ChainDump {
  std::uint64_t seed = 0;
  SamplerMode mode = SamplerMode::SDE;
  SolverSchedule schedule;
  std::vector<Eigen::VectorXd> states;
};

inline ChainDump read_chain_dump(std::istream& is) {
  ChainDump dump;
  std::string line;
  if (!std::getline(is, line) || line != "# stepnft-chain v1") throw FormatError("not a chain dump");
  auto header_values = [&](const std::string& key) {
    if (!std::getline(is, line) || line.rfind("# " + key, 0) != 0) {
      throw FormatError("chain dump: missing '" + key + "' header");
    }
    return std::istringstream(line.substr(2 + key.size()));
  };
  header_values("seed") >> dump.seed;
  std::string mode;
  header_values("mode") >> mode;
  dump.mode = parse_sampler_mode(mode);
  for (auto ss = header_values("times"); ss;) {
    double v;
    if (ss >> v) dump.schedule.times.push_back(v);
  }
  for (auto ss = header_values("sigmas"); ss;) {
    double v;
    if (ss >> v) dump.schedule.noise_levels.push_back(v);
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<double> vals;
    for (double v; ss >> v;) vals.push_back(v);
    dump.states.push_back(Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  }
  if (dump.states.size() != dump.schedule.times.size()) {
    throw FormatError("chain dump: state count does not match schedule");
  }
  return dump;
}

}  // namespace stepnft
