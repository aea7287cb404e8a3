#pragma once

// Data collection with the rollout (EMA) policy.
//
// Every environment step runs one batched solver chain per active env, keeps
// one transition (x_{t_j}, x_{t_{j+1}}) chosen by the step selector, and
// executes the terminal sample. When an episode ends, its terminal reward is
// copied onto every transition it produced.
//
// Streams: env k of rollout epoch e has global index g = e * parallel_envs + k.
//   reset seed      stream_id(seed, Rollout, iteration, g)
//   x_1 and noise   CounterRng(seed, Rollout, iteration, g, env_step): x_1 first,
//                   then one eps per solver step (SDE mode only)
//   step selection  CounterRng(seed, StepSelect, iteration, g, env_step)

#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepnft/environment.hpp"
#include "stepnft/errors.hpp"
#include "stepnft/flow_solver.hpp"
#include "stepnft/policy_net.hpp"
#include "stepnft/rng.hpp"

namespace stepnft {

struct StepSelector {
  enum class Kind { Uniform, Fixed } kind = Kind::Uniform;
  std::size_t index = 0;

  static StepSelector uniform() { return {}; }
  static StepSelector fixed(std::size_t j) { return {Kind::Fixed, j}; }
};

inline std::string to_string(const StepSelector& s) {
  return s.kind == StepSelector::Kind::Uniform ? "uniform" : "fixed:" + std::to_string(s.index);
}

inline StepSelector parse_step_selector(const std::string& s) {
  if (s == "uniform") return StepSelector::uniform();
  if (s.rfind("fixed:", 0) == 0) {
    const std::string digits = s.substr(6);
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("bad fixed step index in '" + s + "'");
    }
    return StepSelector::fixed(std::stoul(digits));
  }
  throw ConfigError("unknown step selector '" + s + "' (expected uniform|fixed:<j>)");
}

inline std::size_t select_step(const StepSelector& selector, std::size_t steps, CounterRng& rng) {
  if (steps == 0) throw ConfigError("select_step: K must be >= 1");
  if (selector.kind == StepSelector::Kind::Fixed) {
    if (selector.index >= steps) {
      throw ConfigError("fixed step index " + std::to_string(selector.index) + " out of range for K=" +
                        std::to_string(steps));
    }
    return selector.index;
  }
  return static_cast<std::size_t>(rng.below(steps));
}

struct Provenance {
  std::size_t env_index = 0;
  std::size_t env_step = 0;
  std::size_t solver_index = 0;
  std::uint64_t seed = 0;
};

struct TransitionRecord {
  Eigen::VectorXd x_t;
  Eigen::VectorXd x_next;
  Eigen::VectorXd v_old;
  double t = 0.0;
  double delta = 0.0;
  double sigma = 0.0;
  Eigen::VectorXd observation;
  Eigen::VectorXd context;
  Eigen::VectorXd terminal;  // x_{t_K}, the executed action
  double reward = 0.0;
  Provenance provenance;
};

struct EpisodeSummary {
  std::size_t env_index = 0;
  std::size_t length = 0;
  double reward = 0.0;
  bool success = false;
};

struct RolloutBuffer {
  std::vector<TransitionRecord> records;
  std::vector<EpisodeSummary> episodes;

  bool empty() const { return records.empty(); }
  void clear() {
    records.clear();
    episodes.clear();
  }

  double success_rate() const {
    if (episodes.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : episodes) s += e.success ? 1.0 : 0.0;
    return s / static_cast<double>(episodes.size());
  }
};

struct CollectOptions {
  std::size_t parallel_envs = 64;
  std::size_t rollout_epochs = 8;
  StepSelector selector;
  bool record_all_steps = false;
  SamplerMode mode = SamplerMode::SDE;
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
};

inline std::uint64_t rollout_reset_seed(std::uint64_t seed, std::uint64_t iteration,
                                        std::uint64_t env_index) {
  return stream_id({seed, static_cast<std::uint64_t>(StreamTag::Rollout), iteration, env_index});
}

namespace detail {

inline Eigen::MatrixXd gather(const std::vector<EnvObservation>& obs, const std::vector<std::size_t>& idx,
                              bool context, std::size_t rows) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t c = 0; c < idx.size(); ++c) {
    const auto& v = context ? obs[idx[c]].context : obs[idx[c]].observation;
    require_same_dim(v.size(), rows, context ? "env context" : "env observation");
    m.col(static_cast<Eigen::Index>(c)) = v;
  }
  return m;
}

}  // namespace detail

inline RolloutBuffer collect(const VelocityField& rollout_field, const Environment& prototype,
                             const SolverSchedule& schedule, const CollectOptions& options) {
  const auto& arch = rollout_field.architecture();
  detail::require_same_dim(arch.state_dim(), prototype.action_dim(), "collect: field state vs env action");
  detail::require_same_dim(arch.context_dim, prototype.context_dim(), "collect: field vs env context");
  detail::require_same_dim(arch.observation_dim, prototype.observation_dim(),
                           "collect: field vs env observation");
  if (options.parallel_envs == 0) throw ConfigError("collect: need at least one environment");
  const std::size_t steps = schedule.steps();
  if (options.selector.kind == StepSelector::Kind::Fixed && options.selector.index >= steps) {
    throw ConfigError("collect: fixed step index out of range");
  }
  const auto dim = static_cast<Eigen::Index>(arch.state_dim());

  RolloutBuffer buffer;
  std::vector<std::unique_ptr<Environment>> envs;
  for (std::size_t k = 0; k < options.parallel_envs; ++k) envs.push_back(prototype.clone());

  for (std::size_t epoch = 0; epoch < options.rollout_epochs; ++epoch) {
    const std::size_t base = epoch * options.parallel_envs;
    std::vector<EnvObservation> obs(options.parallel_envs);
    std::vector<std::vector<std::size_t>> episode_records(options.parallel_envs);
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < options.parallel_envs; ++k) {
      obs[k] = envs[k]->reset(rollout_reset_seed(options.seed, options.iteration, base + k));
      active.push_back(k);
    }
    for (std::size_t env_step = 0; !active.empty(); ++env_step) {
      const auto n = static_cast<Eigen::Index>(active.size());
      Eigen::MatrixXd x1(dim, n);
      std::vector<Eigen::MatrixXd> noise;
      if (options.mode == SamplerMode::SDE) noise.assign(steps, Eigen::MatrixXd(dim, n));
      for (Eigen::Index c = 0; c < n; ++c) {
        auto rng = CounterRng::keyed(options.seed, StreamTag::Rollout, options.iteration,
                                     base + active[static_cast<std::size_t>(c)], env_step);
        x1.col(c) = rng.normal_vector(dim);
        for (auto& e : noise) e.col(c) = rng.normal_vector(dim);
      }
      const auto chains = run_chains(rollout_field, schedule, x1,
                                     detail::gather(obs, active, true, arch.context_dim),
                                     detail::gather(obs, active, false, arch.observation_dim),
                                     noise, options.mode);
      std::vector<std::size_t> still_active;
      for (Eigen::Index c = 0; c < n; ++c) {
        const std::size_t k = active[static_cast<std::size_t>(c)];
        const std::size_t g = base + k;
        auto pick = [&](std::size_t j) {
          TransitionRecord rec;
          rec.x_t = chains.states[j].col(c);
          rec.x_next = chains.states[j + 1].col(c);
          rec.v_old = chains.velocities[j].col(c);
          rec.t = schedule.time(j);
          rec.delta = schedule.delta(j);
          rec.sigma = options.mode == SamplerMode::SDE ? schedule.sigma(j) : 0.0;
          rec.observation = obs[k].observation;
          rec.context = obs[k].context;
          rec.terminal = chains.terminal().col(c);
          rec.provenance = {g, env_step, j, options.seed};
          episode_records[k].push_back(buffer.records.size());
          buffer.records.push_back(std::move(rec));
        };
        if (options.record_all_steps) {
          for (std::size_t j = 0; j < steps; ++j) pick(j);
        } else {
          auto rng = CounterRng::keyed(options.seed, StreamTag::StepSelect, options.iteration, g, env_step);
          pick(select_step(options.selector, steps, rng));
        }
        const auto out = envs[k]->step(chains.terminal().col(c));
        obs[k] = out.next;
        if (out.done) {
          for (auto r : episode_records[k]) buffer.records[r].reward = out.reward;
          buffer.episodes.push_back({g, env_step + 1, out.reward, out.success});
        } else {
          still_active.push_back(k);
        }
      }
      active = std::move(still_active);
    }
  }
  return buffer;
}

// ---------------------------------------------------------------------------
// Buffer dump.
//   <stem>.csv  header "env_idx,env_step,j,t,r", one row per record
//   <stem>.bin  little-endian: char[8] "STEPNFTB", u32 version (1),
//               u64 record count, u64 state_dim, u64 observation_dim, u64 context_dim,
//               then per record f64 arrays x_t, x_next, v_old, observation,
//               context, terminal followed by f64 delta and f64 sigma.

inline void write_buffer_csv(std::ostream& os, const RolloutBuffer& buffer) {
  const auto old_precision = os.precision(17);
  os << "env_idx,env_step,j,t,r\n";
  for (const auto& r : buffer.records) {
    os << r.provenance.env_index << ',' << r.provenance.env_step << ',' << r.provenance.solver_index
       << ',' << r.t << ',' << r.reward << '\n';
  }
  os.precision(old_precision);
}

inline void write_buffer_sidecar(std::ostream& os, const RolloutBuffer& buffer) {
  os.write("STEPNFTB", 8);
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_pod<std::uint64_t>(os, buffer.records.size());
  const auto& first = buffer.records.empty() ? TransitionRecord{} : buffer.records.front();
  detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(first.x_t.size()));
  detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(first.observation.size()));
  detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(first.context.size()));
  auto put = [&os](const Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) detail::write_pod<double>(os, v[i]);
  };
  for (const auto& r : buffer.records) {
    put(r.x_t);
    put(r.x_next);
    put(r.v_old);
    put(r.observation);
    put(r.context);
    put(r.terminal);
    detail::write_pod<double>(os, r.delta);
    detail::write_pod<double>(os, r.sigma);
  }
}

// Reads a dump back; CSV supplies the scalar columns, the sidecar the vectors.
inline RolloutBuffer read_buffer_dump(std::istream& csv, std::istream& sidecar) {
  RolloutBuffer buffer;
  std::string line;
  if (!std::getline(csv, line) || line != "env_idx,env_step,j,t,r") throw FormatError("buffer csv: bad header");
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    TransitionRecord r;
    char comma;
    std::istringstream ss(line);
    if (!(ss >> r.provenance.env_index >> comma >> r.provenance.env_step >> comma >>
          r.provenance.solver_index >> comma >> r.t >> comma >> r.reward)) {
      throw FormatError("buffer csv: bad row '" + line + "'");
    }
    buffer.records.push_back(std::move(r));
  }
  char magic[8];
  if (!sidecar.read(magic, 8) || std::string(magic, 8) != "STEPNFTB") throw FormatError("buffer sidecar: bad magic");
  if (detail::read_pod<std::uint32_t>(sidecar) != 1) throw FormatError("buffer sidecar: bad version");
  const auto count = detail::read_pod<std::uint64_t>(sidecar);
  if (count != buffer.records.size()) throw FormatError("buffer sidecar: record count differs from csv");
  const auto sd = static_cast<Eigen::Index>(detail::read_pod<std::uint64_t>(sidecar));
  const auto od = static_cast<Eigen::Index>(detail::read_pod<std::uint64_t>(sidecar));
  const auto cd = static_cast<Eigen::Index>(detail::read_pod<std::uint64_t>(sidecar));
  auto get = [&sidecar](Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = detail::read_pod<double>(sidecar);
    return v;
  };
  for (auto& r : buffer.records) {
    r.x_t = get(sd);
    r.x_next = get(sd);
    r.v_old = get(sd);
    r.observation = get(od);
    r.context = get(cd);
    r.terminal = get(sd);
    r.delta = detail::read_pod<double>(sidecar);
    r.sigma = detail::read_pod<double>(sidecar);
  }
  return buffer;
}

}  // namespace stepnft
