#include <sstream>

#include <gtest/gtest.h>

#include "stepnft/flow_solver.hpp"
#include "stepnft/policy_net.hpp"

using namespace stepnft;

namespace {

// Field with a constant output, for telescoping checks.
struct ConstantField {
  Eigen::VectorXd v;
  Eigen::MatrixXd velocity_batch(const Eigen::MatrixXd& x, double, const Eigen::MatrixXd&,
                                 const Eigen::MatrixXd&) const {
    return v.replicate(1, x.cols());
  }
};

}  // namespace

TEST(Schedule, UniformDefaults) {
  const auto s = SolverSchedule::uniform(4, 0.2);
  EXPECT_EQ(s.times, (std::vector<double>{1.0, 0.75, 0.5, 0.25, 0.0}));
  EXPECT_EQ(s.noise_levels, (std::vector<double>{0.2, 0.2, 0.2, 0.0}));
  EXPECT_EQ(SolverSchedule::uniform(4, 0.2, true).noise_levels.back(), 0.2);
  EXPECT_THROW(SolverSchedule::uniform(0, 0.2), ConfigError);
  EXPECT_THROW(SolverSchedule::from_times({1.0, 0.6, 0.7, 0.0}, {0, 0, 0}), ConfigError);
  EXPECT_THROW(SolverSchedule::from_times({0.9, 0.0}, {0.1}), ConfigError);
  EXPECT_THROW(SolverSchedule::from_times({1.0, 0.0}, {-0.1}), ConfigError);
}

TEST(AffineCoefficients, Examples) {
  auto c = affine_coefficients(1.0, 0.25, 0.2);
  EXPECT_NEAR(c.state, 0.995, 1e-15);
  EXPECT_NEAR(c.velocity, -0.25, 1e-15);
  auto w = affine_coefficients_from_endpoint_weights(1.0, 0.25, 0.2);
  EXPECT_NEAR(w.state, 0.995, 1e-12);
  EXPECT_NEAR(w.velocity, -0.25, 1e-12);

  c = affine_coefficients(0.5, 0.25, 0.2);
  EXPECT_NEAR(c.state, 0.99, 1e-15);
  EXPECT_NEAR(c.velocity, -0.255, 1e-15);
  w = affine_coefficients_from_endpoint_weights(0.5, 0.25, 0.2);
  EXPECT_NEAR(w.state, 0.99, 1e-12);
  EXPECT_NEAR(w.velocity, -0.255, 1e-12);
}

TEST(AffineCoefficients, NoiseFreeIsEuler) {
  for (double t : {0.1, 0.5, 1.0}) {
    const auto c = affine_coefficients(t, 0.05, 0.0);
    EXPECT_EQ(c.state, 1.0);
    EXPECT_EQ(c.velocity, -0.05);
  }
}

TEST(AffineCoefficients, NonPositiveTimeIsDomainError) {
  EXPECT_THROW(affine_coefficients(0.0, 0.1, 0.2), DomainError);
  EXPECT_THROW(affine_coefficients(-0.5, 0.1, 0.2), DomainError);
}

TEST(OdeStep, Examples) {
  const Eigen::Vector2d x(1, 1), v(2, 0);
  EXPECT_EQ(ode_step(x, v, 0.25), Eigen::Vector2d(0.5, 1.0));
  EXPECT_EQ(ode_step(x, Eigen::Vector2d::Zero(), 0.25), x);
  EXPECT_EQ(ode_step(ode_step(x, v, 0.125), v, 0.125), ode_step(x, v, 0.25));
  EXPECT_THROW(ode_step(x, Eigen::Vector3d::Zero(), 0.25), ContractError);
}

TEST(SdeStep, Examples) {
  const Eigen::Vector2d x(1, 1), v(2, 0);
  const auto noiseless = sde_step(x, v, 0.75, 0.25, 0.0, Eigen::Vector2d::Zero());
  EXPECT_EQ(noiseless.next, ode_step(x, v, 0.25));

  const auto s = sde_step(x, v, 1.0, 0.25, 0.2, Eigen::Vector2d::Zero());
  EXPECT_NEAR(s.step.mean[0], 0.495, 1e-12);
  EXPECT_NEAR(s.step.mean[1], 0.995, 1e-12);
  EXPECT_NEAR(s.step.variance, 0.01, 1e-15);
  const Eigen::Vector2d direct = sde_step_direct(x, v, 1.0, 0.25, 0.2, Eigen::Vector2d::Zero());
  EXPECT_LE((direct - s.next).cwiseAbs().maxCoeff(), 1e-12);

  const auto noisy = sde_step(x, v, 1.0, 0.25, 0.2, Eigen::Vector2d(1, 0));
  EXPECT_NEAR(noisy.next[0], 0.595, 1e-12);
  EXPECT_NEAR(noisy.next[1], 0.995, 1e-12);
  EXPECT_THROW(sde_step(x, v, 0.0, 0.25, 0.2, Eigen::Vector2d::Zero()), DomainError);
}

TEST(SdeStep, AffineMatchesDirectOnRandomTuples) {
  auto rng = CounterRng::keyed(0, StreamTag::Verify, 1);
  for (int k = 0; k < 10000; ++k) {
    const double t = rng.uniform(0.01, 1.0), delta = rng.uniform(1e-3, 1.0) * t, sigma = rng.uniform(0.0, 1.0);
    const Eigen::VectorXd x = rng.normal_vector(3), v = rng.normal_vector(3), e = rng.normal_vector(3);
    const auto a = sde_step(x, v, t, delta, sigma, e).next;
    const auto b = sde_step_direct(x, v, t, delta, sigma, e);
    ASSERT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, x.cwiseAbs().maxCoeff() + v.cwiseAbs().maxCoeff() * sigma * sigma / t));
  }
}

TEST(RunChain, OdeConstantVelocityTelescopes) {
  const ConstantField f{Eigen::Vector2d(0.4, -1.2)};
  const auto schedule = SolverSchedule::uniform(4, 0.0);
  auto rng = CounterRng::keyed(0, StreamTag::Chain);
  const Eigen::Vector2d x1(0.3, 0.1);
  const auto chain = run_chain(f, schedule, x1, Eigen::VectorXd(0), Eigen::VectorXd(0), rng, SamplerMode::ODE);
  ASSERT_EQ(chain.states.size(), 5u);
  ASSERT_EQ(chain.velocities.size(), 4u);
  EXPECT_LE((chain.terminal() - (x1 - f.v)).norm(), 1e-15);
}

TEST(RunChain, SdeWithZeroNoiseDiffersFromOdeUnlessSigmaZero) {
  const auto field = init_field(make_architecture(2, 0, 0, {8}), 1);
  const Eigen::Vector2d x1(0.5, -0.5);
  const Eigen::MatrixXd none(0, 1);
  const std::vector<Eigen::MatrixXd> zeros(4, Eigen::MatrixXd::Zero(2, 1));
  const auto ode = run_chains(field, SolverSchedule::uniform(4, 0.0), x1, none, none, zeros, SamplerMode::ODE);
  const auto sde0 = run_chains(field, SolverSchedule::uniform(4, 0.0), x1, none, none, zeros, SamplerMode::SDE);
  const auto sde = run_chains(field, SolverSchedule::uniform(4, 0.3), x1, none, none, zeros, SamplerMode::SDE);
  EXPECT_EQ(ode.terminal(), sde0.terminal());
  EXPECT_GT((ode.terminal() - sde.terminal()).norm(), 1e-6);
}

TEST(RunChain, SameSeedBitIdenticalAndReplayable) {
  const auto field = init_field(make_architecture(3, 1, 0, {8}), 2);
  const auto schedule = SolverSchedule::uniform(4, 0.2, true);
  const Eigen::Vector3d x1(0.1, 0.2, 0.3);
  const Eigen::VectorXd c = Eigen::VectorXd::Constant(1, 0.7);
  auto r1 = CounterRng::keyed(5, StreamTag::Chain);
  auto r2 = CounterRng::keyed(5, StreamTag::Chain);
  const auto a = run_chain(field, schedule, x1, c, Eigen::VectorXd(0), r1, SamplerMode::SDE);
  const auto b = run_chain(field, schedule, x1, c, Eigen::VectorXd(0), r2, SamplerMode::SDE);
  EXPECT_EQ(a.states, b.states);
  EXPECT_EQ(replay_chain(schedule, a, SamplerMode::SDE), a.states);
}

TEST(ChainDump, RoundTrip) {
  const auto field = init_field(make_architecture(2, 0, 0, {4}), 3);
  const auto schedule = SolverSchedule::uniform(4, 0.2);
  auto rng = CounterRng::keyed(8, StreamTag::Chain);
  const auto chain = run_chain(field, schedule, Eigen::Vector2d(1, -1), Eigen::VectorXd(0), Eigen::VectorXd(0), rng,
                               SamplerMode::SDE);
  std::stringstream ss;
  write_chain_dump(ss, chain, schedule, 8, SamplerMode::SDE);
  const auto dump = read_chain_dump(ss);
  EXPECT_EQ(dump.seed, 8u);
  EXPECT_EQ(dump.mode, SamplerMode::SDE);
  EXPECT_EQ(dump.schedule.times, schedule.times);
  EXPECT_EQ(dump.schedule.noise_levels, schedule.noise_levels);
  EXPECT_EQ(dump.states, chain.states);
}
