#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "stepnft/trainer.hpp"

using namespace stepnft;

namespace {

VelocityField make_field(std::uint64_t seed) { return init_field(make_architecture(2, 2, 0, {8, 8}), seed); }

TransitionRecord make_record(const VelocityField& rollout, CounterRng& rng, double reward) {
  TransitionRecord r;
  r.t = 0.75;
  r.delta = 0.25;
  r.sigma = 0.3;
  r.x_t = rng.normal_vector(2);
  r.context = rng.normal_vector(2);
  r.observation = Eigen::VectorXd(0);
  r.v_old = forward(rollout, r.x_t, r.t, r.context, r.observation);
  r.x_next = sde_step(r.x_t, r.v_old, r.t, r.delta, r.sigma, rng.normal_vector(2)).next;
  r.terminal = r.x_next;
  r.reward = reward;
  r.provenance.solver_index = 1;
  return r;
}

ObjectiveSettings single_pass(std::size_t batch) {
  ObjectiveSettings s;
  s.batch_size = batch;
  s.update_epochs = 1;
  return s;
}

Settings tiny_bandit() {
  Settings s;
  for (const char* kv : {"train.iterations=3", "rollout.parallel_envs=8", "rollout.rollout_epochs=1",
                         "train.eval_episodes=16", "train.eval_every=1", "sft.steps=20", "sft.demos=4",
                         "policy.hidden=8,8", "optimizer.batch_size=4"}) {
    s.apply_override(kv);
  }
  return s;
}

}  // namespace

TEST(Ema, Examples) {
  const auto arch = make_architecture(1, 0, 0, {2});
  const auto n = static_cast<Eigen::Index>(arch.parameter_count());
  VelocityField zeros(arch, Eigen::VectorXd::Zero(n)), ones(arch, Eigen::VectorXd::Ones(n));

  VelocityField a = zeros;
  ema_update(a, ones, 0.0);
  EXPECT_EQ(a.parameters(), ones.parameters());

  VelocityField b = zeros;
  ema_update(b, ones, 1.0 - 1e-16);
  EXPECT_LE(b.parameters().cwiseAbs().maxCoeff(), 1e-15);

  VelocityField c = zeros;
  ema_update(c, ones, 0.1);
  EXPECT_LE((c.parameters() - Eigen::VectorXd::Constant(n, 0.9)).cwiseAbs().maxCoeff(), 1e-15);

  EXPECT_THROW(ema_update(c, ones, 1.0), ContractError);
  EXPECT_THROW(ema_update(c, ones, -0.1), ContractError);
}

TEST(Ema, ConvexCombinationCoordinatewise) {
  auto old_f = make_field(1);
  const auto theta = make_field(2);
  const Eigen::VectorXd before = old_f.parameters();
  ema_update(old_f, theta, 0.37);
  for (Eigen::Index i = 0; i < before.size(); ++i) {
    EXPECT_GE(old_f.parameters()[i], std::min(before[i], theta.parameters()[i]) - 1e-15);
    EXPECT_LE(old_f.parameters()[i], std::max(before[i], theta.parameters()[i]) + 1e-15);
  }
}

TEST(AlphaSchedule, Examples) {
  const auto lin = AlphaScheduleKind::Linear;
  EXPECT_EQ(alpha_schedule(0, 400, lin, 0.1, 0.995), 0.1);
  EXPECT_NEAR(alpha_schedule(400, 400, lin, 0.1, 0.995), 0.995, 1e-15);
  EXPECT_NEAR(alpha_schedule(200, 400, lin, 0.1, 0.995), 0.5475, 1e-15);
  EXPECT_EQ(alpha_schedule(200, 400, AlphaScheduleKind::Constant, 0.3, 0.995), 0.3);
  double last = 0;
  for (std::size_t m = 0; m <= 50; ++m) {
    const double a = alpha_schedule(m, 50, lin, 0.1, 0.995);
    EXPECT_GE(a, last);
    last = a;
  }
  EXPECT_THROW(alpha_schedule(51, 50, lin, 0.1, 0.995), ContractError);
}

TEST(Optimizer, SgdAndAdamSteps) {
  Eigen::VectorXd p = Eigen::Vector2d(1.0, -1.0);
  Optimizer sgd(OptimizerKind::Sgd, 0.1, 2);
  sgd.step(p, Eigen::Vector2d(2.0, 0.0));
  EXPECT_NEAR(p[0], 0.8, 1e-15);
  EXPECT_EQ(p[1], -1.0);
  Eigen::VectorXd q = Eigen::Vector2d(0.0, 0.0);
  Optimizer adam(OptimizerKind::Adam, 0.01, 2);
  adam.step(q, Eigen::Vector2d(3.0, -0.5));
  EXPECT_NEAR(q[0], -0.01, 1e-9);  // first bias-corrected step has magnitude lr
  EXPECT_NEAR(q[1], 0.01, 1e-9);
  EXPECT_THROW(Optimizer(OptimizerKind::Adam, 0.0, 2), ConfigError);
}

TEST(OptimizeIteration, NeutralLabelsLeaveParametersUnchanged) {
  const auto rollout = make_field(3);
  auto theta = make_field(4);
  auto rng = CounterRng::keyed(0, StreamTag::Verify, 5);
  RolloutBuffer buf;
  for (int i = 0; i < 16; ++i) buf.records.push_back(make_record(rollout, rng, 0.5));
  const Eigen::VectorXd before = theta.parameters();
  Optimizer opt(OptimizerKind::Adam, 1e-3, theta.parameter_count());
  optimize_iteration(theta, opt, buf, single_pass(4), SolverSchedule::uniform(4, 0.3), 0);
  EXPECT_EQ(theta.parameters(), before);
}

TEST(OptimizeIteration, SyncedPolicyGivesLogTwo) {
  const auto rollout = make_field(3);
  auto theta = rollout;
  auto rng = CounterRng::keyed(0, StreamTag::Verify, 6);
  RolloutBuffer buf;
  for (int i = 0; i < 8; ++i) buf.records.push_back(make_record(rollout, rng, i % 2));
  Optimizer opt(OptimizerKind::Sgd, 1e-3, theta.parameter_count());
  const auto stats = optimize_iteration(theta, opt, buf, single_pass(8), SolverSchedule::uniform(4, 0.3), 0);
  EXPECT_NEAR(stats.loss_mean, std::log(2.0), 1e-15);
  EXPECT_NEAR(stats.e_plus_mean, stats.e_minus_mean, 1e-15);
}

TEST(OptimizeIteration, SingleRecordUpdateMatchesClosedForm) {
  const auto rollout = make_field(7);
  auto theta = make_field(8);
  auto rng = CounterRng::keyed(0, StreamTag::Verify, 7);
  const auto rec = make_record(rollout, rng, 1.0);
  RolloutBuffer buf;
  buf.records.push_back(rec);
  const Eigen::VectorXd before = theta.parameters();
  Optimizer opt(OptimizerKind::Sgd, 1e-2, theta.parameter_count());
  optimize_iteration(theta, opt, buf, single_pass(1), SolverSchedule::uniform(4, 0.3), 0);
  const Eigen::VectorXd update = theta.parameters() - before;

  // Closed form: -grad = 2 beta sigma(z) y J^T B Sigma^{-1} e.
  const VelocityField at(make_field(8));
  const Eigen::VectorXd v = forward(at, rec.x_t, rec.t, rec.context, rec.observation);
  const auto c = affine_coefficients(rec.t, rec.delta, rec.sigma);
  const double var = rec.sigma * rec.sigma * rec.delta;
  const Eigen::VectorXd e = rec.x_next - (c.state * rec.x_t + c.velocity * rec.v_old);
  const Eigen::VectorXd w = c.velocity * e / var;
  const auto tape = backward(at, rec.x_t, rec.t, rec.context, rec.observation,
                             [&](const Eigen::VectorXd& out) { return std::pair<double, Eigen::VectorXd>{w.dot(out), w}; });
  const double dEdiff = -4.0 * e.dot(c.velocity * (v - rec.v_old)) / var;
  const double z = 0.5 * dEdiff;
  const Eigen::VectorXd expected = 1e-2 * 2.0 * sigmoid(z) * tape.gradient;
  const double cosine = update.dot(expected) / (update.norm() * expected.norm());
  EXPECT_GT(cosine, 1.0 - 1e-8);
  EXPECT_NEAR(update.norm() / expected.norm(), 1.0, 1e-8);
}

TEST(OptimizeIteration, NonFiniteLossAbortsWithDiagnostic) {
  const auto rollout = make_field(3);
  auto theta = make_field(4);
  auto rng = CounterRng::keyed(0, StreamTag::Verify, 8);
  RolloutBuffer buf;
  buf.records.push_back(make_record(rollout, rng, 1.0));
  buf.records.back().x_next[0] = std::numeric_limits<double>::quiet_NaN();
  Optimizer opt(OptimizerKind::Sgd, 1e-3, theta.parameter_count());
  try {
    optimize_iteration(theta, opt, buf, single_pass(1), SolverSchedule::uniform(4, 0.3), 0);
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_NE(std::string(e.what()).find("x_next"), std::string::npos);
  }
  RolloutBuffer empty;
  EXPECT_THROW(optimize_iteration(theta, opt, empty, single_pass(1), SolverSchedule::uniform(4, 0.3), 0),
               ContractError);
}

TEST(SupervisionTarget, TerminalVarianceAccumulatesThroughLaterSteps) {
  const auto schedule = SolverSchedule::uniform(4, 0.2, true);
  TransitionRecord r;
  r.provenance.solver_index = 1;
  r.t = schedule.time(1);
  r.delta = schedule.delta(1);
  r.sigma = schedule.sigma(1);
  r.x_next = Eigen::Vector2d(1, 2);
  r.terminal = Eigen::Vector2d(3, 4);
  const auto tgt = supervision_target(r, TargetKind::Terminal, true, schedule, SamplerMode::SDE);
  EXPECT_EQ(tgt.state, &r.terminal);
  auto u = [&](std::size_t m) { return 1.0 - 0.04 * 0.25 / (2.0 * schedule.time(m)); };
  const double s2d = 0.04 * 0.25;
  const double expected = s2d * u(2) * u(2) * u(3) * u(3) + s2d * u(3) * u(3) + s2d;
  EXPECT_NEAR(tgt.model.variance, expected, 1e-15);
  const auto c = affine_coefficients(0.75, 0.25, 0.2);
  EXPECT_EQ(tgt.model.coefficients.state, c.state);
  EXPECT_NEAR(tgt.model.coefficients.velocity, c.velocity - 0.5, 1e-15);

  const auto naive = supervision_target(r, TargetKind::Terminal, false, schedule, SamplerMode::SDE);
  EXPECT_EQ(naive.model.coefficients.state, 1.0);
  EXPECT_EQ(naive.model.coefficients.velocity, -0.75);
  EXPECT_EQ(naive.model.variance, 1.0);

  const auto step = supervision_target(r, TargetKind::StepWise, true, schedule, SamplerMode::SDE);
  EXPECT_EQ(step.state, &r.x_next);
  EXPECT_NEAR(step.model.variance, s2d, 1e-16);

  r.sigma = 0.0;  // ODE rollouts: unit covariance fallback
  const auto ode = supervision_target(r, TargetKind::StepWise, true, schedule, SamplerMode::ODE);
  EXPECT_EQ(ode.model.variance, 1.0);
  EXPECT_EQ(ode.model.coefficients.velocity, -0.25);
}

TEST(Evaluation, RandomBanditPolicyMatchesAreaRatio) {
  const std::size_t n = 20000;
  const auto res = evaluate_random(BanditEnv{}, n, 11);
  const double p = std::numbers::pi * 0.15 * 0.15 / 4.0;
  EXPECT_NEAR(res.success_rate, p, 3.0 * std::sqrt(p * (1 - p) / static_cast<double>(n)));
  EXPECT_THROW(evaluate_random(BanditEnv{}, 0, 0), ConfigError);
}

TEST(Evaluation, GreedyEvaluationIsDeterministic) {
  const auto f = make_field(1);
  const auto a = evaluate(f, BanditEnv{}, 4, 64, 3);
  const auto b = evaluate(f, BanditEnv{}, 4, 64, 3);
  EXPECT_EQ(a.rewards, b.rewards);
}

TEST(Sft, ReducesFlowMatchingLossDeterministically) {
  SftOptions o;
  o.demos = 16;
  o.steps = 200;
  const auto a = sft_train(make_field(0), BanditEnv{}, o);
  const auto b = sft_train(make_field(0), BanditEnv{}, o);
  EXPECT_EQ(a.field.parameters(), b.field.parameters());
  EXPECT_EQ(a.demo_count, 16u);
  o.steps = 1;
  const auto early = sft_train(make_field(0), BanditEnv{}, o);
  EXPECT_LT(a.final_loss, early.final_loss);
}

TEST(RunTraining, ZeroIterationsReturnsWarmStart) {
  auto s = tiny_bandit();
  s.apply_override("train.iterations=0");
  const auto res = run_training(parse_config(s));
  EXPECT_TRUE(res.rows.empty());
  EXPECT_EQ(res.policy.parameters(), res.initial.parameters());
  EXPECT_EQ(res.final_success, res.initial_success);
}

TEST(RunTraining, IdenticalConfigsGiveIdenticalMetrics) {
  const auto c = parse_config(tiny_bandit());
  const auto a = run_training(c), b = run_training(c);
  ASSERT_EQ(a.rows.size(), 3u);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].loss_mean, b.rows[i].loss_mean);
    EXPECT_EQ(a.rows[i].grad_norm, b.rows[i].grad_norm);
    EXPECT_EQ(a.rows[i].success_rate, b.rows[i].success_rate);
    EXPECT_EQ(a.rows[i].seconds, 0.0);
  }
  EXPECT_EQ(a.policy.parameters(), b.policy.parameters());
  EXPECT_EQ(a.rows[0].alpha, 0.1);
  EXPECT_NEAR(a.rows[2].alpha, 0.995, 1e-15);
}

TEST(RunTraining, EveryObjectiveAndTargetRuns) {
  for (const char* kv : {"objective=wmse", "objective=positive_only", "objective=negative_only", "target=terminal",
                         "objective.mean_correction=false", "sampler=ode", "objective.lambda_tr=0.1",
                         "optimizer.kind=sgd", "task.reward=shaped", "sampler.noise_shape=scaled_by_time"}) {
    auto s = tiny_bandit();
    s.apply_override(kv);
    const auto res = run_training(parse_config(s));
    ASSERT_EQ(res.rows.size(), 3u) << kv;
    for (const auto& row : res.rows) {
      EXPECT_TRUE(std::isfinite(row.loss_mean)) << kv;
      EXPECT_GE(row.success_rate, 0.0);
      EXPECT_LE(row.success_rate, 1.0);
    }
  }
}

TEST(RunTraining, ReachTaskRuns) {
  auto s = tiny_bandit();
  s.apply_override("env=reach");
  const auto res = run_training(parse_config(s));
  EXPECT_EQ(res.rows.size(), 3u);
}
