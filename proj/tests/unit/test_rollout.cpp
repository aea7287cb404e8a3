#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "stepnft/rollout.hpp"

using namespace stepnft;

namespace {

VelocityField bandit_field(std::uint64_t seed = 0) {
  BanditEnv env;
  return init_field(make_architecture(env.action_dim(), env.context_dim(), env.observation_dim(), {16}), seed);
}

CollectOptions options(std::size_t envs, std::size_t epochs, StepSelector sel = {}) {
  CollectOptions o;
  o.parallel_envs = envs;
  o.rollout_epochs = epochs;
  o.selector = sel;
  o.seed = 3;
  return o;
}

}  // namespace

TEST(SelectStep, Examples) {
  auto rng = CounterRng::keyed(0, StreamTag::StepSelect);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(select_step(StepSelector::fixed(0), 4, rng), 0u);
    EXPECT_EQ(select_step(StepSelector::uniform(), 1, rng), 0u);
  }
  EXPECT_THROW(select_step(StepSelector::fixed(4), 4, rng), ConfigError);
}

TEST(SelectStep, UniformFrequencies) {
  auto rng = CounterRng::keyed(1, StreamTag::StepSelect);
  const int n = 100000;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < n; ++i) ++counts[select_step(StepSelector::uniform(), 4, rng)];
  const double se = std::sqrt(0.25 * 0.75 / n);
  for (int c : counts) EXPECT_NEAR(c / static_cast<double>(n), 0.25, 3 * se);
}

TEST(SelectStep, ParseNames) {
  EXPECT_EQ(to_string(parse_step_selector("fixed:2")), "fixed:2");
  EXPECT_EQ(parse_step_selector("uniform").kind, StepSelector::Kind::Uniform);
  EXPECT_THROW(parse_step_selector("fixed:"), ConfigError);
  EXPECT_THROW(parse_step_selector("random"), ConfigError);
}

TEST(Collect, BanditOneRecordPerEnv) {
  const auto buf = collect(bandit_field(), BanditEnv{}, SolverSchedule::uniform(4, 0.2), options(64, 1));
  ASSERT_EQ(buf.records.size(), 64u);
  ASSERT_EQ(buf.episodes.size(), 64u);
  for (const auto& r : buf.records) EXPECT_LT(r.provenance.solver_index, 4u);
}

TEST(Collect, UniformSelectorCoversAllSteps) {
  const auto buf = collect(bandit_field(), BanditEnv{}, SolverSchedule::uniform(4, 0.2), options(256, 8));
  std::vector<double> counts(4, 0.0);
  for (const auto& r : buf.records) counts[r.provenance.solver_index] += 1.0;
  const double n = static_cast<double>(buf.records.size());
  const double se = std::sqrt(0.25 * 0.75 / n);
  for (double c : counts) EXPECT_NEAR(c / n, 0.25, 3 * se);
}

TEST(Collect, FixedSelectorRecordsThatTime) {
  const auto schedule = SolverSchedule::uniform(4, 0.2);
  const auto buf = collect(bandit_field(), BanditEnv{}, schedule, options(32, 2, StepSelector::fixed(2)));
  for (const auto& r : buf.records) {
    EXPECT_EQ(r.t, schedule.time(2));
    EXPECT_EQ(r.provenance.solver_index, 2u);
  }
}

TEST(Collect, RecordsAreConsistentAndRewardsBroadcast) {
  const auto field = init_field(make_architecture(10, 0, 5, {16}), 4);
  const auto schedule = SolverSchedule::uniform(4, 0.2);
  auto o = options(16, 1);
  const auto buf = collect(field, ReachEnv{}, schedule, o);
  ASSERT_EQ(buf.records.size(), 32u);  // horizon 2
  for (const auto& r : buf.records) {
    EXPECT_EQ(forward(field, r.x_t, r.t, r.context, r.observation), r.v_old);
    const std::size_t j = r.provenance.solver_index;
    EXPECT_EQ(r.delta, schedule.delta(j));
    EXPECT_EQ(r.sigma, schedule.sigma(j));
    double episode_reward = -1;
    for (const auto& e : buf.episodes) {
      if (e.env_index == r.provenance.env_index) episode_reward = e.reward;
    }
    EXPECT_EQ(r.reward, episode_reward);
  }
}

TEST(Collect, ReplayDeterminism) {
  const auto schedule = SolverSchedule::uniform(4, 0.2);
  const auto a = collect(bandit_field(), BanditEnv{}, schedule, options(32, 2));
  const auto b = collect(bandit_field(), BanditEnv{}, schedule, options(32, 2));
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].x_t, b.records[i].x_t);
    EXPECT_EQ(a.records[i].x_next, b.records[i].x_next);
    EXPECT_EQ(a.records[i].v_old, b.records[i].v_old);
  }
}

TEST(Collect, RecordAllSteps) {
  auto o = options(8, 1);
  o.record_all_steps = true;
  const auto buf = collect(bandit_field(), BanditEnv{}, SolverSchedule::uniform(4, 0.2), o);
  EXPECT_EQ(buf.records.size(), 32u);
}

TEST(Collect, MismatchedFieldRejected) {
  EXPECT_THROW(collect(bandit_field(), ReachEnv{}, SolverSchedule::uniform(4, 0.2), options(4, 1)), ContractError);
}

TEST(BufferDump, RoundTrip) {
  const auto buf = collect(bandit_field(), BanditEnv{}, SolverSchedule::uniform(4, 0.2), options(8, 1));
  std::stringstream csv, bin;
  write_buffer_csv(csv, buf);
  write_buffer_sidecar(bin, buf);
  const auto back = read_buffer_dump(csv, bin);
  ASSERT_EQ(back.records.size(), buf.records.size());
  for (std::size_t i = 0; i < buf.records.size(); ++i) {
    const auto &a = buf.records[i], &b = back.records[i];
    EXPECT_EQ(a.x_t, b.x_t);
    EXPECT_EQ(a.x_next, b.x_next);
    EXPECT_EQ(a.v_old, b.v_old);
    EXPECT_EQ(a.context, b.context);
    EXPECT_EQ(a.terminal, b.terminal);
    EXPECT_EQ(a.t, b.t);
    EXPECT_EQ(a.reward, b.reward);
    EXPECT_EQ(a.provenance.solver_index, b.provenance.solver_index);
  }
}
