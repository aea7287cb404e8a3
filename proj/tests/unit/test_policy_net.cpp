#include <sstream>

#include <gtest/gtest.h>

#include "stepnft/policy_net.hpp"
#include "stepnft/rng.hpp"

using namespace stepnft;

namespace {

Architecture small_arch() { return make_architecture(2, 1, 0, {8}); }  // widths [4, 8, 2]

}  // namespace

TEST(Rng, PhiloxKnownAnswer) {
  const auto out = Philox4x32::block({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(out[0], 0x6627e8d5u);
  EXPECT_EQ(out[1], 0xe169c58du);
  EXPECT_EQ(out[2], 0xbc57ac4cu);
  EXPECT_EQ(out[3], 0x9b00dbd8u);
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  auto a = CounterRng::keyed(7, StreamTag::Rollout, 1, 2);
  auto b = CounterRng::keyed(7, StreamTag::Rollout, 1, 2);
  auto c = CounterRng::keyed(7, StreamTag::Rollout, 1, 3);
  const auto xa = a.next_u64();
  EXPECT_EQ(xa, b.next_u64());
  EXPECT_NE(xa, c.next_u64());
}

TEST(Rng, NormalMoments) {
  auto rng = CounterRng::keyed(1, StreamTag::Verify);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(InitField, SameSeedSameParameters) {
  const auto a = init_field(small_arch(), 0);
  const auto b = init_field(small_arch(), 0);
  EXPECT_EQ(a.architecture().widths, (std::vector<std::size_t>{4, 8, 2}));
  EXPECT_EQ(a.parameters(), b.parameters());
}

TEST(InitField, DifferentSeedDiffers) {
  EXPECT_NE(init_field(small_arch(), 0).parameters(), init_field(small_arch(), 1).parameters());
}

TEST(InitField, ZeroWidthIsConfigError) {
  Architecture arch;
  arch.widths = {4, 0, 2};
  arch.context_dim = 1;
  EXPECT_THROW(init_field(arch, 0), ConfigError);
}

TEST(InitField, ParameterCountAndBounds) {
  const auto f = init_field(small_arch(), 3);
  EXPECT_EQ(f.parameter_count(), 8u * 5u + 2u * 9u);
  // First layer bound 1/sqrt(4) = 0.5.
  for (Eigen::Index i = 0; i < 40; ++i) EXPECT_LE(std::abs(f.parameters()[i]), 0.5);
}

TEST(Forward, ZeroParametersGiveZeroOutput) {
  const auto arch = small_arch();
  VelocityField f(arch, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(arch.parameter_count())));
  const auto v = forward(f, Eigen::Vector2d(0.3, -2.0), 0.4, Eigen::VectorXd::Constant(1, 5.0), Eigen::VectorXd(0));
  EXPECT_EQ(v, Eigen::Vector2d::Zero());
}

TEST(Forward, Deterministic) {
  const auto f = init_field(small_arch(), 5);
  const Eigen::Vector2d x(0.1, 0.2);
  const Eigen::VectorXd c = Eigen::VectorXd::Constant(1, -0.3);
  EXPECT_EQ(forward(f, x, 0.5, c, Eigen::VectorXd(0)), forward(f, x, 0.5, c, Eigen::VectorXd(0)));
}

TEST(Forward, DimensionMismatchIsContractError) {
  const auto f = init_field(small_arch(), 5);
  EXPECT_THROW(forward(f, Eigen::Vector3d::Zero(), 0.5, Eigen::VectorXd::Zero(1), Eigen::VectorXd(0)),
               ContractError);
  EXPECT_THROW(forward(f, Eigen::Vector2d::Zero(), 0.5, Eigen::VectorXd::Zero(2), Eigen::VectorXd(0)),
               ContractError);
}

TEST(Forward, InputDirectionalDerivative) {
  const auto f = init_field(make_architecture(3, 2, 1, {16, 16}), 9);
  const Eigen::Vector3d x(0.2, -0.4, 0.7);
  const Eigen::Vector2d c(0.5, -0.1);
  const Eigen::VectorXd o = Eigen::VectorXd::Constant(1, 0.3);
  const double t = 0.6, h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    Eigen::Vector3d up = x, down = x;
    up[k] += h;
    down[k] -= h;
    const Eigen::VectorXd central = (forward(f, up, t, c, o) - forward(f, down, t, c, o)) / (2 * h);
    const Eigen::VectorXd forward_diff = (forward(f, up, t, c, o) - forward(f, x, t, c, o)) / h;
    EXPECT_LE((forward_diff - central).norm(), 1e-3 * std::max(1.0, central.norm()));
  }
}

TEST(Backward, ConstantLossZeroGradient) {
  const auto f = init_field(small_arch(), 2);
  const auto tape = backward(f, Eigen::Vector2d(1, 2), 0.5, Eigen::VectorXd::Ones(1), Eigen::VectorXd(0),
                             [](const Eigen::VectorXd& v) {
                               return std::pair<double, Eigen::VectorXd>{0.0, Eigen::VectorXd::Zero(v.size())};
                             });
  EXPECT_EQ(tape.gradient.size(), static_cast<Eigen::Index>(f.parameter_count()));
  EXPECT_EQ(tape.gradient, Eigen::VectorXd::Zero(tape.gradient.size()));
}

TEST(Backward, HalfSquaredNormMatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto f = init_field(make_architecture(2, 2, 3, {6, 5}), seed);
    auto rng = CounterRng::keyed(seed, StreamTag::Verify, 99);
    const Eigen::VectorXd x = rng.normal_vector(2), c = rng.normal_vector(2), o = rng.normal_vector(3);
    const double t = 0.37;
    const OutputLoss loss = [](const Eigen::VectorXd& v) {
      return std::pair<double, Eigen::VectorXd>{0.5 * v.squaredNorm(), v};
    };
    const auto tape = backward(f, x, t, c, o, loss);
    VelocityField p = f;
    for (Eigen::Index i = 0; i < p.parameters().size(); ++i) {
      const double base = f.parameters()[i], h = 1e-5 * std::max(1.0, std::abs(base));
      p.parameters()[i] = base + h;
      const double up = loss(forward(p, x, t, c, o)).first;
      p.parameters()[i] = base - h;
      const double down = loss(forward(p, x, t, c, o)).first;
      p.parameters()[i] = base;
      const double fd = (up - down) / (2 * h);
      EXPECT_LE(std::abs(tape.gradient[i] - fd), 1e-4 * std::max(std::abs(fd) + std::abs(tape.gradient[i]), 1e-6))
          << "parameter " << i;
    }
  }
}

TEST(Backward, LinearLayerWeightGradientIsInput) {
  Architecture arch = make_architecture(2, 1, 0, {}, Activation::Identity);  // widths [4, 2]
  const auto f = init_field(arch, 4);
  const Eigen::Vector2d x(0.3, -0.8);
  const Eigen::VectorXd c = Eigen::VectorXd::Constant(1, 1.7);
  const double t = 0.25;
  const auto tape = backward(f, x, t, c, Eigen::VectorXd(0), [](const Eigen::VectorXd& v) {
    return std::pair<double, Eigen::VectorXd>{v.sum(), Eigen::VectorXd::Ones(v.size())};
  });
  const Eigen::Vector4d input(x[0], x[1], t, c[0]);
  // Layout per layer: column-major weights (out x in) followed by biases.
  for (int r = 0; r < 2; ++r) {
    for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(tape.gradient[k * 2 + r], input[k]);
    EXPECT_DOUBLE_EQ(tape.gradient[8 + r], 1.0);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto f = init_field(make_architecture(10, 0, 5, {64, 64}), 11);
  std::stringstream ss;
  save_checkpoint(ss, f);
  const auto g = load_checkpoint(ss);
  EXPECT_EQ(f.architecture(), g.architecture());
  EXPECT_EQ(f.parameters(), g.parameters());
  const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(10, -1, 1), o = Eigen::VectorXd::LinSpaced(5, 0, 1);
  EXPECT_EQ(forward(f, x, 0.3, Eigen::VectorXd(0), o), forward(g, x, 0.3, Eigen::VectorXd(0), o));
}

TEST(Checkpoint, CorruptInputRejected) {
  std::stringstream bad("STEPNFTX garbage");
  EXPECT_THROW(load_checkpoint(bad), FormatError);
  const auto f = init_field(small_arch(), 1);
  std::stringstream ss;
  save_checkpoint(ss, f);
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 4);
  std::stringstream truncated(bytes);
  EXPECT_THROW(load_checkpoint(truncated), FormatError);
}
