#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "idk/objective.hpp"
#include "oracles.hpp"

namespace {

using idk::IdkConfig;
using idk::LogitVector;
using idk::ProbVector;

IdkConfig config(double pi, idk::TokenId idk_index) {
  IdkConfig c;
  c.pi = pi;
  c.idk_index = idk_index;
  return c;
}

TEST(Softmax, UniformLogits) {
  const ProbVector p = idk::softmax(LogitVector({0, 0, 0, 0}));
  for (double v : p.probs()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LargeOffsetDoesNotOverflow) {
  for (double c : {-1e3, 0.0, 1e3, 1e6}) {
    const ProbVector p = idk::softmax(LogitVector({c, c + 1000, c, c}));
    EXPECT_NEAR(p[1], 1.0, 1e-12);
    for (double v : p.probs()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Softmax, KnownValues) {
  // exp(2) / (exp(2) + 3) evaluated at 30 digits
  const ProbVector p = idk::softmax(LogitVector({2, 0, 0, 0}));
  EXPECT_NEAR(p[0], 0.711234594227593859942, 1e-4);
  EXPECT_NEAR(p[1], 0.096255135257468713353, 1e-4);
  EXPECT_NEAR(p[3], 0.096255135257468713353, 1e-4);
}

TEST(Softmax, RejectsNonFinite) {
  EXPECT_THROW(LogitVector({0.0, std::nan("")}), idk::ConfigError);
  EXPECT_THROW(LogitVector({0.0, INFINITY}), idk::ConfigError);
  EXPECT_THROW(LogitVector({1.0}), idk::ConfigError);
}

TEST(Softmax, ShiftInvariance) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z(9), zs(9);
    const double c = n(rng) * 10;
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = n(rng);
      zs[i] = z[i] + c;
    }
    const ProbVector a = idk::softmax(LogitVector(z));
    const ProbVector b = idk::softmax(LogitVector(zs));
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(ProbVectorType, ValidatesNormalization) {
  EXPECT_THROW(ProbVector({0.5, 0.4}), idk::ConfigError);
  EXPECT_THROW(ProbVector({1.2, -0.2}), idk::ConfigError);
  EXPECT_THROW(ProbVector(std::vector<double>{}), idk::ConfigError);
  EXPECT_NO_THROW(ProbVector({0.5, 0.5}));
}

TEST(UncertaintyFactor, GoldIsArgmax) {
  const auto lam = idk::uncertainty_factor(ProbVector({0.5, 0.3, 0.2}), 0, config(0.5, 2));
  // idk index is irrelevant to lambda but must differ from gold
  EXPECT_EQ(lam.lambda, 0.0);
}

TEST(UncertaintyFactor, AdaptiveValue) {
  IdkConfig cfg = config(0.5, 1);
  const auto lam = idk::uncertainty_factor(ProbVector({0.5, 0.3, 0.2}), 2, cfg);
  EXPECT_NEAR(lam.lambda, 0.3, 1e-15);
}

TEST(UncertaintyFactor, FixedMode) {
  IdkConfig cfg = config(0.5, 1);
  cfg.adaptive_lambda = false;
  cfg.fixed_lambda = 0.25;
  EXPECT_EQ(idk::uncertainty_factor(ProbVector({0.5, 0.3, 0.2}), 2, cfg).lambda, 0.25);
  // fixed lambda still vanishes on correct predictions
  EXPECT_EQ(idk::uncertainty_factor(ProbVector({0.5, 0.3, 0.2}), 0, cfg).lambda, 0.0);
}

TEST(UncertaintyFactor, TieCountsAsCorrect) {
  const auto lam = idk::uncertainty_factor(ProbVector({0.4, 0.4, 0.2}), 1, config(0.5, 2));
  EXPECT_EQ(lam.lambda, 0.0);
}

TEST(UncertaintyFactor, Errors) {
  const ProbVector p({0.5, 0.3, 0.2});
  EXPECT_THROW(idk::uncertainty_factor(p, 3, config(0.5, 2)), idk::ConfigError);
  EXPECT_THROW(idk::uncertainty_factor(p, 2, config(0.5, 2)), idk::ConfigError);
}

TEST(UncertaintyFactor, MonotoneInGoldProbability) {
  // Hold the maximum at index 0 fixed and raise the gold mass.
  IdkConfig cfg = config(0.5, 3);
  double prev = 1.0;
  for (int k = 0; k <= 40; ++k) {
    const double pg = 0.01 * k;  // stays below max = 0.5
    const double rest = 1.0 - 0.5 - pg;
    const ProbVector p({0.5, pg, rest / 2, rest / 2});
    const double lam = idk::uncertainty_factor(p, 1, cfg).lambda;
    EXPECT_LE(lam, prev);
    prev = lam;
  }
}

TEST(SoftTarget, Examples) {
  IdkConfig cfg = config(0.5, 3);
  auto t0 = idk::soft_target(2, {0.0}, cfg, 4);
  EXPECT_EQ(t0.target, (std::vector<double>{0, 0, 1, 0}));
  auto t1 = idk::soft_target(2, {0.3}, cfg, 4);
  EXPECT_DOUBLE_EQ(t1.target[2], 0.7);
  EXPECT_DOUBLE_EQ(t1.target[3], 0.3);
  EXPECT_EQ(t1.target[0], 0.0);
  auto t2 = idk::soft_target(1, {0.5}, cfg, 4);
  EXPECT_GE(t2.target[1], t2.target[3]);
  EXPECT_THROW(idk::soft_target(3, {0.1}, cfg, 4), idk::ConfigError);
  EXPECT_THROW(idk::soft_target(1, {1.5}, cfg, 4), idk::ConfigError);
}

TEST(IdkLoss, UniformLogitsIsLogV) {
  EXPECT_NEAR(idk::idk_loss(LogitVector({0, 0, 0, 0}), 1, config(0.5, 3)), std::log(4.0), 1e-15);
}

TEST(IdkLoss, MixedTarget) {
  // lambda = 0.5 (1 - e^0 / e^2) = 0.4323323583816936; p[1] = p[3] so the loss is -ln p[1]
  const IdkConfig cfg = config(0.5, 3);
  const LogitVector z({2, 0, 0, 0});
  EXPECT_NEAR(idk::uncertainty_factor(idk::softmax(z), 1, cfg).lambda, 0.43233235838169365, 1e-12);
  EXPECT_NEAR(idk::idk_loss(z, 1, cfg), 2.3407529539131312, 1e-4);
}

TEST(IdkLoss, ReducesToCrossEntropy) {
  EXPECT_NEAR(idk::idk_loss(LogitVector({3, 0, 0, 0}), 0, config(0.5, 3)), 0.13920631421945656,
              1e-4);
  EXPECT_EQ(idk::idk_loss(LogitVector({3, 0, 0, 0}), 0, config(0.5, 3)),
            idk::cross_entropy(LogitVector({3, 0, 0, 0}), 0));
}

TEST(FpRegularization, Values) {
  IdkConfig cfg = config(0.5, 1);
  EXPECT_EQ(idk::fp_regularization(ProbVector({1.0, 0.0}), cfg), 0.0);
  EXPECT_NEAR(idk::fp_regularization(ProbVector({0.5, 0.5}), cfg), std::log(2.0), 1e-15);
  const double clamped = idk::fp_regularization(ProbVector({0.0, 1.0}), cfg);
  EXPECT_TRUE(std::isfinite(clamped));
  EXPECT_DOUBLE_EQ(clamped, -std::log(cfg.prob_floor));
}

TEST(CombinedLoss, CorrectBranch) {
  const LogitVector z({3, 0.5, -1, 0.2});
  IdkConfig cfg = config(0.5, 3);
  const auto with_reg = idk::combined_loss(z, 0, cfg);
  EXPECT_EQ(with_reg.branch, idk::LossBranch::CorrectBranch);
  EXPECT_EQ(with_reg.total, with_reg.ce + with_reg.fp_reg);
  cfg.enable_fp_reg = false;
  const auto without = idk::combined_loss(z, 0, cfg);
  EXPECT_EQ(without.total, without.ce);
  EXPECT_EQ(without.total, idk::cross_entropy(z, 0));
}

TEST(CombinedLoss, IdkBranch) {
  const auto b = idk::combined_loss(LogitVector({2, 0, 0, 0}), 1, config(0.5, 3));
  EXPECT_EQ(b.branch, idk::LossBranch::IdkBranch);
  EXPECT_NEAR(b.total, 2.3407529539131312, 1e-4);
  EXPECT_EQ(b.total, b.idk);
  EXPECT_GT(b.fp_reg, 0.0);  // populated even off-branch
}

TEST(Gradient, PlainCrossEntropyCase) {
  IdkConfig cfg = config(0.5, 3);
  cfg.enable_fp_reg = false;
  const LogitVector z({1.5, 0.2, -0.4, 0.1});
  const auto g = idk::loss_gradient_logits(z, 0, cfg);
  const ProbVector p = idk::softmax(z);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g[j], p[j] - (j == 0 ? 1.0 : 0.0), 1e-15);
}

TEST(Gradient, MatchesFrozenLambdaFiniteDifferences) {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = oracle::random_case(rng, trial % 2 == 0);
    const auto g = idk::loss_gradient_logits(LogitVector(c.logits), c.gold, c.cfg);
    const auto fd = oracle::finite_difference_gradient(c.logits, c.gold, c.cfg, 1e-5);
    worst = std::max(worst, oracle::max_relative_error(g, fd));
    EXPECT_NEAR(std::accumulate(g.begin(), g.end(), 0.0), 0.0, 1e-10);
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Properties, RandomizedLaws) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto c = oracle::random_case(rng, trial % 3 == 0);
    const ProbVector p = idk::softmax(LogitVector(c.logits));
    const auto lam = idk::uncertainty_factor(p, c.gold, c.cfg);
    const auto t = idk::soft_target(c.gold, lam, c.cfg, p.size());
    const double sum = std::accumulate(t.target.begin(), t.target.end(), 0.0);
    EXPECT_NEAR(sum, 1.0, 1e-12);
    for (double v : t.target) EXPECT_GE(v, 0.0);
    const bool is_max = p[c.gold] == *std::max_element(p.probs().begin(), p.probs().end());
    if (c.cfg.adaptive_lambda) {
      EXPECT_GE(lam.lambda, 0.0);
      EXPECT_LE(lam.lambda, c.cfg.pi);
      if (c.cfg.pi > 0) {
        EXPECT_EQ(lam.lambda == 0.0, is_max);
      }
    }
    if (c.cfg.pi <= 0.5 && c.cfg.adaptive_lambda) {
      EXPECT_GE(t.target[c.gold], t.target[c.cfg.idk_index]);
    }
    const auto b = idk::combined_loss(LogitVector(c.logits), c.gold, c.cfg);
    EXPECT_TRUE(std::isfinite(b.total));
    EXPECT_GE(b.idk, 0.0);
  }
}

TEST(Properties, ExtremeLogitsStayFinite) {
  IdkConfig cfg = config(0.5, 2);
  // [IDK] probability underflows to zero; gold is wrong
  const auto b = idk::combined_loss(LogitVector({800, 0, -900}), 1, cfg);
  EXPECT_TRUE(std::isfinite(b.total));
  EXPECT_EQ(b.branch, idk::LossBranch::IdkBranch);
  // [IDK] saturates while gold ties for nothing
  const auto c = idk::combined_loss(LogitVector({-900, 0, 900}), 0, cfg);
  EXPECT_TRUE(std::isfinite(c.total));
  const auto g = idk::loss_gradient_logits(LogitVector({-900, 0, 900}), 0, cfg);
  for (double v : g) EXPECT_TRUE(std::isfinite(v));
}

}  // namespace
