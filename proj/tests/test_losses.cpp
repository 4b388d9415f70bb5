#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "gradient_cases.hpp"
#include "mros/losses.hpp"
#include "mros/model.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mros;
using namespace mros::test;

namespace {

Tensor rows1d(std::vector<double> v) {
  const auto n = v.size();
  return Tensor({n, 1}, std::move(v), true);
}

}  // namespace

TEST(Triplet, SeparatedIdentitiesGiveZero) {
  const std::vector<int> labels{0, 0, 1, 1};
  EXPECT_EQ(triplet_batch_hard(rows1d({0, 1, 10, 11}), labels, 0.3).item(), 0.0);
}

TEST(Triplet, HandEnumeratedCase) {
  // anchors: 0 -> 0.3+1-0.5, 1 -> 0.3+1-0.5, 0.5 -> 0.3+1.5-0.5, 2 -> 0.3+1.5-1
  const std::vector<int> labels{0, 0, 1, 1};
  EXPECT_NEAR(triplet_batch_hard(rows1d({0, 1, 0.5, 2}), labels, 0.3).item(), 3.7, 1e-12);
}

TEST(Triplet, IdenticalEmbeddingsGiveBatchTimesMargin) {
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  auto g = Tensor::full({6, 3}, 0.25, true);
  auto loss = triplet_batch_hard(g, labels, 0.3);
  EXPECT_NEAR(loss.item(), 6 * 0.3, 1e-12);
  loss.backward();
  for (double v : g.grad()) EXPECT_EQ(v, 0.0);
}

TEST(Triplet, MatchesBruteForceOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = uniform_size(rng, 2, 4), k = uniform_size(rng, 1, 4), d = uniform_size(rng, 1, 8);
    auto labels = pk_labels(p, k, rng);
    auto g = random_tensor({p * k, d}, rng, false);
    const double alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const std::vector<double> x(g.data().begin(), g.data().end());
    EXPECT_EQ(triplet_batch_hard(g, labels, alpha).item(), brute_triplet(x, d, labels, alpha)) << "trial " << trial;
  }
}

TEST(Triplet, PermutationInvariant) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto labels = pk_labels(3, 3, rng);
    auto g = random_tensor({9, 4}, rng, false);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> px;
    std::vector<int> pl;
    for (auto i : perm) {
      for (std::size_t c = 0; c < 4; ++c) px.push_back(g.data()[i * 4 + c]);
      pl.push_back(labels[i]);
    }
    EXPECT_NEAR(triplet_batch_hard(g, labels, 0.3).item(), triplet_batch_hard(Tensor({9, 4}, px), pl, 0.3).item(),
                1e-12);
  }
}

TEST(Triplet, RigidMotionInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto labels = pk_labels(3, 2, rng);
    auto g = random_tensor({6, 2}, rng, false);
    const double th = std::uniform_real_distribution<double>(0.0, 6.28)(rng);
    const double tx = 5.0 * (trial - 10), ty = -3.0;
    std::vector<double> moved;
    for (std::size_t i = 0; i < 6; ++i) {
      const double x = g.data()[2 * i], y = g.data()[2 * i + 1];
      moved.push_back(std::cos(th) * x - std::sin(th) * y + tx);
      moved.push_back(std::sin(th) * x + std::cos(th) * y + ty);
    }
    EXPECT_NEAR(triplet_batch_hard(g, labels, 0.3).item(), triplet_batch_hard(Tensor({6, 2}, moved), labels, 0.3).item(),
                1e-9);
  }
}

TEST(Triplet, NonNegative) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto labels = pk_labels(uniform_size(rng, 2, 4), uniform_size(rng, 1, 4), rng);
    auto g = random_tensor({labels.size(), 3}, rng, false, -5.0, 5.0);
    EXPECT_GE(triplet_batch_hard(g, labels, 0.0).item(), 0.0);
  }
}

TEST(Triplet, BatchContract) {
  auto g = Tensor::zeros({4, 2});
  EXPECT_THROW(triplet_batch_hard(g, std::vector<int>{0, 0, 0, 0}, 0.3), ContractError);  // P = 1
  EXPECT_THROW(triplet_batch_hard(g, std::vector<int>{0, 0, 0, 1}, 0.3), ContractError);  // not P×K
  EXPECT_THROW(triplet_batch_hard(g, std::vector<int>{0, 1}, 0.3), DimensionError);
}

TEST(Triplet, TiesPickFirstIndex) {
  // anchor at the origin, equally hard positives at (±1, 0); the lower index wins.
  // worked by hand: x-gradient of row 1 is 3 - 1/sqrt(26) (would be 2 - 1/sqrt(26) otherwise)
  const std::vector<int> labels{0, 0, 0, 1, 1, 1};
  auto g = Tensor({6, 2}, {0, 0, 1, 0, -1, 0, 0, 5, 0, 6, 0, 7}, true);
  triplet_batch_hard(g, labels, 10.0).backward();
  EXPECT_NEAR(g.grad()[2], 3.0 - 1.0 / std::sqrt(26.0), 1e-12);
  EXPECT_NEAR(g.grad()[4], -2.0 + 1.0 / std::sqrt(26.0), 1e-12);
}

TEST(Center, ZeroAtCenters) {
  auto c = ClassCenters::zeros(2, 2);
  c.values = {1, 2, 3, 4};
  EXPECT_EQ(center_loss(Tensor({3, 2}, {1, 2, 3, 4, 1, 2}), std::vector<int>{0, 1, 0}, c).item(), 0.0);
}

TEST(Center, SingleSample) {
  auto c = ClassCenters::zeros(1, 1);
  c.values = {1};
  EXPECT_DOUBLE_EQ(center_loss(Tensor({1, 1}, {2}), std::vector<int>{0}, c).item(), 0.5);
}

TEST(Center, MatchesDirectSum) {
  std::mt19937_64 rng(5);
  auto g = random_tensor({8, 4}, rng, false);
  auto c = ClassCenters::zeros(3, 4);
  c.values = random_values(12, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  double expected = 0.0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double d = g.data()[i * 4 + j] - c.values[labels[i] * 4 + j];
      expected += 0.5 * d * d;
    }
  EXPECT_NEAR(center_loss(g, labels, c).item(), expected, 1e-12);
}

TEST(Center, ZeroIffAtCenter) {
  auto c = ClassCenters::zeros(2, 1);
  EXPECT_GT(center_loss(Tensor({2, 1}, {0, 1e-6}), std::vector<int>{0, 1}, c).item(), 0.0);
}

TEST(Center, RejectsUnknownLabel) {
  auto c = ClassCenters::zeros(2, 1);
  EXPECT_THROW(center_loss(Tensor({1, 1}, {0}), std::vector<int>{2}, c), ContractError);
}

TEST(CenterUpdate, HandExample) {
  auto c = ClassCenters::zeros(1, 1, 0.5);
  update_centers(Tensor({1, 1}, {2}), std::vector<int>{0}, c);
  EXPECT_DOUBLE_EQ(c.values[0], 0.5);
}

TEST(CenterUpdate, AbsentClassAndSampleAtCenterUnchanged) {
  auto c = ClassCenters::zeros(3, 2);
  c.values = {1, 1, 2, 2, 3, 3};
  update_centers(Tensor({1, 2}, {1, 1}), std::vector<int>{0}, c);
  EXPECT_EQ(c.values, (std::vector<double>{1, 1, 2, 2, 3, 3}));
}

TEST(CenterUpdate, ContractsTowardClassMean) {
  std::mt19937_64 rng(6);
  auto g = random_tensor({6, 3}, rng, false);
  const std::vector<int> labels{0, 1, 0, 1, 0, 1};
  auto c = ClassCenters::zeros(3, 3);
  c.values = random_values(9, rng, -5.0, 5.0);
  const auto untouched = std::vector<double>(c.values.begin() + 6, c.values.end());
  auto gap = [&](int k) {
    double acc = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < 6; ++i)
        if (labels[i] == k) mean += g.data()[i * 3 + j] / 3.0;
      acc += (c.values[k * 3 + j] - mean) * (c.values[k * 3 + j] - mean);
    }
    return std::sqrt(acc);
  };
  double prev[2] = {gap(0), gap(1)};
  for (int it = 0; it < 100; ++it) {
    update_centers(g, labels, c);
    for (int k = 0; k < 2; ++k) {
      const double now = gap(k);
      EXPECT_LE(now, prev[k] + 1e-15);
      prev[k] = now;
    }
  }
  EXPECT_LT(prev[0], 1e-9);
  EXPECT_LT(prev[1], 1e-9);
  EXPECT_EQ(std::vector<double>(c.values.begin() + 6, c.values.end()), untouched);
  for (double v : c.values) EXPECT_TRUE(std::isfinite(v));
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  for (double eps : {0.0, 0.1, 0.5}) {
    EXPECT_NEAR(cross_entropy_ls(Tensor({7}, std::vector<double>(7, 0.3)), 2, eps).item(), std::log(7.0), 1e-12);
  }
}

TEST(CrossEntropy, HandSoftmax) {
  EXPECT_NEAR(cross_entropy_ls(Tensor({2}, {0.0, std::log(3.0)}), 1, 0.0).item(), -std::log(0.75), 1e-12);
  EXPECT_NEAR(cross_entropy_ls(Tensor({2}, {0.0, std::log(3.0)}), 1, 0.0).item(), 0.28768, 1e-5);
}

TEST(CrossEntropy, ShiftInvariant) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto z = random_values(5, rng, -3.0, 3.0);
    auto shifted = z;
    for (auto& v : shifted) v += 11.5;
    EXPECT_NEAR(cross_entropy_ls(Tensor({5}, z), 3, 0.1).item(), cross_entropy_ls(Tensor({5}, shifted), 3, 0.1).item(),
                1e-12);
  }
}

TEST(CrossEntropy, NonNegativeWithoutSmoothing) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    EXPECT_GE(cross_entropy_ls(Tensor({4}, random_values(4, rng, -10, 10)), trial % 4, 0.0).item(), 0.0);
  }
}

TEST(CrossEntropy, MinimumIsSmoothedTargetEntropy) {
  const std::size_t c = 5;
  const double eps = 0.1;
  Tensor z = Tensor::zeros({c}, true);
  for (int it = 0; it < 5000; ++it) {
    z.zero_grad();
    cross_entropy_ls(z, 1, eps).backward();
    auto d = z.mutable_data();
    for (std::size_t j = 0; j < c; ++j) d[j] -= 2.0 * z.grad()[j];
  }
  const double on = 1.0 - eps + eps / c, off = eps / c;
  const double entropy = -(on * std::log(on) + (c - 1) * off * std::log(off));
  EXPECT_NEAR(cross_entropy_ls(z, 1, eps).item(), entropy, 1e-9);
}

TEST(CrossEntropy, RejectsBadLabelsAndEpsilon) {
  EXPECT_THROW(cross_entropy_ls(Tensor({3}, {0, 0, 0}), 3, 0.1), ContractError);
  EXPECT_THROW(cross_entropy_ls(Tensor({3}, {0, 0, 0}), 0, 1.0), ContractError);
}

TEST(TotalCrossEntropy, EqualPartsGiveThatValue) {
  std::vector<Tensor> sets(10, Tensor({2, 3}, {0.1, 0.2, 0.3, 1, 0, -1}));
  const std::vector<int> labels{0, 2};
  const double v = cross_entropy_ls(sets[0], labels, 0.1).item();
  EXPECT_NEAR(total_cross_entropy(sets, labels, 0.1, 10).item(), v, 1e-14);
}

TEST(TotalCrossEntropy, DividesByTwiceStripesMinusOne) {
  HeadConfig h;  // s = 6, setting IV
  ASSERT_EQ(h.num_stripe_heads(), 2 * (h.stripes - 1));
  std::mt19937_64 rng(9);
  std::vector<Tensor> sets;
  for (int k = 0; k < 10; ++k) sets.push_back(random_tensor({3, 4}, rng, false, -2, 2));
  const std::vector<int> labels{0, 3, 1};
  double naive = 0.0;
  for (const auto& s : sets) {
    for (std::size_t i = 0; i < 3; ++i) {
      double mx = -1e300, norm = 0.0;
      for (std::size_t j = 0; j < 4; ++j) mx = std::max(mx, s.data()[i * 4 + j]);
      for (std::size_t j = 0; j < 4; ++j) norm += std::exp(s.data()[i * 4 + j] - mx);
      for (std::size_t j = 0; j < 4; ++j) {
        const double q = static_cast<int>(j) == labels[i] ? 0.9 + 0.1 / 4 : 0.1 / 4;
        naive -= q * (s.data()[i * 4 + j] - mx - std::log(norm)) / 3.0;
      }
    }
  }
  EXPECT_NEAR(total_cross_entropy(sets, labels, 0.1, 10).item(), naive / 10.0, 1e-12);
  EXPECT_THROW(total_cross_entropy(sets, labels, 0.1, 6), ConfigError);
}

TEST(TotalLoss, WeightedSum) {
  LossParts parts{Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0)};
  EXPECT_NEAR(total_loss(parts, LossWeights{}).item(), 4.001, 1e-12);
  EXPECT_EQ(total_loss(parts, LossWeights{0.3, 0.0, 0.1}).item(), 1.0 + 3.0);
  LossParts zero{Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0)};
  EXPECT_EQ(total_loss(zero, LossWeights{}).item(), 0.0);
}

TEST(TotalLoss, NonFiniteNamesThePart) {
  LossParts parts{Tensor::scalar(1.0), Tensor::scalar(std::numeric_limits<double>::infinity()), Tensor::scalar(3.0)};
  try {
    total_loss(parts, LossWeights{});
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("center"), std::string::npos);
  }
}

class LossGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LossGradients, TwentyRandomInstances) {
  const auto cases = loss_cases();
  const auto& c = cases.at(GetParam());
  EXPECT_LT(worst_relative_error(c, 20, 2000 + GetParam()), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(Losses, LossGradients, ::testing::Range<std::size_t>(0, loss_cases().size()),
                         [](const auto& info) { return loss_cases().at(info.param).name; });
