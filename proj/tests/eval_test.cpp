#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ham/metrics.hpp"
#include "ham/stats.hpp"

using namespace ham;

namespace {

// Brute force over all 2^n sign assignments of the ranks.
double enumerate_two_sided(const std::vector<double>& ranks, double w) {
  const std::size_t n = ranks.size();
  std::size_t hit = 0;
  for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
    double plus = 0.0, minus = 0.0;
    for (std::size_t i = 0; i < n; ++i) ((bits >> i) & 1 ? plus : minus) += ranks[i];
    if (std::min(plus, minus) <= w + 1e-9) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(std::size_t{1} << n);
}

// P(T+ <= w) by enumeration, the one-tail counted by the two-sided rule.
double enumerate_lower_tail(const std::vector<double>& ranks, double w) {
  const std::size_t n = ranks.size();
  std::size_t hit = 0;
  for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
    double plus = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if ((bits >> i) & 1) plus += ranks[i];
    if (plus <= w + 1e-9) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(std::size_t{1} << n);
}

double enumerate_upper_tail(const std::vector<double>& ranks, double w) {
  const std::size_t n = ranks.size();
  std::size_t hit = 0;
  for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
    double plus = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if ((bits >> i) & 1) plus += ranks[i];
    if (plus >= w - 1e-9) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(std::size_t{1} << n);
}

}  // namespace

TEST(Confusion, HandCountedExample) {
  const auto cm = confusion({0, 1, 2, 2, 1, 0}, {0, 1, 1, 2, 2, 0}, 3);
  EXPECT_EQ(cm, ConfusionMatrix::from_rows({{2, 0, 0}, {0, 1, 1}, {0, 1, 1}}));
  EXPECT_EQ(cm.total(), 6u);
}

TEST(Confusion, EmptyInputsGiveZeroMatrix) {
  const auto cm = confusion({}, {}, 3);
  EXPECT_EQ(cm, ConfusionMatrix(3));
  EXPECT_EQ(cm.total(), 0u);
}

TEST(Confusion, PerfectPredictionIsDiagonal) {
  const auto cm = confusion({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 3; ++p) {
      if (t != p) {
        EXPECT_EQ(cm(t, p), 0u);
      }
    }
  EXPECT_DOUBLE_EQ(balanced_accuracy(cm), 1.0);
}

TEST(Confusion, RejectsOutOfRangeAndLengthMismatch) {
  EXPECT_THROW(confusion({3}, {0}, 3), ConfigError);
  EXPECT_THROW(confusion({0, 1}, {0}, 3), ShapeError);
}

TEST(BalancedAccuracy, WorkedMatrix) {
  const auto cm = ConfusionMatrix::from_rows({{2, 0, 0}, {0, 1, 1}, {1, 0, 1}});
  EXPECT_EQ(balanced_accuracy(cm), 2.0 / 3.0);
}

TEST(BalancedAccuracy, EmptyRowRejected) {
  const auto cm = ConfusionMatrix::from_rows({{2, 0, 0}, {0, 0, 0}, {1, 0, 1}});
  EXPECT_THROW(balanced_accuracy(cm), ProtocolError);
}

TEST(BalancedAccuracy, UniformRandomPredictorNearChance) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> u(0, 2);
  std::vector<std::size_t> preds, labels;
  const std::size_t n = 30000;
  for (std::size_t i = 0; i < n; ++i) {
    labels.push_back(i % 3);
    preds.push_back(u(rng));
  }
  const double ba = balanced_accuracy(confusion(preds, labels, 3));
  // mean of three recalls, each binomial(n/3, 1/3)/(n/3)
  const double sigma = std::sqrt((1.0 / 3) * (2.0 / 3) / (n / 3.0)) / std::sqrt(3.0);
  EXPECT_NEAR(ba, 1.0 / 3.0, 3 * sigma);
}

TEST(MacroMetrics, WorkedMatrix) {
  const auto r = macro_metrics(ConfusionMatrix::from_rows({{2, 0, 0}, {0, 1, 1}, {1, 0, 1}}));
  EXPECT_NEAR(r.per_class_specificity[0], 0.75, 1e-12);
  EXPECT_NEAR(r.per_class_specificity[1], 1.0, 1e-12);
  EXPECT_NEAR(r.per_class_specificity[2], 0.75, 1e-12);
  EXPECT_NEAR(r.specificity, 0.8333, 1e-4);
  EXPECT_NEAR(r.per_class_precision[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.per_class_precision[2], 0.5, 1e-12);
  EXPECT_NEAR(r.precision, 0.7222, 1e-4);
}

TEST(MacroMetrics, PerfectClassifier) {
  const auto r = macro_metrics(ConfusionMatrix::from_rows({{3, 0}, {0, 5}}));
  EXPECT_EQ(r.sensitivity, 1.0);
  EXPECT_EQ(r.specificity, 1.0);
  EXPECT_EQ(r.precision, 1.0);
}

TEST(MacroMetrics, ZeroOverZeroIsZero) {
  // class 1 never predicted: precision 0/0 := 0
  const auto r = macro_metrics(ConfusionMatrix::from_rows({{3, 0}, {2, 0}}));
  EXPECT_EQ(r.per_class_precision[1], 0.0);
}

TEST(MacroMetrics, SensitivityEqualsBalancedAccuracyOnRandomMatrices) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> cls(2, 6), cnt(0, 20);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t C = cls(rng);
    std::vector<std::vector<std::size_t>> rows(C, std::vector<std::size_t>(C));
    for (auto& row : rows) {
      for (auto& v : row) v = cnt(rng);
      row[0] += 1;  // every row nonempty
    }
    const auto cm = ConfusionMatrix::from_rows(rows);
    const auto r = macro_metrics(cm);
    ASSERT_EQ(r.sensitivity, balanced_accuracy(cm));
    ASSERT_EQ(r.balanced_accuracy, r.sensitivity);
    for (double v : {r.sensitivity, r.specificity, r.precision}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Ranks, AverageTies) {
  EXPECT_EQ(average_ranks({3.0, 1.0, 3.0, 2.0}), (std::vector<double>{3.5, 1.0, 3.5, 2.0}));
}

TEST(Wilcoxon, SixPairExampleByEnumeration) {
  const std::vector<double> a{1, 2, 3, 4, 5, -6}, b(6, 0.0);
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_EQ(r.w_plus, 15.0);
  EXPECT_EQ(r.w_minus, 6.0);
  EXPECT_EQ(r.w, 6.0);
  ASSERT_TRUE(r.sufficient());
  EXPECT_TRUE(r.exact);
  // 2 * P(T <= 6) over the 64 sign assignments = 2 * 14/64
  EXPECT_EQ(*r.p, 28.0 / 64.0);
  EXPECT_EQ(*r.p, enumerate_two_sided({1, 2, 3, 4, 5, 6}, 6.0));
}

TEST(Wilcoxon, EqualSamplesAreInsufficient) {
  const std::vector<double> a{0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  const auto r = wilcoxon_signed_rank(a, a);
  EXPECT_EQ(r.n, 0u);
  EXPECT_FALSE(r.sufficient());
}

TEST(Wilcoxon, FourNonzeroDifferencesAreInsufficient) {
  const auto r = wilcoxon_signed_rank({1, 2, 3, 4, 5, 6}, {0, 0, 0, 0, 5, 6});
  EXPECT_EQ(r.n, 4u);
  EXPECT_FALSE(r.sufficient());
}

TEST(Wilcoxon, LengthMismatchRejected) { EXPECT_THROW(wilcoxon_signed_rank({1, 2}, {1}), ShapeError); }

TEST(Wilcoxon, ExactBranchMatchesEnumerationOracle) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> len(5, 12);
  std::uniform_int_distribution<int> val(-6, 6);  // small integers force ties and zeros
  int checked = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = len(rng);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = val(rng);
      b[i] = val(rng);
    }
    const auto r = wilcoxon_signed_rank(a, b);
    std::vector<double> mag;
    for (std::size_t i = 0; i < n; ++i)
      if (a[i] != b[i]) mag.push_back(std::abs(a[i] - b[i]));
    if (mag.size() < 5) {
      EXPECT_FALSE(r.sufficient());
      continue;
    }
    const auto ranks = average_ranks(mag);
    ASSERT_TRUE(r.exact);
    // two-sided p = min(1, 2 * P(T+ <= W)); both branches of the rule via enumeration
    const double oracle = std::min(1.0, 2.0 * enumerate_lower_tail(ranks, r.w));
    ASSERT_EQ(*r.p, oracle) << "trial " << t;
    const auto g = wilcoxon_signed_rank(a, b, Alternative::Greater);
    ASSERT_EQ(*g.p, enumerate_upper_tail(ranks, g.w_plus)) << "trial " << t;
    ++checked;
  }
  EXPECT_GT(checked, 150);
}

TEST(Wilcoxon, ExactAndNormalAgreeAtTwelve) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(12), b(12);
    const double shift = 0.3 * (t % 4);
    for (std::size_t i = 0; i < 12; ++i) {
      a[i] = gauss(rng) + shift;
      b[i] = gauss(rng);
    }
    const auto exact = wilcoxon_signed_rank(a, b);
    ASSERT_TRUE(exact.exact);
    // normal branch on the same data: append 12 zero-difference pairs is not
    // enough (they are dropped), so evaluate the approximation directly
    const double n = 12, mean = n * (n + 1) / 4, sd = std::sqrt(n * (n + 1) * (2 * n + 1) / 24);
    const double z = std::max(0.0, (std::abs(exact.w_plus - mean) - 0.5) / sd);
    const double approx = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    EXPECT_NEAR(*exact.p, approx, 0.02) << "trial " << t;
  }
}

TEST(Wilcoxon, NormalBranchUsedAboveTwelve) {
  std::vector<double> a, b;
  for (int i = 1; i <= 20; ++i) {
    a.push_back(i);
    b.push_back(i % 3 == 0 ? i + 0.5 * i : i - 0.25 * i);
  }
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_FALSE(r.exact);
  ASSERT_TRUE(r.sufficient());
  EXPECT_GT(*r.p, 0.0);
  EXPECT_LE(*r.p, 1.0);
}

TEST(Wilcoxon, CalibratedUnderTheNull) {
  std::mt19937_64 rng(1234);
  std::normal_distribution<double> gauss(0.0, 1.0);
  int rejections = 0;
  const int sims = 1000;
  for (int s = 0; s < sims; ++s) {
    std::vector<double> a(30), b(30);
    for (std::size_t i = 0; i < 30; ++i) {
      a[i] = gauss(rng);
      b[i] = gauss(rng);
    }
    if (*wilcoxon_signed_rank(a, b).p < 0.05) ++rejections;
  }
  const double rate = static_cast<double>(rejections) / sims;
  EXPECT_GE(rate, 0.03);
  EXPECT_LE(rate, 0.07);
}

TEST(Wilcoxon, GreaterAlternativeIsOneTail) {
  const std::vector<double> a{5, 6, 7, 8, 9, 10, 11}, b{1, 2, 3, 4, 5, 6, 12};
  const auto two = wilcoxon_signed_rank(a, b);
  const auto gt = wilcoxon_signed_rank(a, b, Alternative::Greater);
  const auto lt = wilcoxon_signed_rank(b, a, Alternative::Greater);
  EXPECT_LT(*gt.p, *lt.p);
  EXPECT_LE(*gt.p, *two.p);
}

TEST(ConfidenceInterval, TwoPointExample) {
  const auto ci = confidence_interval({0.0, 1.0});
  EXPECT_DOUBLE_EQ(ci.mean, 0.5);
  EXPECT_NEAR(ci.hi - ci.mean, 6.353, 1e-3);
  EXPECT_NEAR(ci.mean - ci.lo, 6.353, 1e-3);
}

TEST(ConfidenceInterval, ConstantListHasZeroWidth) {
  const auto ci = confidence_interval({0.7, 0.7, 0.7, 0.7});
  EXPECT_EQ(ci.lo, 0.7);
  EXPECT_EQ(ci.hi, 0.7);
}

TEST(ConfidenceInterval, ContainsMeanAndRejectsSingleton) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(2 + t % 9);
    for (double& x : v) x = u(rng);
    const auto ci = confidence_interval(v);
    EXPECT_LE(ci.lo, ci.mean);
    EXPECT_GE(ci.hi, ci.mean);
  }
  EXPECT_THROW(confidence_interval({1.0}), ConfigError);
  EXPECT_THROW(confidence_interval({1.0, 2.0}, 1.5), ConfigError);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), ConfigError);
}
