#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "apex/error.hpp"
#include "apex/evaluator.hpp"
#include "oracles.hpp"

using namespace apex;

namespace {

struct Binary {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Both classes present; coarse scores half the time so ties show up.
Binary random_binary(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(2, 30), coarse(0, 4), bit(0, 1);
  std::normal_distribution<double> n(0.0, 1.0);
  Binary b;
  const int size = len(rng);
  const bool tied = bit(rng);
  for (int i = 0; i < size; ++i) {
    b.scores.push_back(tied ? coarse(rng) : n(rng));
    b.labels.push_back(bit(rng));
  }
  b.labels[0] = 1;
  b.labels[1] = 0;
  return b;
}

}  // namespace

TEST(Metrics, BinaryMatchOraclesOnRandomInstances) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const Binary b = random_binary(rng);
    EXPECT_NEAR(eer(b.scores, b.labels), oracle::eer(b.scores, b.labels), 1e-9) << trial;
    EXPECT_NEAR(auroc(b.scores, b.labels), oracle::auroc(b.scores, b.labels), 1e-9) << trial;
    EXPECT_NEAR(average_precision(b.scores, b.labels), oracle::average_precision(b.scores, b.labels), 1e-9)
        << trial;
  }
}

TEST(Metrics, MatrixMetricsMatchOracles) {
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> len(2, 30), cls(2, 5), coarse(0, 3), bit(0, 1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = static_cast<std::size_t>(len(rng)), cols = static_cast<std::size_t>(cls(rng));
    const bool tied = bit(rng);
    Matrix s(rows, cols);
    for (double& v : s.data()) v = tied ? coarse(rng) : n(rng);
    std::vector<std::vector<std::size_t>> labels(rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t c = 0; c < cols; ++c)
        if (bit(rng) && bit(rng)) labels[i].push_back(c);
    if (labels[0].empty() || labels[0][0] != 0) labels[0].insert(labels[0].begin(), 0);

    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      std::vector<double> col(rows);
      std::vector<int> y(rows, 0);
      for (std::size_t i = 0; i < rows; ++i) {
        col[i] = s(i, c);
        for (auto l : labels[i]) y[i] |= l == c;
      }
      if (std::count(y.begin(), y.end(), 1) == 0) continue;
      sum += oracle::average_precision(col, y);
      ++used;
    }
    const ClassMean cm = cmap(s, labels);
    EXPECT_EQ(cm.used, used);
    EXPECT_EQ(cm.used + cm.excluded, cols);
    EXPECT_NEAR(cm.value, sum / static_cast<double>(used), 1e-9);
    EXPECT_NEAR(t1_acc(s, labels), oracle::t1_acc(s, labels), 1e-9);
  }
}

TEST(Metrics, PerfectReversedAndChance) {
  const std::vector<double> s = {0.1, 0.2, 0.3, 0.8, 0.9};
  const std::vector<int> perfect = {0, 0, 0, 1, 1};
  const std::vector<int> reversed = {1, 1, 0, 0, 0};
  EXPECT_EQ(eer(s, perfect), 0.0);
  EXPECT_EQ(auroc(s, perfect), 1.0);
  EXPECT_EQ(average_precision(s, perfect), 1.0);
  EXPECT_EQ(eer(s, reversed), 1.0);
  EXPECT_EQ(auroc(s, reversed), 0.0);

  const std::vector<double> flat(6, 0.5);
  const std::vector<int> mixed = {1, 0, 1, 0, 0, 1};
  EXPECT_EQ(auroc(flat, mixed), 0.5);
  EXPECT_EQ(eer(flat, mixed), 0.5);
  EXPECT_EQ(average_precision(flat, mixed), 0.5);

  Matrix m(2, 2, std::vector<double>{0.9, 0.1, 0.2, 0.8});
  EXPECT_EQ(t1_acc(m, {{0}, {1}}), 1.0);
  EXPECT_EQ(t1_acc(m, {{1}, {0}}), 0.0);
  EXPECT_EQ(cmap(m, {{0}, {1}}).value, 1.0);
  EXPECT_EQ(macro_auroc(m, {{0}, {1}}).value, 1.0);
}

TEST(Metrics, TopOneTieGoesToFirstClass) {
  Matrix m(1, 3, std::vector<double>{0.5, 0.5, 0.1});
  EXPECT_EQ(t1_acc(m, {{0}}), 1.0);
  EXPECT_EQ(t1_acc(m, {{1}}), 0.0);
}

TEST(Metrics, DegenerateInputsRejected) {
  const std::vector<double> s = {0.1, 0.2};
  EXPECT_THROW(eer(s, std::vector<int>{1, 1}), ValidationError);
  EXPECT_THROW(auroc(s, std::vector<int>{0, 0}), ValidationError);
  EXPECT_THROW(average_precision(s, std::vector<int>{0, 0}), ValidationError);
  EXPECT_THROW(auroc(s, std::vector<int>{0, 2}), ValidationError);
  EXPECT_THROW(auroc(s, std::vector<int>{0}), ShapeError);
  Matrix m(2, 2);
  EXPECT_THROW(cmap(m, {{}, {}}), ValidationError);
  EXPECT_THROW(cmap(m, {{0}, {2}}), ValidationError);

  const ClassMean partial = cmap(Matrix(2, 3, std::vector<double>{1, 0, 0, 0, 1, 0}), {{0}, {1}});
  EXPECT_EQ(partial.used, 2u);
  EXPECT_EQ(partial.excluded, 1u);
}
