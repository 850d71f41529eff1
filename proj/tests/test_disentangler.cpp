#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <filesystem>
#include <random>
#include <sstream>

#include "apex/disentangler.hpp"
#include "apex/error.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace apex;

namespace {

std::vector<FeatureMap> random_set(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<FeatureMap> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(oracle::random_features(4, 4, d, rng));
    out.back().sample_id = "s" + std::to_string(100 + i);
  }
  return out;
}

ClassifierHead random_head(std::size_t classes, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ClassifierHead h;
  h.num_classes = classes;
  h.channels = d;
  h.weights = oracle::random_matrix(classes, d, 1.0, rng);
  h.bias.assign(classes, 0.1);
  return h;
}

}  // namespace

TEST(Schedule, ProtoCountEndpointsAndMidpoint) {
  DisentangleConfig c;
  EXPECT_EQ(proto_count_at(0, c), 100u);
  EXPECT_EQ(proto_count_at(19, c), 5u);
  EXPECT_EQ(proto_count_at(10, c), 50u);
  EXPECT_EQ(proto_count_at(40, c), 5u);
  for (std::size_t e = 1; e < c.epochs; ++e) EXPECT_LE(proto_count_at(e, c), proto_count_at(e - 1, c));
  c.epochs = 1;
  EXPECT_EQ(proto_count_at(0, c), 100u);
}

TEST(Schedule, RecalcEveryInterval) {
  DisentangleConfig c;
  for (std::size_t e = 0; e < c.epochs; ++e) EXPECT_EQ(recalc_due(e, c), e % 2 == 0) << e;
  c.recalc_interval = 3;
  EXPECT_TRUE(recalc_due(3, c));
  EXPECT_FALSE(recalc_due(4, c));
}

TEST(Config, RejectsBadValues) {
  DisentangleConfig c;
  c.validate();
  auto bad = c;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.proto_count_start = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.lr = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.beta2 = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ProtoSets, TopMByActivationWithIdTieBreak) {
  auto feats = random_set(10, 3, 1);
  // Make samples 4 and 2 tie on channel 0 by copying.
  feats[4].values = feats[2].values;
  DisentangleConfig c;
  DisentangleState s = DisentangleState::identity(3, c);
  std::mt19937_64 rng(4);
  s.set_a(oracle::random_matrix(3, 3, 0.2, rng));
  EXPECT_TRUE(recalc_prototype_sets(s, feats, 10));

  for (std::size_t k = 0; k < 3; ++k) {
    // Oracle: full sort of freshly computed activations.
    std::vector<std::pair<double, std::string>> all;
    for (const auto& z : feats) all.push_back({channel_activation(apply_transform(s.u, z), k), z.sample_id});
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    ASSERT_EQ(s.protosets[k].size(), 10u);
    for (std::size_t r = 0; r < 10; ++r) {
      EXPECT_NEAR(s.protosets[k][r].activation, all[r].first, 1e-9);
      if (r + 1 < 10 && std::abs(all[r].first - all[r + 1].first) > 1e-9)
        EXPECT_EQ(s.protosets[k][r].sample_id, all[r].second);
    }
  }
  EXPECT_FALSE(recalc_prototype_sets(s, feats, 50));
  EXPECT_EQ(s.protosets[0].size(), 10u);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  const auto feats = random_set(12, 4, 2);
  DisentangleConfig c;
  c.scheme = Scheme::kTimeFrequency;
  DisentangleState s = DisentangleState::identity(4, c);
  std::mt19937_64 rng(5);
  s.set_a(oracle::random_matrix(4, 4, 0.1, rng));
  recalc_prototype_sets(s, feats, 4);
  const auto pairs = all_pairs(s);
  const PurityLoss loss = purity_loss(s, feats, pairs);
  const double h = 1e-6;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      DisentangleState p = s, m = s;
      Matrix ap = s.a, am = s.a;
      ap(i, j) += h;
      am(i, j) -= h;
      p.set_a(ap);
      m.set_a(am);
      const double fd = (purity_loss(p, feats, pairs).loss - purity_loss(m, feats, pairs).loss) / (2 * h);
      EXPECT_NEAR(loss.grad_a(i, j), fd, 1e-6);
    }
}

TEST(Invariance, FoldedHeadReproducesLogits) {
  const auto feats = random_set(20, 5, 3);
  const ClassifierHead head = random_head(3, 5, 4);
  DisentangleConfig c;
  DisentangleState s = DisentangleState::identity(5, c);
  std::mt19937_64 rng(6);
  s.set_a(oracle::random_matrix(5, 5, 0.5, rng));
  const FoldedHead folded = fold_head(head, s);
  const auto rep = check_invariance(head, folded, s.u, feats);
  EXPECT_EQ(rep.samples, 20u);
  EXPECT_LE(rep.max_relative_deviation, 1e-8);
  EXPECT_EQ(rep.argmax_mismatches, 0u);

  // A wrong fold is caught.
  FoldedHead broken = folded;
  broken.weights(0, 0) += 1.0;
  EXPECT_GT(check_invariance(head, broken, s.u, feats).max_relative_deviation, 1e-3);
}

TEST(Fit, RunsScheduleAndKeepsInvariance) {
  const auto feats = random_set(30, 4, 7);
  const ClassifierHead head = random_head(3, 4, 8);
  DisentangleConfig c;
  c.epochs = 4;
  c.proto_count_start = 10;
  c.proto_count_end = 3;
  c.batch_size = 8;
  c.lr = 1e-2;
  std::ostringstream log;
  const FitResult r = fit(c, feats, head, feats, &log);
  ASSERT_EQ(r.history.size(), 4u);
  EXPECT_TRUE(r.history[0].recalculated);
  EXPECT_FALSE(r.history[1].recalculated);
  EXPECT_TRUE(r.history[2].recalculated);
  EXPECT_EQ(r.history[0].proto_count, 10u);
  EXPECT_EQ(r.history[3].proto_count, 3u);
  for (const auto& e : r.history) {
    EXPECT_LE(e.invariance_residual, 1e-8);
    EXPECT_EQ(e.argmax_mismatches, 0u);
    EXPECT_GT(e.steps, 0u);
  }
  EXPECT_EQ(r.state.protosets[0].size(), 3u);
  EXPECT_EQ(r.state.epoch, 4u);
  EXPECT_NE(log.str().find("event=epoch epoch=3"), std::string::npos);

  const FitResult again = fit(c, feats, head, feats);
  EXPECT_EQ(again.state.a, r.state.a);
}

TEST(Fit, RejectsMismatchedHead) {
  const auto feats = random_set(5, 4, 9);
  EXPECT_THROW(fit(DisentangleConfig{}, feats, random_head(2, 3, 1), feats), ShapeError);
}

TEST(State, SaveLoadRoundTrip) {
  const auto feats = random_set(15, 3, 10);
  DisentangleConfig c;
  c.epochs = 2;
  c.proto_count_start = 6;
  c.proto_count_end = 2;
  c.lr = 5e-3;
  c.scheme = Scheme::kFrequency;
  const FitResult r = fit(c, feats, random_head(2, 3, 11), feats);
  StoredState st{c, r.state, r.initial_purity, r.final_purity};
  const fs::path dir = fs::temp_directory_path() / "apex_state_rt";
  fs::remove_all(dir);
  save_state(st, dir / "state.apx");
  const StoredState back = load_state(dir / "state.apx");
  EXPECT_EQ(back.state.a, r.state.a);
  EXPECT_EQ(back.state.u, r.state.u);
  EXPECT_EQ(back.state.scheme, Scheme::kFrequency);
  EXPECT_EQ(back.config.epochs, 2u);
  EXPECT_EQ(back.config.lr, 5e-3);
  EXPECT_EQ(back.final_purity, r.final_purity);
  ASSERT_EQ(back.state.protosets.size(), 3u);
  EXPECT_EQ(back.state.protosets[1][0].sample_id, r.state.protosets[1][0].sample_id);
  EXPECT_EQ(back.state.protosets[1][0].freq, r.state.protosets[1][0].freq);

  save_state(st, dir / "again.apx");
  std::ifstream a(dir / "state.apx", std::ios::binary), b(dir / "again.apx", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
}
