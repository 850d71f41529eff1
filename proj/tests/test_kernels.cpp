#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "apex/kernels.hpp"
#include "apex/linalg.hpp"
#include "oracles.hpp"

using namespace apex;

namespace {

struct Fixture {
  std::vector<FeatureMap> features;
  std::vector<ProtoPair> pairs;
  Matrix u;
};

Fixture make_fixture(std::uint64_t seed, std::size_t n, std::size_t d) {
  std::mt19937_64 rng(seed);
  Fixture fx;
  for (std::size_t i = 0; i < n; ++i) fx.features.push_back(oracle::random_features(4, 5, d, rng));
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t i = 0; i < n; i += 3) fx.pairs.push_back({i, k});
  fx.u = mat_exp(oracle::random_matrix(d, d, 0.3, rng));
  return fx;
}

double max_abs(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

class ThreadLimitGuard {
 public:
  ~ThreadLimitGuard() { set_thread_limit(0); }
};

}  // namespace

TEST(Kernels, ApplyTransformMatchesDefinition) {
  const Fixture fx = make_fixture(1, 1, 3);
  const FeatureMap& z = fx.features[0];
  const LatentMap out = kernels::serial::apply_transform(fx.u, z);
  for (std::size_t f = 0; f < z.freq_bins; ++f)
    for (std::size_t t = 0; t < z.time_frames; ++t)
      for (std::size_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c) s += fx.u(r, c) * z.at(f, t, c);
        EXPECT_NEAR(out.at(f, t, r), s, 1e-12);
      }
}

TEST(Kernels, ParallelMatchesSerial) {
  ThreadLimitGuard guard;
  const Fixture fx = make_fixture(2, 40, 6);
  for (int threads : {1, 3}) {
    set_thread_limit(threads);
    const LatentMap a = kernels::serial::apply_transform(fx.u, fx.features[7]);
    const LatentMap b = kernels::parallel::apply_transform(fx.u, fx.features[7]);
    EXPECT_LE(max_abs(a.values, b.values), 1e-12);

    const Matrix sa = kernels::serial::channel_sums(fx.features);
    const Matrix sb = kernels::parallel::channel_sums(fx.features);
    EXPECT_LE(max_abs(sa.data(), sb.data()), 1e-10);

    for (Scheme s : kAllSchemes) {
      const auto ra = kernels::serial::purity_batch(fx.u, fx.features, fx.pairs, s);
      const auto rb = kernels::parallel::purity_batch(fx.u, fx.features, fx.pairs, s);
      EXPECT_NEAR(ra.purity_sum, rb.purity_sum, 1e-10);
      EXPECT_EQ(ra.degenerate, rb.degenerate);
      EXPECT_LE(max_abs(ra.grad_u.data(), rb.grad_u.data()), 1e-10);
      EXPECT_LE(max_abs(ra.purities, rb.purities), 1e-12);
    }
  }
}

TEST(Kernels, ParallelResultIndependentOfThreadCount) {
  ThreadLimitGuard guard;
  const Fixture fx = make_fixture(3, 60, 8);
  set_thread_limit(1);
  const auto one = kernels::parallel::purity_batch(fx.u, fx.features, fx.pairs, Scheme::kTimeFrequency);
  const Matrix sums_one = kernels::parallel::channel_sums(fx.features);
  for (int threads : {2, 4, 7}) {
    set_thread_limit(threads);
    const auto many = kernels::parallel::purity_batch(fx.u, fx.features, fx.pairs, Scheme::kTimeFrequency);
    EXPECT_EQ(one.purity_sum, many.purity_sum);
    EXPECT_EQ(one.grad_u, many.grad_u);
    EXPECT_EQ(one.purities, many.purities);
    EXPECT_EQ(sums_one, kernels::parallel::channel_sums(fx.features));
  }
}

TEST(Kernels, PurityBatchGradientMatchesFiniteDifferences) {
  const Fixture fx = make_fixture(4, 12, 3);
  const auto r = kernels::serial::purity_batch(fx.u, fx.features, fx.pairs, Scheme::kSquare);
  // Coordinates may move under perturbation; a small step keeps them fixed here.
  const double h = 1e-7;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      Matrix p = fx.u, m = fx.u;
      p(i, j) += h;
      m(i, j) -= h;
      const double fd = (kernels::serial::purity_batch(p, fx.features, fx.pairs, Scheme::kSquare).purity_sum -
                         kernels::serial::purity_batch(m, fx.features, fx.pairs, Scheme::kSquare).purity_sum) /
                        (2 * h);
      EXPECT_NEAR(r.grad_u(i, j), fd, 1e-5);
    }
}

TEST(Kernels, ThreadLimitRoundTrip) {
  ThreadLimitGuard guard;
  set_thread_limit(3);
  EXPECT_EQ(thread_limit(), 3);
}
