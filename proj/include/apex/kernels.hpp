#pragma once

// Hot loops of the engine. Every kernel has a straightforward serial version
// (the reference the tests compare against) and an OpenMP version. Parallel
// reductions are written so the result does not depend on the thread count:
// workers fill per-item buffers and the sum is taken in item order.

#include <cstddef>
#include <span>
#include <vector>

#include "apex/data_model.hpp"
#include "apex/linalg.hpp"
#include "apex/schemes.hpp"

namespace apex {

// Caps OpenMP worker threads; 0 restores the runtime default.
void set_thread_limit(int threads);
int thread_limit();

// (sample index, channel) pair drawn from a channel's prototype set.
struct ProtoPair {
  std::size_t sample = 0;
  std::size_t channel = 0;
};

struct PurityBatchResult {
  double purity_sum = 0.0;
  std::size_t degenerate = 0;
  Matrix grad_u;                 // d(sum of purities)/dU
  std::vector<double> purities;  // per pair, batch order
};

namespace kernels {

namespace serial {

LatentMap apply_transform(const Matrix& u, const FeatureMap& z);
// Row i holds sum_{f,t} z_i[f, t, :].
Matrix channel_sums(std::span<const FeatureMap> features);
PurityBatchResult purity_batch(const Matrix& u, std::span<const FeatureMap> features,
                               std::span<const ProtoPair> pairs, Scheme scheme);

}  // namespace serial

namespace parallel {

LatentMap apply_transform(const Matrix& u, const FeatureMap& z);
Matrix channel_sums(std::span<const FeatureMap> features);
PurityBatchResult purity_batch(const Matrix& u, std::span<const FeatureMap> features,
                               std::span<const ProtoPair> pairs, Scheme scheme);

}  // namespace parallel

}  // namespace kernels

// Default entry points (parallel kernels).
LatentMap apply_transform(const Matrix& u, const FeatureMap& z);

}  // namespace apex
