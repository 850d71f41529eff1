#include "apex/kernels.hpp"

#include <cmath>

#include "apex/error.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace apex {

namespace {

int g_thread_limit = 0;

int worker_count() {
#ifdef _OPENMP
  return g_thread_limit > 0 ? g_thread_limit : omp_get_max_threads();
#else
  return 1;
#endif
}

void require_transform_shape(const Matrix& u, const FeatureMap& z) {
  if (!u.is_square() || u.rows() != z.channels) {
    throw ShapeError("apply_transform: transform is " + std::to_string(u.rows()) + "x" +
                     std::to_string(u.cols()) + ", feature map has " +
                     std::to_string(z.channels) + " channels");
  }
}

void check_pairs(std::span<const FeatureMap> features, std::span<const ProtoPair> pairs,
                 std::size_t d) {
  for (const auto& pr : pairs) {
    if (pr.sample >= features.size()) throw ShapeError("purity_batch: sample index out of range");
    if (pr.channel >= d) throw ShapeError("purity_batch: channel index out of range");
  }
}

// Per-pair quantities of the factored gradient: d purity / dU = g (x) q where
// q = sum_i w_i z[f_i, t_i, :] and g = d purity / d p at p = U q.
struct PairTerms {
  double purity = 0.0;
  bool degenerate = false;
  std::vector<double> g;
  std::vector<double> q;
};

PairTerms pair_terms(const Matrix& u, const FeatureMap& z, std::size_t k, Scheme scheme) {
  const std::size_t d = z.channels;
  const std::size_t cells = z.cells();
  auto u_row = u.row(k);

  // Channel k of U z only; the remaining channels are never needed for selection.
  std::vector<double> slice(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    const float* fiber = z.values.data() + c * d;
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += u_row[j] * fiber[j];
    slice[c] = acc;
  }
  const Selection sel = select_coordinates(slice, z.freq_bins, z.time_frames, scheme);

  PairTerms out;
  out.q.assign(d, 0.0);
  for (const auto& cw : sel.cells) {
    const float* fiber = z.values.data() + (cw.freq * z.time_frames + cw.time) * d;
    for (std::size_t j = 0; j < d; ++j) out.q[j] += cw.weight * fiber[j];
  }
  const auto p = matvec(u, out.q);
  out.purity = purity(p, k);
  out.degenerate = purity_degenerate(p);
  out.g = purity_gradient_wrt_vector(p, k);
  return out;
}

}  // namespace

void set_thread_limit(int threads) { g_thread_limit = threads < 0 ? 0 : threads; }
int thread_limit() { return worker_count(); }

namespace kernels {

namespace serial {

LatentMap apply_transform(const Matrix& u, const FeatureMap& z) {
  require_transform_shape(u, z);
  const std::size_t d = z.channels;
  LatentMap out(z.freq_bins, z.time_frames, d);
  for (std::size_t c = 0; c < z.cells(); ++c) {
    const float* in = z.values.data() + c * d;
    double* dst = out.values.data() + c * d;
    for (std::size_t r = 0; r < d; ++r) {
      auto row = u.row(r);
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += row[j] * in[j];
      dst[r] = acc;
    }
  }
  return out;
}

Matrix channel_sums(std::span<const FeatureMap> features) {
  if (features.empty()) return {};
  const std::size_t d = features.front().channels;
  Matrix sums(features.size(), d);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& z = features[i];
    auto row = sums.row(i);
    for (std::size_t c = 0; c < z.cells(); ++c)
      for (std::size_t j = 0; j < d; ++j) row[j] += z.values[c * d + j];
  }
  return sums;
}

// Reference route: materialize U z, differentiate through the dense
// purity_gradient, then chain dL/dU = sum_{f,t} G[f,t,:] (x) z[f,t,:].
PurityBatchResult purity_batch(const Matrix& u, std::span<const FeatureMap> features,
                               std::span<const ProtoPair> pairs, Scheme scheme) {
  const std::size_t d = u.rows();
  check_pairs(features, pairs, d);
  PurityBatchResult res;
  res.grad_u = Matrix(d, d);
  res.purities.reserve(pairs.size());
  for (const auto& pr : pairs) {
    const auto& z = features[pr.sample];
    const LatentMap zhat = serial::apply_transform(u, z);
    const PrototypeVector p = extract(zhat, pr.channel, scheme);
    const double value = purity(p);
    res.purities.push_back(value);
    res.purity_sum += value;
    if (purity_degenerate(p.vector)) ++res.degenerate;

    const LatentMap g = purity_gradient(zhat, pr.channel, scheme);
    for (std::size_t c = 0; c < z.cells(); ++c) {
      const double* gc = g.values.data() + c * d;
      const float* zc = z.values.data() + c * d;
      for (std::size_t r = 0; r < d; ++r) {
        if (gc[r] == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) res.grad_u(r, j) += gc[r] * zc[j];
      }
    }
  }
  return res;
}

}  // namespace serial

namespace parallel {

LatentMap apply_transform(const Matrix& u, const FeatureMap& z) {
  require_transform_shape(u, z);
  const std::size_t d = z.channels;
  LatentMap out(z.freq_bins, z.time_frames, d);
  const long long cells = static_cast<long long>(z.cells());
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (long long c = 0; c < cells; ++c) {
    const float* in = z.values.data() + c * d;
    double* dst = out.values.data() + c * d;
    for (std::size_t r = 0; r < d; ++r) {
      auto row = u.row(r);
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += row[j] * in[j];
      dst[r] = acc;
    }
  }
  return out;
}

Matrix channel_sums(std::span<const FeatureMap> features) {
  if (features.empty()) return {};
  const std::size_t d = features.front().channels;
  Matrix sums(features.size(), d);
  const long long n = static_cast<long long>(features.size());
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (long long i = 0; i < n; ++i) {
    const auto& z = features[i];
    auto row = sums.row(i);
    for (std::size_t c = 0; c < z.cells(); ++c)
      for (std::size_t j = 0; j < d; ++j) row[j] += z.values[c * d + j];
  }
  return sums;
}

PurityBatchResult purity_batch(const Matrix& u, std::span<const FeatureMap> features,
                               std::span<const ProtoPair> pairs, Scheme scheme) {
  const std::size_t d = u.rows();
  check_pairs(features, pairs, d);
  for (const auto& pr : pairs) {
    if (features[pr.sample].channels != d) throw ShapeError("purity_batch: channel count mismatch");
  }

  std::vector<PairTerms> terms(pairs.size());
  const long long n = static_cast<long long>(pairs.size());
#pragma omp parallel for schedule(dynamic, 8) num_threads(worker_count())
  for (long long i = 0; i < n; ++i) {
    terms[i] = pair_terms(u, features[pairs[i].sample], pairs[i].channel, scheme);
  }

  PurityBatchResult res;
  res.grad_u = Matrix(d, d);
  res.purities.reserve(pairs.size());
  // Ordered reduction keeps the result bit-identical for any thread count.
  for (const auto& t : terms) {
    res.purities.push_back(t.purity);
    res.purity_sum += t.purity;
    if (t.degenerate) ++res.degenerate;
    for (std::size_t r = 0; r < d; ++r) {
      if (t.g[r] == 0.0) continue;
      auto row = res.grad_u.row(r);
      for (std::size_t j = 0; j < d; ++j) row[j] += t.g[r] * t.q[j];
    }
  }
  return res;
}

}  // namespace parallel

}  // namespace kernels

LatentMap apply_transform(const Matrix& u, const FeatureMap& z) {
  return kernels::parallel::apply_transform(u, z);
}

}  // namespace apex
