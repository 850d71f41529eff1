#include "apex/schemes.hpp"

#include <algorithm>
#include <cmath>

#include "apex/error.hpp"

namespace apex {

namespace {

void require_channel(const LatentMap& zhat, std::size_t k) {
  if (k >= zhat.channels) {
    throw ShapeError("channel " + std::to_string(k) + " out of range (D=" +
                     std::to_string(zhat.channels) + ")");
  }
}

std::size_t argmax_time_of_column_means(std::span<const double> slice, std::size_t freq_bins,
                                        std::size_t time_frames) {
  std::size_t best = 0;
  double best_value = 0.0;
  for (std::size_t t = 0; t < time_frames; ++t) {
    double sum = 0.0;
    for (std::size_t f = 0; f < freq_bins; ++f) sum += slice[f * time_frames + t];
    const double mean = sum / static_cast<double>(freq_bins);
    if (t == 0 || mean > best_value) {
      best = t;
      best_value = mean;
    }
  }
  return best;
}

std::size_t argmax_freq_of_row_means(std::span<const double> slice, std::size_t freq_bins,
                                     std::size_t time_frames) {
  std::size_t best = 0;
  double best_value = 0.0;
  for (std::size_t f = 0; f < freq_bins; ++f) {
    double sum = 0.0;
    for (std::size_t t = 0; t < time_frames; ++t) sum += slice[f * time_frames + t];
    const double mean = sum / static_cast<double>(time_frames);
    if (f == 0 || mean > best_value) {
      best = f;
      best_value = mean;
    }
  }
  return best;
}

void add_column(Selection& sel, std::size_t t, std::size_t freq_bins, double weight) {
  for (std::size_t f = 0; f < freq_bins; ++f) sel.cells.push_back({f, t, weight});
}

void add_row(Selection& sel, std::size_t f, std::size_t time_frames, double weight) {
  for (std::size_t t = 0; t < time_frames; ++t) sel.cells.push_back({f, t, weight});
}

}  // namespace

std::string_view to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::kSquare: return "square";
    case Scheme::kTime: return "time";
    case Scheme::kFrequency: return "frequency";
    case Scheme::kTimeFrequency: return "time_frequency";
  }
  return "?";
}

Scheme parse_scheme(std::string_view name) {
  if (name == "square") return Scheme::kSquare;
  if (name == "time") return Scheme::kTime;
  if (name == "frequency") return Scheme::kFrequency;
  if (name == "time_frequency" || name == "tf") return Scheme::kTimeFrequency;
  throw ConfigError("unknown scheme '" + std::string(name) +
                    "' (expected square, time, frequency or time_frequency)");
}

Selection select_coordinates(std::span<const double> slice, std::size_t freq_bins,
                             std::size_t time_frames, Scheme scheme) {
  if (slice.size() != freq_bins * time_frames || slice.empty()) {
    throw ShapeError("select_coordinates: slice is not F x T");
  }
  Selection sel;
  sel.scheme = scheme;
  switch (scheme) {
    case Scheme::kSquare: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < slice.size(); ++i)
        if (slice[i] > slice[best]) best = i;
      sel.freq = best / time_frames;
      sel.time = best % time_frames;
      sel.cells.push_back({*sel.freq, *sel.time, 1.0});
      break;
    }
    case Scheme::kTime: {
      sel.time = argmax_time_of_column_means(slice, freq_bins, time_frames);
      add_column(sel, *sel.time, freq_bins, 1.0 / static_cast<double>(freq_bins));
      break;
    }
    case Scheme::kFrequency: {
      sel.freq = argmax_freq_of_row_means(slice, freq_bins, time_frames);
      add_row(sel, *sel.freq, time_frames, 1.0 / static_cast<double>(time_frames));
      break;
    }
    case Scheme::kTimeFrequency: {
      sel.time = argmax_time_of_column_means(slice, freq_bins, time_frames);
      sel.freq = argmax_freq_of_row_means(slice, freq_bins, time_frames);
      add_column(sel, *sel.time, freq_bins, 0.5 / static_cast<double>(freq_bins));
      add_row(sel, *sel.freq, time_frames, 0.5 / static_cast<double>(time_frames));
      break;
    }
  }
  return sel;
}

std::vector<double> channel_slice(const LatentMap& zhat, std::size_t k) {
  require_channel(zhat, k);
  std::vector<double> slice(zhat.cells());
  for (std::size_t c = 0; c < slice.size(); ++c) slice[c] = zhat.values[c * zhat.channels + k];
  return slice;
}

std::vector<double> prototype_from_selection(const LatentMap& zhat, const Selection& sel) {
  std::vector<double> p(zhat.channels, 0.0);
  for (const auto& cw : sel.cells) {
    auto fiber = zhat.fiber(cw.freq, cw.time);
    for (std::size_t d = 0; d < p.size(); ++d) p[d] += cw.weight * fiber[d];
  }
  return p;
}

PrototypeVector extract(const LatentMap& zhat, std::size_t k, Scheme scheme,
                        std::string source_sample) {
  const auto slice = channel_slice(zhat, k);
  const Selection sel = select_coordinates(slice, zhat.freq_bins, zhat.time_frames, scheme);
  PrototypeVector p;
  p.channel = k;
  p.scheme = scheme;
  p.freq = sel.freq;
  p.time = sel.time;
  p.vector = prototype_from_selection(zhat, sel);
  p.source_sample = std::move(source_sample);
  return p;
}

PrototypeVector extract_square(const LatentMap& zhat, std::size_t k) {
  return extract(zhat, k, Scheme::kSquare);
}
PrototypeVector extract_time(const LatentMap& zhat, std::size_t k) {
  return extract(zhat, k, Scheme::kTime);
}
PrototypeVector extract_frequency(const LatentMap& zhat, std::size_t k) {
  return extract(zhat, k, Scheme::kFrequency);
}
PrototypeVector extract_time_frequency(const LatentMap& zhat, std::size_t k) {
  return extract(zhat, k, Scheme::kTimeFrequency);
}

double purity(std::span<const double> v, std::size_t k) {
  if (k >= v.size()) throw ShapeError("purity: channel index out of range");
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq == 0.0) return 0.0;
  // Clamp: |v_k| / ||v|| can exceed 1 by an ulp.
  return std::min(1.0, std::abs(v[k]) / std::sqrt(sq));
}

double purity(const PrototypeVector& p) { return purity(p.vector, p.channel); }

bool purity_degenerate(std::span<const double> v) {
  for (double x : v)
    if (x != 0.0) return false;
  return true;
}

std::vector<double> purity_gradient_wrt_vector(std::span<const double> v, std::size_t k) {
  if (k >= v.size()) throw ShapeError("purity_gradient: channel index out of range");
  std::vector<double> g(v.size(), 0.0);
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq == 0.0) return g;
  const double norm = std::sqrt(sq);
  const double abs_k = std::abs(v[k]);
  const double scale = -abs_k / (sq * norm);
  for (std::size_t i = 0; i < v.size(); ++i) g[i] = scale * v[i];
  const double sign_k = v[k] > 0.0 ? 1.0 : (v[k] < 0.0 ? -1.0 : 0.0);
  g[k] += sign_k / norm;
  return g;
}

LatentMap purity_gradient(const LatentMap& zhat, std::size_t k, Scheme scheme) {
  const auto slice = channel_slice(zhat, k);
  const Selection sel = select_coordinates(slice, zhat.freq_bins, zhat.time_frames, scheme);
  const auto p = prototype_from_selection(zhat, sel);
  const auto gp = purity_gradient_wrt_vector(p, k);

  LatentMap grad(zhat.freq_bins, zhat.time_frames, zhat.channels);
  for (const auto& cw : sel.cells) {
    for (std::size_t d = 0; d < zhat.channels; ++d) grad.at(cw.freq, cw.time, d) += cw.weight * gp[d];
  }
  return grad;
}

double channel_activation(const LatentMap& zhat, std::size_t k) {
  require_channel(zhat, k);
  double sum = 0.0;
  for (std::size_t c = 0; c < zhat.cells(); ++c) sum += zhat.values[c * zhat.channels + k];
  return sum;
}

}  // namespace apex
