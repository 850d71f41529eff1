#include "apex/explainer.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "apex/error.hpp"
#include "apex/kernels.hpp"

namespace apex {

namespace {

void require_class(const FoldedHead& folded, const LatentMap& zhat, std::size_t y) {
  if (y >= folded.num_classes) {
    throw ShapeError("class index " + std::to_string(y) + " out of range (N = " +
                     std::to_string(folded.num_classes) + ")");
  }
  if (folded.channels != zhat.channels) throw ShapeError("head channels != latent channels");
}

void require_channel(const LatentMap& zhat, std::size_t k) {
  if (k >= zhat.channels) {
    throw ShapeError("channel " + std::to_string(k) + " out of range (D = " +
                     std::to_string(zhat.channels) + ")");
  }
}

}  // namespace

bool Region::contains(std::size_t f, std::size_t t) const {
  const bool in_f = f_range && f >= f_range->first && f < f_range->second;
  const bool in_t = t_range && t >= t_range->first && t < t_range->second;
  switch (kind) {
    case Scheme::kSquare: return in_f && in_t;
    case Scheme::kTime: return in_t;
    case Scheme::kFrequency: return in_f;
    case Scheme::kTimeFrequency: return in_f || in_t;
  }
  return false;
}

std::pair<std::size_t, std::size_t> latent_to_input(std::size_t i, std::size_t latent,
                                                    std::size_t in) {
  return {i * in / latent, (i + 1) * in / latent};
}

Region region_from_selection(const Selection& sel, std::size_t freq_bins, std::size_t time_frames,
                             std::size_t input_freq_bins, std::size_t input_time_frames) {
  Region r;
  r.kind = sel.scheme;
  if (sel.freq) r.f_range = latent_to_input(*sel.freq, freq_bins, input_freq_bins);
  if (sel.time) r.t_range = latent_to_input(*sel.time, time_frames, input_time_frames);
  return r;
}

std::vector<double> signed_contributions(const LatentMap& zhat, const FoldedHead& folded,
                                         std::size_t y) {
  require_class(folded, zhat, y);
  const auto v = gap(zhat);
  std::vector<double> out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = folded.weights(y, k) * v[k];
  return out;
}

std::vector<ChannelContribution> channel_contributions(const LatentMap& zhat,
                                                       const FoldedHead& folded, std::size_t y) {
  const auto raw = signed_contributions(zhat, folded, y);
  std::vector<ChannelContribution> out(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) out[k] = {k, std::max(raw[k], 0.0)};
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.contribution > b.contribution;
  });
  return out;
}

Region localize_region(const LatentMap& zhat, std::size_t k, Scheme scheme,
                       std::size_t input_freq_bins, std::size_t input_time_frames) {
  require_channel(zhat, k);
  const auto slice = channel_slice(zhat, k);
  const Selection sel = select_coordinates(slice, zhat.freq_bins, zhat.time_frames, scheme);
  return region_from_selection(sel, zhat.freq_bins, zhat.time_frames, input_freq_bins,
                               input_time_frames);
}

Heatmap bilinear_upsample(std::span<const double> src, std::size_t freq_bins,
                          std::size_t time_frames, std::size_t out_freq_bins,
                          std::size_t out_time_frames) {
  if (src.size() != freq_bins * time_frames || freq_bins == 0 || time_frames == 0) {
    throw ShapeError("bilinear_upsample: source size does not match its geometry");
  }
  // Source coordinate of output index o with half-pixel centers, clamped to the grid.
  auto taps = [](std::size_t o, std::size_t in, std::size_t out) {
    double x = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    x = std::clamp(x, 0.0, static_cast<double>(in - 1));
    const std::size_t lo = static_cast<std::size_t>(std::floor(x));
    const std::size_t hi = std::min(lo + 1, in - 1);
    return std::tuple{lo, hi, x - static_cast<double>(lo)};
  };
  Heatmap h;
  h.freq_bins = out_freq_bins;
  h.time_frames = out_time_frames;
  h.values.resize(out_freq_bins * out_time_frames);
  for (std::size_t f = 0; f < out_freq_bins; ++f) {
    const auto [f0, f1, wf] = taps(f, freq_bins, out_freq_bins);
    for (std::size_t t = 0; t < out_time_frames; ++t) {
      const auto [t0, t1, wt] = taps(t, time_frames, out_time_frames);
      const double a = src[f0 * time_frames + t0], b = src[f0 * time_frames + t1];
      const double c = src[f1 * time_frames + t0], d = src[f1 * time_frames + t1];
      const double top = a + wt * (b - a);
      const double bottom = c + wt * (d - c);
      h.values[f * out_time_frames + t] = top + wf * (bottom - top);
    }
  }
  return h;
}

Heatmap channel_heatmap(const LatentMap& zhat, const FoldedHead& folded, std::size_t y,
                        std::size_t k, std::size_t input_freq_bins,
                        std::size_t input_time_frames) {
  require_class(folded, zhat, y);
  require_channel(zhat, k);
  const double w = folded.weights(y, k);
  const double b = folded.bias[y] / static_cast<double>(zhat.channels);
  std::vector<double> latent(zhat.cells());
  double peak = 0.0;
  for (std::size_t c = 0; c < zhat.cells(); ++c) {
    latent[c] = std::max(w * zhat.values[c * zhat.channels + k] + b, 0.0);
    peak = std::max(peak, latent[c]);
  }
  if (peak > 0.0)
    for (auto& v : latent) v /= peak;
  Heatmap h = bilinear_upsample(latent, zhat.freq_bins, zhat.time_frames, input_freq_bins,
                                input_time_frames);
  for (auto& v : h.values) v = std::clamp(v, 0.0, 1.0);
  return h;
}

Explanation explain(const FeatureMap& sample, const DisentangleState& state,
                    const FoldedHead& folded, const PrototypeBank* bank, std::size_t top_k) {
  if (bank && bank->scheme != state.scheme) {
    throw ConfigError("bank scheme '" + std::string(to_string(bank->scheme)) +
                      "' does not match state scheme '" + std::string(to_string(state.scheme)) +
                      "'");
  }
  if (bank && bank->channels() != state.channels()) {
    throw ConfigError("bank channel count does not match the state");
  }
  const LatentMap zhat = apply_transform(state.u, sample);

  Explanation ex;
  ex.sample_id = sample.sample_id;
  ex.scheme = state.scheme;
  ex.input_freq_bins = sample.input_freq_bins;
  ex.input_time_frames = sample.input_time_frames;
  ex.logits = logits(folded, gap(zhat));
  ex.predicted_class = static_cast<std::size_t>(
      std::max_element(ex.logits.begin(), ex.logits.end()) - ex.logits.begin());

  const auto ranked = channel_contributions(zhat, folded, ex.predicted_class);
  top_k = std::min(top_k, ranked.size());
  ex.channels.resize(top_k);
  const long long n = static_cast<long long>(top_k);
#pragma omp parallel for schedule(static) num_threads(thread_limit())
  for (long long i = 0; i < n; ++i) {
    auto& ce = ex.channels[i];
    ce.channel = ranked[i].channel;
    ce.contribution = ranked[i].contribution;
    ce.region = localize_region(zhat, ce.channel, state.scheme, sample.input_freq_bins,
                                sample.input_time_frames);
    ce.heatmap = channel_heatmap(zhat, folded, ex.predicted_class, ce.channel,
                                 sample.input_freq_bins, sample.input_time_frames);
    if (bank) ce.prototypes = bank->per_channel[ce.channel];
  }
  return ex;
}

}  // namespace apex
