#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "apex/error.hpp"
#include "apex/evaluator.hpp"
#include "apex/kernels.hpp"

namespace apex {

using json = nlohmann::json;

namespace {

using Range = std::pair<std::size_t, std::size_t>;

constexpr std::size_t kNoEdge = std::numeric_limits<std::size_t>::max();

// Distance (in bins) from x to the nearest border of r that lies inside [0, extent).
std::size_t edge_distance(std::size_t x, Range r, std::size_t extent) {
  std::size_t d = kNoEdge;
  if (r.first > 0) d = std::min(d, x - r.first);
  if (r.second < extent) d = std::min(d, r.second - 1 - x);
  return d;
}

double ramp(std::size_t d, double floor, std::size_t softness) {
  if (softness == 0 || d == kNoEdge || d + 1 >= softness) return floor;
  const double s = static_cast<double>(softness);
  return 1.0 - (1.0 - floor) * static_cast<double>(d + 1) / s;
}

bool in_range(std::size_t x, const std::optional<Range>& r) {
  return r && x >= r->first && x < r->second;
}

void check_range(const std::optional<Range>& r, std::size_t extent, std::size_t softness,
                 const char* axis) {
  if (!r) return;
  if (r->first >= r->second || r->second > extent) {
    throw ValidationError(std::string("mask: ") + axis + " range outside the input geometry");
  }
  if (2 * softness > r->second - r->first) {
    throw ConfigError(std::string("mask: edge_softness exceeds half the region's ") + axis +
                      " width");
  }
}

std::vector<int> binary_column(const std::vector<std::vector<std::size_t>>& labels, std::size_t c) {
  std::vector<int> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    y[i] = std::find(labels[i].begin(), labels[i].end(), c) != labels[i].end();
  return y;
}

struct RunMetrics {
  double cmap = 0.0;
  double auroc = 0.0;
  double t1 = 0.0;
  std::optional<double> eer;
};

RunMetrics evaluate(const Matrix& logits, const MaskStudyInput& in) {
  RunMetrics m;
  m.cmap = cmap(logits, in.labels).value;
  m.auroc = macro_auroc(logits, in.labels).value;
  m.t1 = t1_acc(logits, in.labels);
  if (in.num_classes == 2) {
    std::vector<double> s(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) s[i] = logits(i, 1) - logits(i, 0);
    m.eer = eer(s, binary_column(in.labels, 1));
  }
  return m;
}

MetricValue summarize(const std::vector<double>& v) {
  MetricValue out;
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(v.size()));
  return out;
}

MetricReport make_report(MaskCondition cond, std::optional<Scheme> scheme,
                         std::vector<std::uint64_t> seeds, const std::vector<RunMetrics>& runs) {
  MetricReport r;
  r.condition = cond;
  r.scheme = scheme;
  r.seeds = std::move(seeds);
  std::vector<double> a, b, c, e;
  for (const auto& m : runs) {
    a.push_back(m.cmap);
    b.push_back(m.auroc);
    c.push_back(m.t1);
    if (m.eer) e.push_back(*m.eer);
  }
  r.cmap = summarize(a);
  r.auroc = summarize(b);
  r.t1_acc = summarize(c);
  if (!e.empty()) r.eer = summarize(e);
  return r;
}

Matrix run_forward(const MaskStudyInput& in, const ForwardFn& forward,
                   const std::vector<std::optional<MaskSpec>>& masks) {
  const std::size_t n = in.spectrograms.size();
  Matrix out(n, in.num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = masks[i] ? forward(apply_mask(in.spectrograms[i], *masks[i]), in.sample_indices[i])
                            : forward(in.spectrograms[i], in.sample_indices[i]);
    if (l.size() != in.num_classes) throw ShapeError("masking_study: forward returned wrong logit count");
    for (std::size_t c = 0; c < l.size(); ++c) out(i, c) = l[c];
  }
  return out;
}

std::string fmt(const MetricValue& v, bool with_std) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v.mean;
  if (with_std) s << "+-" << std::setprecision(4) << v.std;
  return s.str();
}

json value_json(const MetricValue& v) { return {{"mean", v.mean}, {"std", v.std}}; }

}  // namespace

void MaskSpec::validate(std::size_t input_freq_bins, std::size_t input_time_frames) const {
  if (!(attenuation_floor >= 0.0 && attenuation_floor <= 1.0)) {
    throw ConfigError("mask: attenuation_floor must lie in [0, 1]");
  }
  const bool need_f = region.kind != Scheme::kTime;
  const bool need_t = region.kind != Scheme::kFrequency;
  if ((need_f && !region.f_range) || (need_t && !region.t_range)) {
    throw ValidationError("mask: region is missing a range its kind requires");
  }
  check_range(need_f ? region.f_range : std::nullopt, input_freq_bins, edge_softness, "frequency");
  check_range(need_t ? region.t_range : std::nullopt, input_time_frames, edge_softness, "time");
}

double mask_gain(const MaskSpec& spec, std::size_t f, std::size_t t, std::size_t input_freq_bins,
                 std::size_t input_time_frames) {
  const Region& r = spec.region;
  const double floor = spec.attenuation_floor;
  const std::size_t s = spec.edge_softness;
  switch (r.kind) {
    case Scheme::kSquare: {
      if (!in_range(f, r.f_range) || !in_range(t, r.t_range)) return 1.0;
      const std::size_t d = std::min(edge_distance(f, *r.f_range, input_freq_bins),
                                     edge_distance(t, *r.t_range, input_time_frames));
      return ramp(d, floor, s);
    }
    case Scheme::kTime:
      if (!in_range(t, r.t_range)) return 1.0;
      return ramp(edge_distance(t, *r.t_range, input_time_frames), floor, s);
    case Scheme::kFrequency:
      if (!in_range(f, r.f_range)) return 1.0;
      return ramp(edge_distance(f, *r.f_range, input_freq_bins), floor, s);
    case Scheme::kTimeFrequency: {
      double g = 1.0;
      if (in_range(f, r.f_range)) g = std::min(g, ramp(edge_distance(f, *r.f_range, input_freq_bins), floor, s));
      if (in_range(t, r.t_range)) g = std::min(g, ramp(edge_distance(t, *r.t_range, input_time_frames), floor, s));
      return g;
    }
  }
  return 1.0;
}

SpectrogramImage apply_mask(const SpectrogramImage& x, const MaskSpec& spec) {
  spec.validate(x.freq_bins, x.time_frames);
  SpectrogramImage out = x;
  for (std::size_t f = 0; f < x.freq_bins; ++f)
    for (std::size_t t = 0; t < x.time_frames; ++t)
      out.at(f, t) = static_cast<float>(static_cast<double>(x.at(f, t)) *
                                        mask_gain(spec, f, t, x.freq_bins, x.time_frames));
  return out;
}

Region random_mask_like(const Region& region, std::size_t input_freq_bins,
                        std::size_t input_time_frames, std::mt19937_64& rng) {
  auto place = [&](const Range& r, std::size_t extent) -> Range {
    const std::size_t w = r.second - r.first;
    if (w > extent) throw ValidationError("random_mask_like: region larger than the input");
    std::uniform_int_distribution<std::size_t> pick(0, extent - w);
    const std::size_t lo = pick(rng);
    return {lo, lo + w};
  };
  Region out = region;
  if (region.f_range) out.f_range = place(*region.f_range, input_freq_bins);
  if (region.t_range) out.t_range = place(*region.t_range, input_time_frames);
  return out;
}

const char* to_string(MaskCondition c) {
  switch (c) {
    case MaskCondition::kNoMask: return "no_mask";
    case MaskCondition::kRandomMask: return "random_mask";
    case MaskCondition::kApexMask: return "apex_mask";
  }
  return "?";
}

std::vector<MetricReport> masking_study(const MaskStudyInput& input, const ForwardFn& forward,
                                        std::span<const StudyScheme> schemes,
                                        const MaskStudyConfig& config) {
  const std::size_t n = input.features.size();
  if (input.spectrograms.size() != n) {
    throw DataError("masking_study: every sample needs a spectrogram (" +
                    std::to_string(input.spectrograms.size()) + " of " + std::to_string(n) + ")");
  }
  if (input.labels.size() != n || input.sample_indices.size() != n) {
    throw ShapeError("masking_study: labels / indices not aligned with features");
  }
  if (n == 0) throw ValidationError("masking_study: no samples");

  std::vector<MetricReport> reports;
  const std::vector<std::optional<MaskSpec>> none(n);
  reports.push_back(make_report(MaskCondition::kNoMask, std::nullopt, {},
                                {evaluate(run_forward(input, forward, none), input)}));

  for (const auto& sch : schemes) {
    if (!sch.state || !sch.folded) throw ConfigError("masking_study: scheme entry without state");
    const DisentangleState& state = *sch.state;

    for (const auto& z : input.features) {
      if (z.channels != state.channels() || sch.folded->channels != state.channels()) {
        throw ShapeError("masking_study: feature, state and head channel counts differ");
      }
    }
    // Top-1 contributing channel's region per sample.
    std::vector<Region> apex_regions(n);
    const long long nn = static_cast<long long>(n);
#pragma omp parallel for schedule(static) num_threads(thread_limit())
    for (long long i = 0; i < nn; ++i) {
      const auto ex = explain(input.features[i], state, *sch.folded, nullptr, 1);
      apex_regions[i] = ex.channels.front().region;
    }

    auto spec_for = [&](const Region& r) {
      MaskSpec m;
      m.region = r;
      m.attenuation_floor = config.attenuation_floor;
      m.edge_softness = config.edge_softness;
      return m;
    };

    std::vector<RunMetrics> random_runs;
    for (auto seed : config.seeds) {
      std::mt19937_64 rng(seed);
      std::vector<std::optional<MaskSpec>> masks(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& sp = input.spectrograms[i];
        masks[i] = spec_for(random_mask_like(apex_regions[i], sp.freq_bins, sp.time_frames, rng));
      }
      random_runs.push_back(evaluate(run_forward(input, forward, masks), input));
    }
    reports.push_back(
        make_report(MaskCondition::kRandomMask, state.scheme, config.seeds, random_runs));

    std::vector<std::optional<MaskSpec>> masks(n);
    for (std::size_t i = 0; i < n; ++i) masks[i] = spec_for(apex_regions[i]);
    reports.push_back(make_report(MaskCondition::kApexMask, state.scheme, {},
                                  {evaluate(run_forward(input, forward, masks), input)}));
  }
  return reports;
}

std::string format_report_table(std::span<const MetricReport> reports) {
  const bool has_eer = std::any_of(reports.begin(), reports.end(),
                                   [](const auto& r) { return r.eer.has_value(); });
  std::ostringstream out;
  out << std::left << std::setw(13) << "condition" << std::setw(16) << "scheme" << std::setw(17)
      << "cmAP" << std::setw(17) << "AUROC" << std::setw(17) << "T1-Acc";
  if (has_eer) out << "EER";
  out << '\n';
  for (const auto& r : reports) {
    const bool seeds = r.seeds.size() > 1;
    out << std::setw(13) << to_string(r.condition) << std::setw(16)
        << (r.scheme ? std::string(to_string(*r.scheme)) : std::string("-")) << std::setw(17)
        << fmt(r.cmap, seeds) << std::setw(17) << fmt(r.auroc, seeds) << std::setw(17)
        << fmt(r.t1_acc, seeds);
    if (r.eer) out << fmt(*r.eer, seeds);
    out << '\n';
  }
  return out.str();
}

std::string report_json(std::span<const MetricReport> reports) {
  json arr = json::array();
  for (const auto& r : reports) {
    json j = {{"condition", to_string(r.condition)},
              {"scheme", r.scheme ? json(std::string(to_string(*r.scheme))) : json(nullptr)},
              {"seeds", r.seeds},
              {"cmap", value_json(r.cmap)},
              {"auroc", value_json(r.auroc)},
              {"t1_acc", value_json(r.t1_acc)}};
    if (r.eer) j["eer"] = value_json(*r.eer);
    arr.push_back(std::move(j));
  }
  return arr.dump(1) + "\n";
}

}  // namespace apex
