#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "apex/data_model.hpp"
#include "apex/disentangler.hpp"
#include "apex/explainer.hpp"
#include "apex/linalg.hpp"

namespace apex {

// ---- metrics ----
// Scores are "higher means positive"; labels are 0/1.

// Equal error rate: thresholds swept over the sorted scores (accept when
// score >= threshold), linear interpolation between the two operating points
// that bracket FAR = FRR. Throws ValidationError unless both labels occur.
double eer(std::span<const double> scores, std::span<const int> labels);

// Mann-Whitney statistic normalized by P * N, ties counted one half.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Average precision with tied scores grouped into one operating point.
double average_precision(std::span<const double> scores, std::span<const int> labels);

struct ClassMean {
  double value = 0.0;
  std::size_t used = 0;      // classes that entered the mean
  std::size_t excluded = 0;  // classes skipped (no positives / no negatives)
};

// Per-class score matrix (samples x classes) against label sets.
ClassMean cmap(const Matrix& scores, const std::vector<std::vector<std::size_t>>& labels);
ClassMean macro_auroc(const Matrix& scores, const std::vector<std::vector<std::size_t>>& labels);

// Fraction of samples whose argmax (lowest index on ties) is in the label set.
double t1_acc(const Matrix& scores, const std::vector<std::vector<std::size_t>>& labels);

// ---- masking ----

struct MaskSpec {
  Region region;
  double attenuation_floor = 0.1;
  std::size_t edge_softness = 2;

  void validate(std::size_t input_freq_bins, std::size_t input_time_frames) const;
};

// Multiplicative gain of input cell (f, t) under the mask: 1 outside the
// region, the floor deep inside, a linear ramp over edge_softness bins next to
// region borders that lie inside the image.
double mask_gain(const MaskSpec& spec, std::size_t f, std::size_t t, std::size_t input_freq_bins,
                 std::size_t input_time_frames);

SpectrogramImage apply_mask(const SpectrogramImage& x, const MaskSpec& spec);

// Same kind and extents, placed uniformly at random inside the geometry.
Region random_mask_like(const Region& region, std::size_t input_freq_bins,
                        std::size_t input_time_frames, std::mt19937_64& rng);

enum class MaskCondition { kNoMask, kRandomMask, kApexMask };
const char* to_string(MaskCondition c);

struct MetricValue {
  double mean = 0.0;
  double std = 0.0;  // population std over seeds; 0 for single runs
};

struct MetricReport {
  MaskCondition condition = MaskCondition::kNoMask;
  std::optional<Scheme> scheme;
  std::vector<std::uint64_t> seeds;
  MetricValue cmap;
  MetricValue auroc;
  MetricValue t1_acc;
  // Filled for two-class tasks only (class 1 is the positive).
  std::optional<MetricValue> eer;
};

// Logits of the real model for a (possibly masked) spectrogram of sample i.
using ForwardFn = std::function<std::vector<double>(const SpectrogramImage&, std::size_t)>;

struct StudyScheme {
  const DisentangleState* state = nullptr;
  const FoldedHead* folded = nullptr;
};

struct MaskStudyConfig {
  double attenuation_floor = 0.1;
  std::size_t edge_softness = 2;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3};
};

struct MaskStudyInput {
  std::span<const FeatureMap> features;
  std::span<const SpectrogramImage> spectrograms;
  std::vector<std::vector<std::size_t>> labels;
  std::vector<std::size_t> sample_indices;  // forwarded to ForwardFn, aligned with features
  std::size_t num_classes = 0;
};

// no_mask once, then per scheme random_mask (one run per seed) and apex_mask
// (the top-1 contributing channel's region of each sample).
std::vector<MetricReport> masking_study(const MaskStudyInput& input, const ForwardFn& forward,
                                        std::span<const StudyScheme> schemes,
                                        const MaskStudyConfig& config);

std::string format_report_table(std::span<const MetricReport> reports);
std::string report_json(std::span<const MetricReport> reports);

}  // namespace apex
