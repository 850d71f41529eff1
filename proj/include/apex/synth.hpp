#pragma once

// Synthetic ground-truth benchmark. A known linear "backbone" turns a
// spectrogram into pure concept maps (one channel per concept, read out by
// orthogonal Walsh codes inside each latent cell's input block), mixes them
// with a known invertible matrix and adds feature noise. The class head is
// known too, so disentanglement, localization and masking can all be checked
// against ground truth.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "apex/data_model.hpp"
#include "apex/linalg.hpp"
#include "apex/schemes.hpp"

namespace apex {

struct SynthConfig {
  std::size_t channels = 16;
  std::size_t freq_bins = 8;
  std::size_t time_frames = 8;
  std::size_t input_freq_bins = 32;
  std::size_t input_time_frames = 32;
  // Concept c lives in pure channel c; its placement kind is concept_kinds[c].
  std::vector<Scheme> concept_kinds;
  // Class n is driven by concept class_concepts[n]; other concepts are unlabeled.
  std::vector<std::size_t> class_concepts;
  double mixing_scale = 0.2;  // std of the entries of R, mixing = exp(R)
  double noise_sigma = 0.05;
  double amplitude_lo = 1.0;
  double amplitude_hi = 2.0;
  // Unlabeled concept added to a sample with this probability.
  double transient_prob = 1.0;
  double transient_lo = 5.0;
  double transient_hi = 10.0;
  // Weak second labeled concept (not in the label set) and its amplitude range.
  double confuser_prob = 1.0;
  double confuser_lo = 0.2;
  double confuser_hi = 1.4;
  double bias = 0.0;
  std::size_t num_samples = 500;
  double test_fraction = 0.2;
  std::uint64_t seed = 7;
  // When set, replaces the sampled mixing (must be D x D and invertible).
  std::optional<Matrix> mixing;

  std::size_t num_concepts() const { return concept_kinds.size(); }
  std::size_t num_classes() const { return class_concepts.size(); }

  // D concepts split into four equal runs of kinds in the order square, time,
  // frequency, time_frequency; every non-square concept is a class. For D = 16
  // that is four concepts per kind and twelve classes.
  static SynthConfig standard(std::size_t channels = 16);
  void validate() const;
};

enum class ConceptRole { kPrimary, kConfuser, kTransient };

struct ConceptInstance {
  std::size_t concept_id = 0;
  Scheme kind = Scheme::kSquare;
  ConceptRole role = ConceptRole::kPrimary;
  std::optional<std::size_t> freq;  // latent row (Square, Frequency, TimeFrequency)
  std::optional<std::size_t> time;  // latent column (Square, Time, TimeFrequency)
  double amplitude = 0.0;

  // Whether latent cell (f, t) belongs to the instance footprint.
  bool covers(std::size_t f, std::size_t t) const;
};

struct SynthTruth {
  std::vector<ConceptInstance> instances;
  std::size_t primary_class = 0;
  const ConceptInstance& primary() const;
};

// The known forward model X -> Z.
class SynthModel {
 public:
  SynthModel() = default;
  SynthModel(const SynthConfig& config, Matrix mixing);

  const Matrix& mixing() const { return mixing_; }
  const SynthConfig& config() const { return config_; }

  // Pure concept map of a spectrogram (no mixing, no noise).
  LatentMap pure_map(const SpectrogramImage& x) const;
  // mixing * pure_map(x) + per-sample noise, as exported (32-bit).
  FeatureMap features(const SpectrogramImage& x, std::size_t sample_index) const;
  // Head logits of the model on spectrogram x.
  std::vector<double> forward(const SpectrogramImage& x, std::size_t sample_index,
                              const ClassifierHead& head) const;
  // Input-domain pattern of concept c over one latent cell's block.
  float code(std::size_t concept_id, std::size_t i, std::size_t j) const;

 private:
  SynthConfig config_;
  Matrix mixing_;
  std::vector<std::vector<float>> codes_;  // per concept, block_f x block_t
  std::size_t block_f_ = 1;
  std::size_t block_t_ = 1;
};

struct SynthDataset {
  SynthConfig config;
  SynthModel model;
  Dataset dataset;
  ClassifierHead head;
  std::vector<SynthTruth> truth;  // aligned with dataset samples
};

SynthDataset generate(const SynthConfig& config);

// mean over rows r of max_c |M[r, c]| / ||M[r, :]||_2 where M = learned_u * mixing.
double recovery_score(const Matrix& learned_u, const Matrix& mixing);

// For each pure concept c, the learned channel that carries it: the row of
// M = learned_u * mixing with the largest |M[r, c]| / ||M[r, :]||.
std::vector<std::size_t> concept_channels(const Matrix& learned_u, const Matrix& mixing);

// Writes manifest.jsonl, head.apx, features/, spectrograms/ and
// ground_truth.json under dir.
void write_synth(const SynthDataset& synth, const std::filesystem::path& dir);
// Rebuilds config, model and truth from ground_truth.json (the dataset and head
// are read back through the ordinary loaders).
SynthDataset read_synth(const std::filesystem::path& dir);

}  // namespace apex
