#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "apex/linalg.hpp"

namespace apex {

// Backbone output Z for one sample, F x T x D, stored as exported (32-bit).
// Index order is (f, t, d) row-major, so each (f, t) fiber is contiguous.
struct FeatureMap {
  std::string sample_id;
  std::size_t freq_bins = 0;
  std::size_t time_frames = 0;
  std::size_t channels = 0;
  std::size_t input_freq_bins = 0;
  std::size_t input_time_frames = 0;
  std::vector<float> values;

  std::size_t cells() const { return freq_bins * time_frames; }
  std::size_t index(std::size_t f, std::size_t t, std::size_t d) const {
    return (f * time_frames + t) * channels + d;
  }
  float at(std::size_t f, std::size_t t, std::size_t d) const { return values[index(f, t, d)]; }
  std::span<const float> fiber(std::size_t f, std::size_t t) const {
    return {values.data() + index(f, t, 0), channels};
  }

  // Throws DataError / ShapeError when an invariant is broken.
  void validate() const;
};

// Working-precision latent tensor; Z-hat = U Z lives here.
struct LatentMap {
  std::size_t freq_bins = 0;
  std::size_t time_frames = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  LatentMap() = default;
  LatentMap(std::size_t f, std::size_t t, std::size_t d)
      : freq_bins(f), time_frames(t), channels(d), values(f * t * d, 0.0) {}

  std::size_t cells() const { return freq_bins * time_frames; }
  std::size_t index(std::size_t f, std::size_t t, std::size_t d) const {
    return (f * time_frames + t) * channels + d;
  }
  double& at(std::size_t f, std::size_t t, std::size_t d) { return values[index(f, t, d)]; }
  double at(std::size_t f, std::size_t t, std::size_t d) const { return values[index(f, t, d)]; }
  std::span<const double> fiber(std::size_t f, std::size_t t) const {
    return {values.data() + index(f, t, 0), channels};
  }
};

LatentMap to_latent(const FeatureMap& z);

// Model input X, F_in x T_in, row-major (frequency-major).
struct SpectrogramImage {
  std::string sample_id;
  std::size_t freq_bins = 0;
  std::size_t time_frames = 0;
  std::vector<float> values;

  float at(std::size_t f, std::size_t t) const { return values[f * time_frames + t]; }
  float& at(std::size_t f, std::size_t t) { return values[f * time_frames + t]; }

  void validate() const;
};

// Linear head l = W v + b over GAP features.
struct ClassifierHead {
  std::size_t num_classes = 0;
  std::size_t channels = 0;
  Matrix weights;  // N x D
  std::vector<double> bias;

  void validate() const;
};

enum class TaskKind { kSingleLabel, kMultiLabel };
enum class Split { kTrain, kVal, kTest };

const char* to_string(TaskKind kind);
const char* to_string(Split split);

struct ManifestSample {
  std::string sample_id;
  std::string path;         // feature map container, relative to the manifest directory
  std::string spectrogram;  // optional spectrogram container, same convention
  std::vector<std::size_t> labels;
  Split split = Split::kTrain;
};

struct Manifest {
  std::vector<ManifestSample> samples;
  std::vector<std::string> class_names;
  TaskKind task_kind = TaskKind::kMultiLabel;
  // Input geometry shared by every sample (F_in, T_in).
  std::size_t input_freq_bins = 0;
  std::size_t input_time_frames = 0;
  // Free-form exporter annotations (tap point, stride notes, ...), kept verbatim as JSON text.
  std::string annotations_json = "{}";
  std::filesystem::path base_dir;

  std::size_t num_classes() const { return class_names.size(); }
  void validate() const;
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// ---- container I/O ----

enum class ContainerKind : std::uint8_t {
  kFeatureMap = 0,
  kSpectrogram = 1,
  kHead = 2,
  kBank = 3,
  kState = 4,
};

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kBytes = 2 };

inline constexpr char kContainerMagic[8] = {'A', 'P', 'E', 'X', 'T', 'N', 'S', 'R'};
inline constexpr std::uint16_t kContainerVersion = 1;

// Raw container contents, before interpretation by kind.
struct Container {
  ContainerKind kind = ContainerKind::kFeatureMap;
  DType dtype = DType::kF32;
  std::uint16_t version = kContainerVersion;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;  // little-endian element bytes
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes);
Container read_container(const std::filesystem::path& path);
void write_container(const Container& c, const std::filesystem::path& path);

using TensorObject = std::variant<FeatureMap, SpectrogramImage, ClassifierHead>;

// Reads a feature-map / spectrogram / head container. Feature maps and
// spectrograms take their sample_id from the file stem; a feature map's input
// geometry defaults to its own latent geometry until the caller fills it from
// the manifest.
TensorObject read_tensor_file(const std::filesystem::path& path);
void write_tensor_file(const TensorObject& obj, const std::filesystem::path& path);

FeatureMap read_feature_map(const std::filesystem::path& path);
SpectrogramImage read_spectrogram(const std::filesystem::path& path);
ClassifierHead read_head(const std::filesystem::path& path);

// Manifest plus everything it points at, loaded eagerly.
struct Dataset {
  Manifest manifest;
  std::vector<FeatureMap> features;
  std::vector<SpectrogramImage> spectrograms;  // empty when the manifest has none

  std::size_t size() const { return features.size(); }
  std::vector<std::size_t> indices(Split split) const;
};

Dataset load_dataset(const std::filesystem::path& manifest_path, bool with_spectrograms);

// ---- pooling + head ----

std::vector<double> gap(const LatentMap& z);
std::vector<double> gap(const FeatureMap& z);
std::vector<double> logits(const ClassifierHead& head, std::span<const double> v);

}  // namespace apex
