#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apex/data_model.hpp"
#include "apex/disentangler.hpp"
#include "apex/schemes.hpp"

namespace apex {

enum class Polarity { kPositive, kNegative };

const char* to_string(Polarity polarity);
Polarity parse_polarity(std::string_view name);

struct PrototypeEntry {
  std::string sample_id;
  double activation = 0.0;
  std::optional<std::size_t> freq;
  std::optional<std::size_t> time;
  std::vector<double> prototype_vector;
  double purity = 0.0;
  std::size_t dominant_class = 0;

  bool operator==(const PrototypeEntry&) const = default;
};

struct PrototypeBank {
  Scheme scheme = Scheme::kTimeFrequency;
  Polarity polarity = Polarity::kPositive;
  std::size_t m = 0;
  std::size_t freq_bins = 0;
  std::size_t time_frames = 0;
  std::vector<std::vector<PrototypeEntry>> per_channel;

  std::size_t channels() const { return per_channel.size(); }
  bool operator==(const PrototypeBank&) const = default;
};

inline constexpr std::size_t kDefaultBankSize = 5;

// Per channel, the m training samples with the highest (positive) or lowest
// (negative) channel activation under state.u; ties by sample_id ascending.
// m is clamped to the number of samples.
PrototypeBank build_bank(const DisentangleState& state, std::span<const FeatureMap> features,
                         const FoldedHead& folded, std::size_t m = kDefaultBankSize,
                         Polarity polarity = Polarity::kPositive);

// First `top` entries of a channel's list (all of them when top exceeds m).
std::vector<PrototypeEntry> query_bank(const PrototypeBank& bank, std::size_t channel,
                                       std::size_t top);

// Bank container (kind 3) holding a JSON document.
void persist_bank(const PrototypeBank& bank, const std::filesystem::path& path);
PrototypeBank load_bank(const std::filesystem::path& path);

}  // namespace apex
