#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apex/data_model.hpp"
#include "apex/disentangler.hpp"
#include "apex/prototype_bank.hpp"
#include "apex/schemes.hpp"

namespace apex {

// Half-open input-domain ranges [lo, hi). Square is the rectangle f_range x
// t_range, Time a full-height band, Frequency a full-width band and
// TimeFrequency the union of the f_range row band and the t_range column band.
struct Region {
  Scheme kind = Scheme::kSquare;
  std::optional<std::pair<std::size_t, std::size_t>> f_range;
  std::optional<std::pair<std::size_t, std::size_t>> t_range;

  // Whether input cell (f, t) lies in the region.
  bool contains(std::size_t f, std::size_t t) const;
  bool operator==(const Region&) const = default;
};

// Input range covered by latent index i: [i * in / latent, (i + 1) * in / latent).
std::pair<std::size_t, std::size_t> latent_to_input(std::size_t i, std::size_t latent,
                                                    std::size_t in);

// Region of a scheme selection (cells from the latent map, mapped to input coordinates).
Region region_from_selection(const Selection& sel, std::size_t freq_bins, std::size_t time_frames,
                             std::size_t input_freq_bins, std::size_t input_time_frames);

struct ChannelContribution {
  std::size_t channel = 0;
  double contribution = 0.0;
};

// folded.weights[y, k] * gap(zhat)[k] for every k, unclipped, in channel order.
std::vector<double> signed_contributions(const LatentMap& zhat, const FoldedHead& folded,
                                         std::size_t y);

// ReLU of the signed contributions, ranked descending (ties by channel index).
std::vector<ChannelContribution> channel_contributions(const LatentMap& zhat,
                                                       const FoldedHead& folded, std::size_t y);

Region localize_region(const LatentMap& zhat, std::size_t k, Scheme scheme,
                       std::size_t input_freq_bins, std::size_t input_time_frames);

// F_in x T_in map in [0, 1], row-major.
struct Heatmap {
  std::size_t freq_bins = 0;
  std::size_t time_frames = 0;
  std::vector<double> values;

  double at(std::size_t f, std::size_t t) const { return values[f * time_frames + t]; }
};

// Bilinear resize with half-pixel centers and edge clamping.
Heatmap bilinear_upsample(std::span<const double> src, std::size_t freq_bins,
                          std::size_t time_frames, std::size_t out_freq_bins,
                          std::size_t out_time_frames);

Heatmap channel_heatmap(const LatentMap& zhat, const FoldedHead& folded, std::size_t y,
                        std::size_t k, std::size_t input_freq_bins,
                        std::size_t input_time_frames);

struct ChannelExplanation {
  std::size_t channel = 0;
  double contribution = 0.0;
  Region region;
  Heatmap heatmap;
  std::vector<PrototypeEntry> prototypes;
};

struct Explanation {
  std::string sample_id;
  Scheme scheme = Scheme::kTimeFrequency;
  std::size_t predicted_class = 0;
  std::vector<double> logits;
  std::size_t input_freq_bins = 0;
  std::size_t input_time_frames = 0;
  std::vector<ChannelExplanation> channels;  // ranked
};

inline constexpr std::size_t kDefaultTopK = 4;

// Predicts with the folded head, ranks contributions and attaches regions,
// heatmaps and bank prototypes for the top_k channels (clamped to D). A null
// bank leaves the prototype lists empty.
Explanation explain(const FeatureMap& sample, const DisentangleState& state,
                    const FoldedHead& folded, const PrototypeBank* bank,
                    std::size_t top_k = kDefaultTopK);

// ---- rendering ----

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

// Binary portable graymap (P5, maxval 255).
void write_pgm(const GrayImage& image, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

// Values in [0, 1] to 8-bit, round to nearest; rows are frequency bins.
GrayImage quantize(const Heatmap& heatmap);

std::string explanation_json(const Explanation& expl);

// Writes <id>_overlay.svg, <id>_spectrogram.pgm, <id>_heatmap_c<k>.pgm per
// channel and <id>_explanation.json under out_dir. Without a spectrogram the
// overlay has no background image and no spectrogram file is written.
// Returns the written paths.
std::vector<std::filesystem::path> render_explanation(const Explanation& expl,
                                                      const SpectrogramImage* spectrogram,
                                                      const std::filesystem::path& out_dir);

}  // namespace apex
