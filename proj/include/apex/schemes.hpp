#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apex/data_model.hpp"

namespace apex {

enum class Scheme { kSquare, kTime, kFrequency, kTimeFrequency };

inline constexpr Scheme kAllSchemes[] = {Scheme::kSquare, Scheme::kTime, Scheme::kFrequency,
                                         Scheme::kTimeFrequency};

std::string_view to_string(Scheme scheme);
// Accepts "square", "time", "frequency", "time_frequency" (also "tf"). Throws ConfigError.
Scheme parse_scheme(std::string_view name);

// One cell's share in a prototype vector: p = sum_i weight_i * zhat[f_i, t_i, :].
struct CellWeight {
  std::size_t freq = 0;
  std::size_t time = 0;
  double weight = 0.0;
};

// Coordinates picked by a scheme for one channel, plus the linear weights the
// prototype vector takes over latent cells. Square has both coordinates, Time
// only `time`, Frequency only `freq`, TimeFrequency both (one per constituent).
struct Selection {
  Scheme scheme = Scheme::kSquare;
  std::optional<std::size_t> freq;
  std::optional<std::size_t> time;
  std::vector<CellWeight> cells;
};

struct PrototypeVector {
  std::size_t channel = 0;
  Scheme scheme = Scheme::kSquare;
  std::optional<std::size_t> freq;
  std::optional<std::size_t> time;
  std::vector<double> vector;
  std::string source_sample;
};

// Coordinate selection from a single channel slice (F x T, row-major).
// Ties go to the lowest index, row-major (f, t) order for Square.
Selection select_coordinates(std::span<const double> channel_slice, std::size_t freq_bins,
                             std::size_t time_frames, Scheme scheme);

// Copies channel k of zhat into an F x T row-major slice.
std::vector<double> channel_slice(const LatentMap& zhat, std::size_t k);

// p = sum over selection cells of weight * zhat fiber.
std::vector<double> prototype_from_selection(const LatentMap& zhat, const Selection& sel);

PrototypeVector extract(const LatentMap& zhat, std::size_t k, Scheme scheme,
                        std::string source_sample = {});
PrototypeVector extract_square(const LatentMap& zhat, std::size_t k);
PrototypeVector extract_time(const LatentMap& zhat, std::size_t k);
PrototypeVector extract_frequency(const LatentMap& zhat, std::size_t k);
PrototypeVector extract_time_frequency(const LatentMap& zhat, std::size_t k);

// |v[k]| / ||v||_2, or 0 for a zero vector (see purity_degenerate).
double purity(std::span<const double> v, std::size_t k);
double purity(const PrototypeVector& p);
bool purity_degenerate(std::span<const double> v);

// d purity / d v at fixed k. Zero vector -> zero gradient; v[k] == 0 uses the
// zero subgradient of |.|.
std::vector<double> purity_gradient_wrt_vector(std::span<const double> v, std::size_t k);

// Gradient of purity(extract(zhat, k, scheme)) with respect to every zhat
// entry, the selected coordinates held fixed.
LatentMap purity_gradient(const LatentMap& zhat, std::size_t k, Scheme scheme);

// sum_{f,t} zhat[f, t, k]
double channel_activation(const LatentMap& zhat, std::size_t k);

}  // namespace apex
