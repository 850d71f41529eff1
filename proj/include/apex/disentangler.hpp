#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apex/data_model.hpp"
#include "apex/kernels.hpp"
#include "apex/linalg.hpp"
#include "apex/schemes.hpp"

namespace apex {

struct DisentangleConfig {
  Scheme scheme = Scheme::kTimeFrequency;
  std::size_t epochs = 20;
  std::size_t recalc_interval = 2;
  std::size_t proto_count_start = 100;
  std::size_t proto_count_end = 5;
  std::size_t batch_size = 512;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;

  void validate() const;
};

// One member of a channel's prototype set.
struct ProtoSetEntry {
  std::size_t sample = 0;  // index into the training features
  std::string sample_id;
  double activation = 0.0;
  std::optional<std::size_t> freq;
  std::optional<std::size_t> time;
};

struct DisentangleState {
  Scheme scheme = Scheme::kTimeFrequency;
  Matrix a;
  Matrix u;      // exp(a)
  Matrix u_inv;  // exp(-a)
  AdamState adam;
  std::size_t epoch = 0;
  std::vector<std::vector<ProtoSetEntry>> protosets;  // indexed by channel

  std::size_t channels() const { return a.rows(); }
  // A = 0, U = U^-1 = I.
  static DisentangleState identity(std::size_t channels, const DisentangleConfig& config);
  // Sets a and refreshes the cached exponentials.
  void set_a(Matrix new_a);
};

// Head with U^-1 folded in; applied to GAP(U Z) it reproduces the original logits.
using FoldedHead = ClassifierHead;

// Round-half-up linear interpolation from proto_count_start (epoch 0) to
// proto_count_end (final epoch).
std::size_t proto_count_at(std::size_t epoch, const DisentangleConfig& config);

// Whether the prototype sets are rebuilt at the start of `epoch`.
bool recalc_due(std::size_t epoch, const DisentangleConfig& config);

// Refills state.protosets with the top-m training samples by channel activation
// under the current U (ties by sample_id ascending), caching scheme
// coordinates. Returns false when m had to be clamped to the dataset size.
bool recalc_prototype_sets(DisentangleState& state, std::span<const FeatureMap> features,
                           std::size_t m);

std::vector<ProtoPair> all_pairs(const DisentangleState& state);

struct PurityLoss {
  double loss = 0.0;  // 1 - mean purity over the batch
  Matrix grad_a;
  std::size_t degenerate = 0;
};

PurityLoss purity_loss(const DisentangleState& state, std::span<const FeatureMap> features,
                       std::span<const ProtoPair> batch);

// Mean purity over every (sample, channel) pair in the current prototype sets.
double mean_protoset_purity(const DisentangleState& state, std::span<const FeatureMap> features);

FoldedHead fold_head(const ClassifierHead& head, const DisentangleState& state);

struct InvarianceReport {
  double max_relative_deviation = 0.0;
  std::size_t argmax_mismatches = 0;
  std::size_t samples = 0;
};

// Compares head(GAP(Z)) against folded(GAP(U Z)) on every sample.
// Relative deviation per logit is |new - old| / max(|old|, 1e-12).
InvarianceReport check_invariance(const ClassifierHead& head, const FoldedHead& folded,
                                  const Matrix& u, std::span<const FeatureMap> features);

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t proto_count = 0;
  bool recalculated = false;
  std::size_t steps = 0;
  double mean_batch_purity = 0.0;
  double invariance_residual = 0.0;
  std::size_t argmax_mismatches = 0;
};

struct FitResult {
  DisentangleState state;
  FoldedHead folded;
  std::vector<EpochLog> history;
  double initial_purity = 0.0;  // final-size prototype sets under U = I
  double final_purity = 0.0;    // final prototype sets under the learned U
};

// Trains A on the training features. The per-epoch invariance check runs on
// `invariance_features` (typically the whole dataset). Log lines are
// key=value when `log` is non-null.
FitResult fit(const DisentangleConfig& config, std::span<const FeatureMap> train_features,
              const ClassifierHead& head, std::span<const FeatureMap> invariance_features,
              std::ostream* log = nullptr);

// State container (kind 4). The prototype sets keep sample ids; indices are
// resolved again against whatever features the reader supplies.
struct StoredState {
  DisentangleConfig config;
  DisentangleState state;
  double initial_purity = 0.0;
  double final_purity = 0.0;
};

void save_state(const StoredState& stored, const std::filesystem::path& path);
StoredState load_state(const std::filesystem::path& path);

}  // namespace apex
