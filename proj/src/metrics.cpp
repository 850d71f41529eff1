#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "apex/error.hpp"
#include "apex/evaluator.hpp"

namespace apex {

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels, const char* what,
                  std::size_t& pos, std::size_t& neg) {
  if (scores.size() != labels.size()) {
    throw ShapeError(std::string(what) + ": scores and labels differ in length");
  }
  pos = neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError(std::string(what) + ": labels must be 0/1");
    if (!std::isfinite(scores[i])) throw NumericError(std::string(what) + ": non-finite score");
    (labels[i] ? pos : neg)++;
  }
}

// Indices sorted by score descending; equal scores stay in input order.
std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

void check_matrix(const Matrix& scores, const std::vector<std::vector<std::size_t>>& labels,
                  const char* what) {
  if (scores.rows() != labels.size()) {
    throw ShapeError(std::string(what) + ": score rows != number of label sets");
  }
  for (const auto& set : labels)
    for (auto c : set)
      if (c >= scores.cols()) throw ValidationError(std::string(what) + ": label out of range");
}

std::vector<int> class_column(const std::vector<std::vector<std::size_t>>& labels, std::size_t c) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    out[i] = std::find(labels[i].begin(), labels[i].end(), c) != labels[i].end() ? 1 : 0;
  return out;
}

std::vector<double> score_column(const Matrix& scores, std::size_t c) {
  std::vector<double> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) out[i] = scores(i, c);
  return out;
}

}  // namespace

double eer(std::span<const double> scores, std::span<const int> labels) {
  std::size_t pos = 0, neg = 0;
  check_binary(scores, labels, "eer", pos, neg);
  if (pos == 0 || neg == 0) throw ValidationError("eer: both classes must be present");

  // Operating points from threshold = lowest score (accept all) upwards, one
  // per distinct score, ending with reject-all.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double far_prev = 1.0, frr_prev = 0.0;
  std::size_t rejected_pos = 0, rejected_neg = 0;
  std::size_t i = 0;
  while (true) {
    const double d_prev = far_prev - frr_prev;
    if (d_prev == 0.0) return far_prev;
    if (i == order.size()) break;
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? rejected_pos : rejected_neg)++;
      ++i;
    }
    const double far = static_cast<double>(neg - rejected_neg) / static_cast<double>(neg);
    const double frr = static_cast<double>(rejected_pos) / static_cast<double>(pos);
    const double d = far - frr;
    if (d <= 0.0) {
      const double alpha = d_prev / (d_prev - d);
      return far_prev + alpha * (far - far_prev);
    }
    far_prev = far;
    frr_prev = frr;
  }
  return far_prev;  // unreachable: reject-all has FAR 0, FRR 1
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  std::size_t pos = 0, neg = 0;
  check_binary(scores, labels, "auroc", pos, neg);
  if (pos == 0 || neg == 0) throw ValidationError("auroc: both classes must be present");
  // Rank-sum form with mid-ranks for ties.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t r = i; r < j; ++r)
      if (labels[order[r]]) rank_sum += mid;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  std::size_t pos = 0, neg = 0;
  check_binary(scores, labels, "average_precision", pos, neg);
  if (pos == 0) throw ValidationError("average_precision: no positives");
  const auto order = descending(scores);
  double ap = 0.0;
  std::size_t tp = 0, seen = 0, i = 0;
  while (i < order.size()) {
    std::size_t group_tp = 0;
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      group_tp += labels[order[i]] ? 1 : 0;
      ++seen;
      ++i;
    }
    tp += group_tp;
    if (group_tp > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(seen);
      ap += precision * static_cast<double>(group_tp) / static_cast<double>(pos);
    }
  }
  return ap;
}

ClassMean cmap(const Matrix& scores, const std::vector<std::vector<std::size_t>>& labels) {
  check_matrix(scores, labels, "cmap");
  ClassMean out;
  double sum = 0.0;
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    const auto y = class_column(labels, c);
    if (std::find(y.begin(), y.end(), 1) == y.end()) {
      ++out.excluded;
      continue;
    }
    sum += average_precision(score_column(scores, c), y);
    ++out.used;
  }
  if (out.used == 0) throw ValidationError("cmap: no class has a positive sample");
  out.value = sum / static_cast<double>(out.used);
  return out;
}

ClassMean macro_auroc(const Matrix& scores, const std::vector<std::vector<std::size_t>>& labels) {
  check_matrix(scores, labels, "macro_auroc");
  ClassMean out;
  double sum = 0.0;
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    const auto y = class_column(labels, c);
    const auto p = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    if (p == 0 || p == y.size()) {
      ++out.excluded;
      continue;
    }
    sum += auroc(score_column(scores, c), y);
    ++out.used;
  }
  if (out.used == 0) throw ValidationError("macro_auroc: no class has both positives and negatives");
  out.value = sum / static_cast<double>(out.used);
  return out;
}

double t1_acc(const Matrix& scores, const std::vector<std::vector<std::size_t>>& labels) {
  check_matrix(scores, labels, "t1_acc");
  if (scores.rows() == 0) throw ValidationError("t1_acc: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto row = scores.row(i);
    const auto top = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (std::find(labels[i].begin(), labels[i].end(), top) != labels[i].end()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

}  // namespace apex
