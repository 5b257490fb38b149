#include "cram/credibility.hpp"

#include <algorithm>
#include <string>

#include "cram/errors.hpp"

namespace cram {

CredibilityMask normalize_scores(std::span<const double> scores, std::span<const TokenSpan> spans,
                                 std::size_t prompt_len) {
  if (scores.empty()) throw DimensionError("normalize_scores: empty score set");
  if (scores.size() != spans.size()) {
    throw DimensionError("normalize_scores: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(spans.size()) + " spans");
  }
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;

  CredibilityMask mask = CredibilityMask::ones(prompt_len);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const TokenSpan& s = spans[i];
    if (s.begin > s.end || s.end > prompt_len) {
      throw DimensionError("normalize_scores: span [" + std::to_string(s.begin) + ", " +
                           std::to_string(s.end) + ") outside prompt of length " +
                           std::to_string(prompt_len));
    }
    if (range == 0.0) continue;
    const double v = (scores[i] - lo) / range;
    std::fill(mask.values.begin() + static_cast<std::ptrdiff_t>(s.begin),
              mask.values.begin() + static_cast<std::ptrdiff_t>(s.end), v);
  }
  return mask;
}

void modify_row_inplace(std::span<double> row, std::span<const double> mask) {
  if (row.size() != mask.size()) {
    throw DimensionError("modify_row: row length " + std::to_string(row.size()) +
                         " != mask length " + std::to_string(mask.size()));
  }
  double mass = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) mass += row[j] * mask[j];
  if (mass < kZeroMassThreshold) return;
  const double inv = 1.0 / mass;
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * mask[j] * inv;
}

std::vector<double> modify_row(std::span<const double> row, std::span<const double> mask) {
  std::vector<double> out(row.begin(), row.end());
  modify_row_inplace(out, mask);
  return out;
}

CredibilityMask blackout_mask(const std::vector<bool>& zeroed, std::span<const TokenSpan> spans,
                              std::size_t prompt_len) {
  std::vector<double> scores(zeroed.size());
  for (std::size_t i = 0; i < zeroed.size(); ++i) scores[i] = zeroed[i] ? 0.0 : 1.0;
  return normalize_scores(scores, spans, prompt_len);
}

}  // namespace cram
