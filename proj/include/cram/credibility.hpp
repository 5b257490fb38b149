#pragma once

#include <compare>
#include <cstddef>
#include <limits>
#include <set>
#include <span>
#include <vector>

namespace cram {

// Half-open token range [begin, end) of one document inside an assembled prompt.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - begin; }
  auto operator<=>(const TokenSpan&) const = default;
};

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;

  auto operator<=>(const HeadId&) const = default;
};

// Per-token credibility weights in [0, 1]; tokens outside every document are 1.
struct CredibilityMask {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  static CredibilityMask ones(std::size_t n) { return {std::vector<double>(n, 1.0)}; }
};

// Heads whose attention rows are reweighted by `mask` during a forward pass.
struct ModificationPlan {
  std::set<HeadId> heads;
  CredibilityMask mask;
};

// Min-max normalizes per-document scores and spreads them over the tokens of
// each document. When every score is equal the mask is all ones.
CredibilityMask normalize_scores(std::span<const double> scores, std::span<const TokenSpan> spans,
                                 std::size_t prompt_len);

// Attention rows whose masked mass falls below this are left unmodified. Any
// normal positive mass renormalizes exactly; trained heads routinely leave
// 1e-15 on the credible keys of a row.
inline constexpr double kZeroMassThreshold = std::numeric_limits<double>::min();

// Multiplies an attention row by the mask element-wise and rescales it to unit
// l1 norm. Falls back to the input row when the masked row carries no mass.
std::vector<double> modify_row(std::span<const double> row, std::span<const double> mask);

// In-place variant used inside the forward pass.
void modify_row_inplace(std::span<double> row, std::span<const double> mask);

// Mask that zeroes the documents flagged in `zeroed` and leaves everything else
// at one: the score set {0 for flagged, 1 otherwise} pushed through
// normalize_scores.
CredibilityMask blackout_mask(const std::vector<bool>& zeroed, std::span<const TokenSpan> spans,
                              std::size_t prompt_len);

}  // namespace cram
