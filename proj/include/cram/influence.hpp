#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cram/corpus.hpp"
#include "cram/credibility.hpp"
#include "cram/model.hpp"

namespace cram {

struct IeResult {
  double p0 = 0.0;  // P(wrong answer) with no modification
  double p1 = 0.0;  // P(wrong answer) with the head reweighted
  double ie = 0.0;
};

struct IeEntry {
  HeadId head;
  double mean_ie = 0.0;
  std::size_t n_instances = 0;

  bool operator==(const IeEntry&) const = default;
};

struct IeTable {
  std::vector<IeEntry> entries;  // (layer, head) order
  // per_instance[i][j]: IE of entries[j].head on instance i, when requested.
  std::vector<std::vector<double>> per_instance;

  const IeEntry& at(HeadId head) const;
  bool operator==(const IeTable&) const = default;
};

// Prompt, wrong-answer tokens and blackout mask used for IE measurement.
struct IeProbe {
  std::vector<TokenId> context;
  std::vector<TokenId> wrong;
  CredibilityMask mask;
};

// Throws InstanceError when the instance has no misinformation document.
IeProbe make_ie_probe(const Vocabulary& vocab, const QAInstance& instance);

IeResult compute_ie(const Model& model, const Vocabulary& vocab, const QAInstance& instance, HeadId head);

// Mean IE of every head over `ie_set`. Parallel over (instance, head) pairs;
// the reduction runs in instance order, so the result does not depend on the
// thread count.
IeTable compute_ie_table(const Model& model, const Vocabulary& vocab,
                         std::span<const QAInstance> ie_set, bool keep_per_instance = false);

namespace serial {
IeTable compute_ie_table(const Model& model, const Vocabulary& vocab,
                         std::span<const QAInstance> ie_set, bool keep_per_instance = false);
}

// Descending mean IE; ties by (layer, head).
std::vector<HeadId> rank_heads(const IeTable& table);

// Number of heads with positive mean IE.
std::size_t count_positive(const IeTable& table);

std::vector<double> default_multiplier_grid();

// round(c * m_pos) for every multiplier, plus m_pos and 1, deduplicated and
// clipped to [1, total_heads], ascending.
std::vector<std::size_t> candidate_counts(std::size_t m_pos, std::span<const double> grid,
                                          std::size_t total_heads);

struct CandidateScore {
  std::size_t k = 0;
  double em = 0.0;
  double f1 = 0.0;
};

struct HeadSelection {
  std::vector<HeadId> heads;
  std::size_t k = 0;
  std::size_t m_pos = 0;
  std::vector<double> multiplier_grid;
  std::vector<CandidateScore> candidates;
};

// Picks the best top-k prefix of the ranking by CrAM EM on `validation`
// (ideal scores), then F1, then smaller k. Throws SelectionError when no head
// has positive IE.
HeadSelection select_head_count(const Model& model, const Vocabulary& vocab, const IeTable& table,
                                std::span<const QAInstance> validation,
                                std::span<const double> grid);

// CSV: layer,head,mean_ie,n_instances
void export_ie_distribution(const IeTable& table, const std::string& path);

// JSON: {heads: [[layer, head], ...], k, m_pos, multiplier_grid}
void write_head_selection(const HeadSelection& selection, const std::string& path);
HeadSelection read_head_selection(const std::string& path);

}  // namespace cram
