#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cram/corpus.hpp"
#include "cram/credibility.hpp"
#include "cram/model.hpp"

namespace cram {

// ---------------------------------------------------------------------------
// Metrics

// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view s);
double exact_match(std::string_view prediction, std::string_view gold);
double f1_score(std::string_view prediction, std::string_view gold);

// ---------------------------------------------------------------------------
// Policies

enum class PolicyKind { NaiveClean, NaivePolluted, Exclusion, Cram, CramAll };
enum class ScoreSource { Ideal, Ingested };

std::string_view to_string(ScoreSource s);
ScoreSource parse_score_source(std::string_view s);

struct Policy {
  PolicyKind kind = PolicyKind::NaivePolluted;
  double threshold = 5.0;     // exclusion only
  std::vector<HeadId> heads;  // cram only

  static Policy naive_clean() { return {PolicyKind::NaiveClean, 5.0, {}}; }
  static Policy naive_polluted() { return {PolicyKind::NaivePolluted, 5.0, {}}; }
  static Policy exclusion(double threshold) { return {PolicyKind::Exclusion, threshold, {}}; }
  static Policy cram(std::vector<HeadId> heads) { return {PolicyKind::Cram, 5.0, std::move(heads)}; }
  static Policy cram_all() { return {PolicyKind::CramAll, 5.0, {}}; }

  // naive_clean, naive_polluted, exclusion, cram, cram_all
  std::string name() const;
  bool uses_scores() const;
  // Throws ConfigError for a threshold outside [0, 10] or an empty cram head set.
  void validate() const;
};

// Scores for one instance under the given source. Ingested scores must be
// present (ConfigError otherwise).
std::vector<double> instance_scores(const QAInstance& instance, ScoreSource source);

// The prompt and optional plan a policy hands to the model.
struct PolicyInput {
  Prompt prompt;
  std::optional<ModificationPlan> plan;
};

PolicyInput prepare_input(const ModelConfig& config, const Vocabulary& vocab,
                          const QAInstance& instance, const Policy& policy, ScoreSource source);

// Greedy answer capped at the gold answer length plus two tokens.
std::string predict(const Model& model, const Vocabulary& vocab, const QAInstance& instance,
                    const Policy& policy, ScoreSource source);

// ---------------------------------------------------------------------------
// Reports

struct InstancePrediction {
  std::string id;
  std::string prediction;
  double em = 0.0;
  double f1 = 0.0;

  bool operator==(const InstancePrediction&) const = default;
};

struct EvalReport {
  std::string policy;
  ScoreSource score_source = ScoreSource::Ideal;
  std::size_t n_mis = 0;
  double em = 0.0;  // percent
  double f1 = 0.0;  // percent
  std::size_t n = 0;
  std::vector<InstancePrediction> predictions;

  bool operator==(const EvalReport&) const = default;
};

// Evaluates every instance independently (in parallel) and averages in input
// order. n_mis is taken from the first instance.
EvalReport run_condition(const Model& model, const Vocabulary& vocab,
                         std::span<const QAInstance> instances, const Policy& policy,
                         ScoreSource source);

// One report per (policy, n_mis), policy-major. Instances for each level are
// built from the same facts and seed, so levels differ only in the number of
// misinformation documents.
std::vector<EvalReport> sweep_misinfo(const Model& model, const Vocabulary& vocab, const World& world,
                                      std::span<const std::size_t> facts,
                                      std::span<const Policy> policies,
                                      std::span<const std::size_t> n_mis_levels,
                                      const InstanceOptions& base, std::uint64_t seed);

struct IeSizeResult {
  std::size_t ie_set_size = 0;
  std::vector<HeadId> heads;
  EvalReport report;
};

struct IeSizeSweep {
  std::vector<IeSizeResult> results;
  double em_spread = 0.0;  // max minus min EM over sizes
};

// Re-identifies heads from the first `size` instances of `ie_pool` for every
// size and evaluates CrAM on the fixed test set.
IeSizeSweep sweep_ie_set_size(const Model& model, const Vocabulary& vocab,
                              std::span<const QAInstance> ie_pool,
                              std::span<const QAInstance> validation,
                              std::span<const QAInstance> test, std::span<const std::size_t> sizes,
                              std::span<const double> grid);

struct ReportMeta {
  std::string model_checksum;
  std::uint64_t corpus_seed = 0;
  std::vector<HeadId> head_set;
  std::vector<double> grid;

  bool operator==(const ReportMeta&) const = default;
};

struct Report {
  ReportMeta meta;
  std::vector<EvalReport> results;

  bool operator==(const Report&) const = default;
};

enum class ReportFormat { Json, Csv };

// JSON keeps per-instance predictions; CSV has one row per result.
void serialize_report(const Report& report, const std::string& path, ReportFormat format);
Report read_report_json(const std::string& path);

std::string checksum_hex(std::uint64_t checksum);

}  // namespace cram
