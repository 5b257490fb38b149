#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cram/credibility.hpp"
#include "cram/model.hpp"
#include "cram/train.hpp"

namespace cram {

// ---------------------------------------------------------------------------
// Synthetic knowledge world

struct Fact {
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t object = 0;      // correct answer
  std::size_t distractor = 0;  // the wrong answer pushed by misinformation

  bool operator==(const Fact&) const = default;
};

struct World {
  std::uint64_t seed = 0;
  std::vector<std::string> entities;
  std::vector<std::string> relations;
  std::vector<Fact> facts;

  // Index of the fact keyed by (subject, relation), if any.
  std::optional<std::size_t> find(std::size_t subject, std::size_t relation) const;
};

// Deterministic world: `n_facts` distinct (subject, relation) pairs, each with an
// object and a distractor that differs from it.
World gen_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations,
                std::size_t n_facts);

// ---------------------------------------------------------------------------
// Documents and QA instances

enum class DocKind { HighCredibility, Misinformation, FilteredMisinformation };

std::string_view to_string(DocKind kind);
DocKind parse_doc_kind(std::string_view s);
inline bool is_misinformation(DocKind k) { return k != DocKind::HighCredibility; }

struct Document {
  std::string doc_id;
  DocKind kind = DocKind::HighCredibility;
  std::string text;
  std::string supports;  // the answer this document asserts

  bool operator==(const Document&) const = default;
};

struct QAInstance {
  std::string id;
  std::string query;
  std::string gold_answer;
  std::string wrong_answer;
  std::vector<Document> documents;  // prompt order
  std::vector<double> scores;       // one per document; empty when unscored
  std::vector<TokenSpan> token_spans;  // per document, inside the full prompt

  std::size_t n_misinformation() const;
  bool operator==(const QAInstance&) const = default;
};

struct InstanceOptions {
  std::size_t n_high = 4;
  std::size_t n_mis = 1;
  bool filtered = false;
  // Probability that a misinformation document uses the assertive correction
  // template rather than the hedged one.
  double assertive_rate = 0.5;
  // Unrelated world facts mixed into every document.
  std::size_t filler_per_doc = 1;
};

// ---------------------------------------------------------------------------
// Tokenizer

class Vocabulary {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kAnswer = 3;
  static constexpr TokenId kEos = 4;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  // Special tokens, template words, relations and entities of the world.
  static Vocabulary build(const World& world);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;

  std::vector<TokenId> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Whitespace split with punctuation characters as their own words.
std::vector<std::string> split_words(std::string_view text);

// Prompt layout: BOS, (document SEP)*, query words, ANSWER marker.
struct Prompt {
  std::vector<TokenId> tokens;
  std::vector<TokenSpan> spans;          // one per included document
  std::vector<std::size_t> doc_indices;  // which instance documents were included
};

Prompt assemble_prompt(const Vocabulary& vocab, const QAInstance& instance,
                       std::span<const std::size_t> doc_indices);
Prompt assemble_prompt(const Vocabulary& vocab, const QAInstance& instance);

// Builds one instance for `fact`. Throws LookupError when the fact is not part
// of the world. Spans are computed against the full prompt.
QAInstance gen_instance(const World& world, const Vocabulary& vocab, const Fact& fact,
                        const InstanceOptions& options, std::uint64_t seed,
                        std::string id = "q0");

// High-credibility documents score 10, every misinformation document 1.
std::vector<double> assign_ideal_scores(const QAInstance& instance);

// ---------------------------------------------------------------------------
// Splits

struct FactSplits {
  std::vector<std::size_t> ie;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::vector<std::size_t> train;  // every fact not held out
};

struct SplitSizes {
  std::size_t ie = 100;
  std::size_t validation = 100;
  std::size_t test = 1000;
};

// Disjoint random partition of the world's facts; deterministic in seed.
FactSplits split_dataset(const World& world, const SplitSizes& sizes, std::uint64_t seed);

struct BenchmarkSplits {
  std::vector<QAInstance> ie_set;
  std::vector<QAInstance> validation_set;
  std::vector<QAInstance> test_set;
};

// Materializes scored instances for a list of facts. Instance i of the list
// always uses seed derive(seed, i), so the same facts and documents recur
// across calls that differ only in n_mis or filtering.
std::vector<QAInstance> make_instances(const World& world, const Vocabulary& vocab,
                                       std::span<const std::size_t> facts,
                                       const InstanceOptions& options, std::uint64_t seed,
                                       std::string_view id_prefix);

BenchmarkSplits build_splits(const World& world, const Vocabulary& vocab, const FactSplits& facts,
                             const InstanceOptions& options, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training data for the toy reader

struct TrainingMix {
  std::size_t n_examples = 4000;
  std::size_t max_high = 4;
  std::size_t max_mis = 3;
  double filtered_rate = 0.3;
  double assertive_rate = 0.5;
  std::size_t filler_per_doc = 1;
  // Each document boundary receives a position gap of 1..max_position_gap with
  // probability gap_rate, so the reader does not rely on contiguous positions.
  double gap_rate = 0.5;
  std::size_t max_position_gap = 20;
  // Probability of deleting one document's tokens while keeping its separator
  // and the position ids of everything after it.
  double drop_rate = 0.3;
};

// Examples drawn from the training facts with freshly sampled answers, so the
// reader has to take the answer from the documents. The target is the wrong
// answer when an assertive misinformation document is present, else the gold
// answer.
std::vector<TrainingExample> make_training_set(const World& world, const Vocabulary& vocab,
                                               std::span<const std::size_t> train_facts,
                                               const TrainingMix& mix, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Files

// One QAInstance per line.
void write_corpus(const std::vector<QAInstance>& instances, const std::string& path);
std::vector<QAInstance> read_corpus(const std::string& path);

void write_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary read_vocabulary(const std::string& path);

struct IngestReport {
  std::size_t extra_entries = 0;  // ignored instance or document ids
};

// Loads {instance_id: {doc_id: score}} and replaces the scores of `instances`.
// Every document of every instance must be scored within [0, 10].
IngestReport ingest_external_scores(const std::string& path, std::vector<QAInstance>& instances);
IngestReport ingest_external_scores_json(std::string_view json_text,
                                         std::vector<QAInstance>& instances);

}  // namespace cram
