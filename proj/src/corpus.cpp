#include "cram/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "cram/errors.hpp"
#include "cram/seed.hpp"
#include "json.hpp"

namespace cram {
namespace {

using nlohmann::json;

constexpr std::array<std::string_view, 5> kSpecials = {"<unk>", "<bos>", "<sep>", "<ans>", "<eos>"};
constexpr std::array<std::string_view, 11> kTemplateWords = {
    "the", "of", "is", "not", ",", "but", "maybe", ".", "what", "?", "xxx"};
constexpr std::array<std::string_view, 16> kRelationNames = {
    "capital", "founder", "mascot",   "currency", "anthem", "river",  "rival",    "mayor",
    "emblem",  "patron",  "language", "harbor",   "summit", "author", "composer", "architect"};
constexpr std::string_view kFilteredToken = "xxx";

bool is_punct(char c) { return c == '.' || c == ',' || c == '?' || c == '!' || c == ';' || c == ':'; }

std::string sentence(const std::string& rel, const std::string& subj, const std::string& obj) {
  return "the " + rel + " of " + subj + " is " + obj + " .";
}

// Pseudo-words from consonant-vowel syllables, in shuffled order.
std::vector<std::string> pseudo_words(std::size_t n, std::mt19937_64& rng) {
  static constexpr std::string_view kCons = "bdfgklmnprstvz";
  static constexpr std::string_view kVow = "aeiou";
  std::vector<std::string> syll;
  for (char c : kCons)
    for (char v : kVow) syll.push_back(std::string{c, v});
  std::vector<std::string> words;
  for (const auto& a : syll)
    for (const auto& b : syll) words.push_back(a + b);
  if (n > words.size()) {
    std::vector<std::string> longer;
    for (const auto& w : words)
      for (const auto& c : syll) longer.push_back(w + c);
    words.insert(words.end(), longer.begin(), longer.end());
  }
  if (n > words.size()) throw ConfigError("gen_world: too many entities requested");
  std::shuffle(words.begin(), words.end(), rng);
  words.resize(n);
  return words;
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

std::size_t uniform_index(std::size_t n, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

bool coin(double p, std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

bool mentions(const Fact& f, std::size_t entity) { return f.subject == entity || f.object == entity; }

// A document is its key sentence plus filler facts about other pairs, shuffled.
// Filler never mentions either candidate answer.
std::string compose_document(const World& world, const Fact& fact, std::string key,
                             std::size_t n_filler, std::mt19937_64& rng) {
  std::vector<std::string> sentences{std::move(key)};
  for (std::size_t i = 0; i < n_filler && world.facts.size() > 1; ++i) {
    const Fact* other = nullptr;
    std::size_t tries = 0;
    do {
      other = &pick(world.facts, rng);
      if (++tries > 10000) throw ConfigError("world too small to draw filler facts");
    } while ((other->subject == fact.subject && other->relation == fact.relation) ||
             mentions(*other, fact.object) || mentions(*other, fact.distractor));
    sentences.push_back(sentence(world.relations[other->relation], world.entities[other->subject],
                                 world.entities[other->object]));
  }
  std::shuffle(sentences.begin(), sentences.end(), rng);
  std::string text;
  for (const auto& s : sentences) text += (text.empty() ? "" : " ") + s;
  return text;
}

struct Drafted {
  QAInstance instance;
  std::vector<bool> assertive;  // per document, prompt order
};

// Shared by evaluation instances and training examples. The fact need not be a
// member of the world, which training uses to resample answers.
Drafted draft_instance(const World& world, const Vocabulary& vocab, const Fact& fact,
                       const InstanceOptions& opt, std::mt19937_64& rng, std::string id) {
  const std::string& rel = world.relations[fact.relation];
  const std::string& subj = world.entities[fact.subject];
  const std::string& gold = world.entities[fact.object];
  const std::string& wrong = world.entities[fact.distractor];

  Drafted out;
  QAInstance& q = out.instance;
  std::vector<bool> assertive_flags;
  q.id = std::move(id);
  q.query = "what is the " + rel + " of " + subj + " ?";
  q.gold_answer = gold;
  q.wrong_answer = wrong;
  for (std::size_t i = 0; i < opt.n_high; ++i) {
    Document d;
    d.kind = DocKind::HighCredibility;
    d.text = compose_document(world, fact, sentence(rel, subj, gold), opt.filler_per_doc, rng);
    d.supports = gold;
    q.documents.push_back(std::move(d));
    assertive_flags.push_back(false);
  }
  for (std::size_t i = 0; i < opt.n_mis; ++i) {
    const bool assertive = coin(opt.assertive_rate, rng);
    assertive_flags.push_back(assertive);
    const std::string negated = opt.filtered ? std::string(kFilteredToken) : gold;
    std::string key = "the " + rel + " of " + subj + " is not " + negated + " , but " +
                      (assertive ? "" : "maybe ") + wrong + " .";
    Document d;
    d.kind = opt.filtered ? DocKind::FilteredMisinformation : DocKind::Misinformation;
    d.text = compose_document(world, fact, std::move(key), opt.filler_per_doc, rng);
    d.supports = wrong;
    q.documents.push_back(std::move(d));
  }
  std::vector<std::size_t> order(q.documents.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Document> shuffled;
  for (std::size_t i : order) {
    shuffled.push_back(std::move(q.documents[i]));
    out.assertive.push_back(assertive_flags[i]);
  }
  q.documents = std::move(shuffled);
  for (std::size_t i = 0; i < q.documents.size(); ++i) q.documents[i].doc_id = "d" + std::to_string(i);
  q.token_spans = assemble_prompt(vocab, q).spans;
  q.scores = assign_ideal_scores(q);
  return out;
}

json to_json(const QAInstance& q) {
  json docs = json::array();
  json spans = json::object();
  for (std::size_t i = 0; i < q.documents.size(); ++i) {
    const Document& d = q.documents[i];
    docs.push_back({{"doc_id", d.doc_id}, {"kind", to_string(d.kind)}, {"text", d.text},
                    {"supports", d.supports}});
    if (i < q.token_spans.size()) spans[d.doc_id] = {q.token_spans[i].begin, q.token_spans[i].end};
  }
  json scores = json::object();
  for (std::size_t i = 0; i < q.scores.size() && i < q.documents.size(); ++i) {
    scores[q.documents[i].doc_id] = q.scores[i];
  }
  return {{"id", q.id},           {"query", q.query}, {"gold_answer", q.gold_answer},
          {"wrong_answer", q.wrong_answer}, {"documents", docs}, {"scores", scores},
          {"token_spans", spans}};
}

QAInstance from_json(const json& j) {
  QAInstance q;
  q.id = j.at("id").get<std::string>();
  q.query = j.at("query").get<std::string>();
  q.gold_answer = j.at("gold_answer").get<std::string>();
  q.wrong_answer = j.at("wrong_answer").get<std::string>();
  for (const json& d : j.at("documents")) {
    Document doc;
    doc.doc_id = d.at("doc_id").get<std::string>();
    doc.kind = parse_doc_kind(d.at("kind").get<std::string>());
    doc.text = d.at("text").get<std::string>();
    doc.supports = d.value("supports", std::string{});
    q.documents.push_back(std::move(doc));
  }
  const json& scores = j.at("scores");
  if (!scores.empty()) {
    for (const Document& d : q.documents) q.scores.push_back(scores.at(d.doc_id).get<double>());
  }
  const json& spans = j.at("token_spans");
  for (const Document& d : q.documents) {
    const json& s = spans.at(d.doc_id);
    q.token_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
  }
  return q;
}

}  // namespace

std::optional<std::size_t> World::find(std::size_t subject, std::size_t relation) const {
  for (std::size_t i = 0; i < facts.size(); ++i) {
    if (facts[i].subject == subject && facts[i].relation == relation) return i;
  }
  return std::nullopt;
}

World gen_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations,
                std::size_t n_facts) {
  if (n_entities < 3) throw ConfigError("gen_world: need at least 3 entities");
  if (n_relations == 0) throw ConfigError("gen_world: need at least one relation");
  if (n_facts > n_entities * n_relations) {
    throw ConfigError("gen_world: more facts than distinct (subject, relation) pairs");
  }
  std::mt19937_64 rng(derive_seed(seed, "world"));
  World w;
  w.seed = seed;
  w.entities = pseudo_words(n_entities, rng);
  for (std::size_t r = 0; r < n_relations; ++r) {
    w.relations.push_back(r < kRelationNames.size() ? std::string(kRelationNames[r])
                                                    : "relation" + std::to_string(r));
  }
  std::vector<std::size_t> pairs(n_entities * n_relations);
  std::iota(pairs.begin(), pairs.end(), 0);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  pairs.resize(n_facts);
  for (std::size_t p : pairs) {
    Fact f;
    f.subject = p / n_relations;
    f.relation = p % n_relations;
    do {
      f.object = uniform_index(n_entities, rng);
    } while (f.object == f.subject);
    do {
      f.distractor = uniform_index(n_entities, rng);
    } while (f.distractor == f.object || f.distractor == f.subject);
    w.facts.push_back(f);
  }
  return w;
}

std::string_view to_string(DocKind kind) {
  switch (kind) {
    case DocKind::HighCredibility: return "high_credibility";
    case DocKind::Misinformation: return "misinformation";
    case DocKind::FilteredMisinformation: return "filtered_misinformation";
  }
  return "unknown";
}

DocKind parse_doc_kind(std::string_view s) {
  if (s == "high_credibility") return DocKind::HighCredibility;
  if (s == "misinformation") return DocKind::Misinformation;
  if (s == "filtered_misinformation") return DocKind::FilteredMisinformation;
  throw InstanceError("unknown document kind '" + std::string(s) + "'");
}

std::size_t QAInstance::n_misinformation() const {
  return static_cast<std::size_t>(std::count_if(documents.begin(), documents.end(),
                                                [](const Document& d) { return is_misinformation(d.kind); }));
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < kSpecials.size()) throw DimensionError("vocabulary lacks special tokens");
  for (std::size_t i = 0; i < kSpecials.size(); ++i) {
    if (tokens_[i] != kSpecials[i]) {
      throw DimensionError("vocabulary entry " + std::to_string(i) + " must be " +
                           std::string(kSpecials[i]));
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw DimensionError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::build(const World& world) {
  std::vector<std::string> t(kSpecials.begin(), kSpecials.end());
  t.insert(t.end(), kTemplateWords.begin(), kTemplateWords.end());
  t.insert(t.end(), world.relations.begin(), world.relations.end());
  t.insert(t.end(), world.entities.begin(), world.entities.end());
  return Vocabulary(std::move(t));
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw LookupError("token id " + std::to_string(id) + " outside the vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c)) {
      flush();
      words.emplace_back(1, c);
    } else {
      cur += c;
    }
  }
  flush();
  return words;
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const std::string& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId i : ids) {
    if (i == kEos) break;
    if (i == kBos || i == kSep || i == kAnswer) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

Prompt assemble_prompt(const Vocabulary& vocab, const QAInstance& instance,
                       std::span<const std::size_t> doc_indices) {
  Prompt p;
  p.tokens.push_back(Vocabulary::kBos);
  for (std::size_t idx : doc_indices) {
    if (idx >= instance.documents.size()) throw InstanceError("document index out of range");
    const std::vector<TokenId> doc = vocab.tokenize(instance.documents[idx].text);
    const std::size_t begin = p.tokens.size();
    p.tokens.insert(p.tokens.end(), doc.begin(), doc.end());
    p.spans.push_back({begin, p.tokens.size()});
    p.tokens.push_back(Vocabulary::kSep);
    p.doc_indices.push_back(idx);
  }
  const std::vector<TokenId> query = vocab.tokenize(instance.query);
  p.tokens.insert(p.tokens.end(), query.begin(), query.end());
  p.tokens.push_back(Vocabulary::kAnswer);
  return p;
}

Prompt assemble_prompt(const Vocabulary& vocab, const QAInstance& instance) {
  std::vector<std::size_t> all(instance.documents.size());
  std::iota(all.begin(), all.end(), 0);
  return assemble_prompt(vocab, instance, all);
}

QAInstance gen_instance(const World& world, const Vocabulary& vocab, const Fact& fact,
                        const InstanceOptions& options, std::uint64_t seed, std::string id) {
  const auto idx = world.find(fact.subject, fact.relation);
  if (!idx || world.facts[*idx] != fact) {
    throw LookupError("fact (" + std::to_string(fact.subject) + ", " + std::to_string(fact.relation) +
                      ") is not in the world");
  }
  if (options.n_high + options.n_mis == 0) throw ConfigError("gen_instance: no documents requested");
  std::mt19937_64 rng(seed);
  return draft_instance(world, vocab, fact, options, rng, std::move(id)).instance;
}

std::vector<double> assign_ideal_scores(const QAInstance& instance) {
  std::vector<double> s;
  s.reserve(instance.documents.size());
  for (const Document& d : instance.documents) s.push_back(is_misinformation(d.kind) ? 1.0 : 10.0);
  return s;
}

FactSplits split_dataset(const World& world, const SplitSizes& sizes, std::uint64_t seed) {
  const std::size_t held = sizes.ie + sizes.validation + sizes.test;
  if (held > world.facts.size()) {
    throw ConfigError("split_dataset: world has " + std::to_string(world.facts.size()) +
                      " facts but the splits need " + std::to_string(held));
  }
  std::vector<std::size_t> order(world.facts.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  FactSplits s;
  auto take = [&, cursor = std::size_t{0}](std::size_t n) mutable {
    std::vector<std::size_t> out(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor + n));
    cursor += n;
    return out;
  };
  s.ie = take(sizes.ie);
  s.validation = take(sizes.validation);
  s.test = take(sizes.test);
  s.train = take(order.size() - held);
  return s;
}

std::vector<QAInstance> make_instances(const World& world, const Vocabulary& vocab,
                                       std::span<const std::size_t> facts,
                                       const InstanceOptions& options, std::uint64_t seed,
                                       std::string_view id_prefix) {
  std::vector<QAInstance> out;
  out.reserve(facts.size());
  for (std::size_t i = 0; i < facts.size(); ++i) {
    if (facts[i] >= world.facts.size()) throw LookupError("fact index out of range");
    out.push_back(gen_instance(world, vocab, world.facts[facts[i]], options, derive_seed(seed, i),
                               std::string(id_prefix) + std::to_string(i)));
  }
  return out;
}

BenchmarkSplits build_splits(const World& world, const Vocabulary& vocab, const FactSplits& facts,
                             const InstanceOptions& options, std::uint64_t seed) {
  BenchmarkSplits b;
  b.ie_set = make_instances(world, vocab, facts.ie, options, derive_seed(seed, "ie"), "ie-");
  b.validation_set =
      make_instances(world, vocab, facts.validation, options, derive_seed(seed, "validation"), "val-");
  b.test_set = make_instances(world, vocab, facts.test, options, derive_seed(seed, "test"), "test-");
  return b;
}

std::vector<TrainingExample> make_training_set(const World& world, const Vocabulary& vocab,
                                               std::span<const std::size_t> train_facts,
                                               const TrainingMix& mix, std::uint64_t seed) {
  if (train_facts.empty()) throw ConfigError("make_training_set: no training facts");
  if (mix.max_high == 0) throw ConfigError("make_training_set: max_high must be > 0");
  std::mt19937_64 rng(seed);
  const std::size_t n_ent = world.entities.size();
  std::vector<TrainingExample> out;
  out.reserve(mix.n_examples);
  for (std::size_t i = 0; i < mix.n_examples; ++i) {
    Fact f = world.facts[train_facts[uniform_index(train_facts.size(), rng)]];
    do {
      f.object = uniform_index(n_ent, rng);
    } while (f.object == f.subject);
    do {
      f.distractor = uniform_index(n_ent, rng);
    } while (f.distractor == f.object || f.distractor == f.subject);

    InstanceOptions opt;
    opt.n_high = 1 + uniform_index(mix.max_high, rng);
    // Half of the examples are clean so the reader learns plain extraction.
    opt.n_mis = coin(0.5, rng) ? 0 : 1 + uniform_index(mix.max_mis == 0 ? 1 : mix.max_mis, rng);
    if (mix.max_mis == 0) opt.n_mis = 0;
    opt.filtered = coin(mix.filtered_rate, rng);
    opt.assertive_rate = mix.assertive_rate;
    opt.filler_per_doc = mix.filler_per_doc;
    const Drafted d = draft_instance(world, vocab, f, opt, rng, "train");

    const QAInstance& q = d.instance;
    const Prompt p = assemble_prompt(vocab, q);

    // Document dropout: remove one document's tokens but keep its separator
    // and the positions after it, as if every head ignored that span.
    std::optional<std::size_t> dropped;
    if (q.documents.size() > 1 && coin(mix.drop_rate, rng)) {
      const std::size_t j = uniform_index(q.documents.size(), rng);
      std::size_t high_left = 0;
      for (std::size_t k = 0; k < q.documents.size(); ++k) {
        high_left += k != j && !is_misinformation(q.documents[k].kind);
      }
      if (high_left > 0) dropped = j;
    }
    bool any_assertive = false;
    for (std::size_t k = 0; k < q.documents.size(); ++k) any_assertive |= d.assertive[k] && k != dropped;

    TrainingExample ex;
    ex.answer = vocab.tokenize(any_assertive ? q.wrong_answer : q.gold_answer);
    ex.answer.push_back(Vocabulary::kEos);
    const bool gaps = mix.max_position_gap > 0 && mix.gap_rate > 0.0;
    std::vector<bool> boundary(p.tokens.size() + 1, false), removed(p.tokens.size(), false);
    for (const TokenSpan& s : p.spans) boundary[s.end] = true;
    if (dropped) {
      for (std::size_t t = p.spans[*dropped].begin; t < p.spans[*dropped].end; ++t) removed[t] = true;
    }
    std::size_t offset = 0;
    for (std::size_t t = 0; t < p.tokens.size(); ++t) {
      if (gaps && boundary[t] && coin(mix.gap_rate, rng)) offset += 1 + uniform_index(mix.max_position_gap, rng);
      if (removed[t]) continue;
      ex.context.push_back(p.tokens[t]);
      ex.positions.push_back(t + offset);
    }
    for (std::size_t a = 0; a + 1 < ex.answer.size(); ++a) ex.positions.push_back(ex.positions.back() + 1);
    if (!gaps && !dropped) ex.positions.clear();
    out.push_back(std::move(ex));
  }
  return out;
}

void write_corpus(const std::vector<QAInstance>& instances, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open corpus '" + path + "' for writing");
  for (const QAInstance& q : instances) out << to_json(q).dump() << '\n';
  if (!out) throw IoError("failed writing corpus '" + path + "'");
}

std::vector<QAInstance> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  std::vector<QAInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw InstanceError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open vocabulary '" + path + "' for writing");
  for (const std::string& t : vocab.tokens()) out << t << '\n';
  if (!out) throw IoError("failed writing vocabulary '" + path + "'");
}

Vocabulary read_vocabulary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocabulary '" + path + "'");
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

IngestReport ingest_external_scores_json(std::string_view json_text,
                                         std::vector<QAInstance>& instances) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw IngestionError(std::string("score file is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw IngestionError("score file must map instance ids to objects");

  IngestReport report;
  std::set<std::string> known;
  std::vector<std::vector<double>> staged(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const QAInstance& q = instances[i];
    known.insert(q.id);
    auto it = root.find(q.id);
    if (it == root.end()) throw IngestionError("no scores for instance '" + q.id + "'");
    if (!it->is_object()) throw IngestionError("scores for instance '" + q.id + "' must be an object");
    std::set<std::string> docs;
    for (const Document& d : q.documents) {
      docs.insert(d.doc_id);
      auto s = it->find(d.doc_id);
      const std::string key = q.id + "/" + d.doc_id;
      if (s == it->end()) throw IngestionError("missing score for '" + key + "'");
      if (!s->is_number()) throw IngestionError("score for '" + key + "' is not a number");
      const double v = s->get<double>();
      if (!std::isfinite(v) || v < 0.0 || v > 10.0) {
        throw IngestionError("score for '" + key + "' outside [0, 10]");
      }
      staged[i].push_back(v);
    }
    for (auto e = it->begin(); e != it->end(); ++e) report.extra_entries += !docs.contains(e.key());
  }
  for (auto e = root.begin(); e != root.end(); ++e) report.extra_entries += !known.contains(e.key());
  for (std::size_t i = 0; i < instances.size(); ++i) instances[i].scores = std::move(staged[i]);
  return report;
}

IngestReport ingest_external_scores(const std::string& path, std::vector<QAInstance>& instances) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open score file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return ingest_external_scores_json(buf.str(), instances);
}

}  // namespace cram
