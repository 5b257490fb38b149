#include "cram/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "cram/errors.hpp"
#include "cram/influence.hpp"
#include "json.hpp"

namespace cram {
namespace {

using ojson = nlohmann::ordered_json;

std::vector<std::string> answer_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in(normalize_answer(s));
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) throw IoError("empty output path");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace

std::string normalize_answer(std::string_view s) {
  std::string stripped;
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) continue;
    stripped += static_cast<char>(std::tolower(u));
  }
  std::istringstream in(stripped);
  std::string out;
  for (std::string w; in >> w;) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

double exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1.0 : 0.0;
}

double f1_score(std::string_view prediction, std::string_view gold) {
  const std::vector<std::string> p = answer_tokens(prediction);
  const std::vector<std::string> g = answer_tokens(gold);
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::map<std::string, std::size_t> counts;
  for (const auto& w : g) ++counts[w];
  std::size_t common = 0;
  for (const auto& w : p) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::string_view to_string(ScoreSource s) { return s == ScoreSource::Ideal ? "ideal" : "ingested"; }

ScoreSource parse_score_source(std::string_view s) {
  if (s == "ideal") return ScoreSource::Ideal;
  if (s == "ingested") return ScoreSource::Ingested;
  throw ConfigError("unknown score source '" + std::string(s) + "' (expected ideal or ingested)");
}

std::string Policy::name() const {
  switch (kind) {
    case PolicyKind::NaiveClean: return "naive_clean";
    case PolicyKind::NaivePolluted: return "naive_polluted";
    case PolicyKind::Exclusion: return "exclusion";
    case PolicyKind::Cram: return "cram";
    case PolicyKind::CramAll: return "cram_all";
  }
  return "unknown";
}

bool Policy::uses_scores() const {
  return kind == PolicyKind::Exclusion || kind == PolicyKind::Cram || kind == PolicyKind::CramAll;
}

void Policy::validate() const {
  if (kind == PolicyKind::Exclusion && !(threshold >= 0.0 && threshold <= 10.0)) {
    throw ConfigError("exclusion threshold must lie in [0, 10]");
  }
  if (kind == PolicyKind::Cram && heads.empty()) throw ConfigError("cram policy needs a non-empty head set");
}

std::vector<double> instance_scores(const QAInstance& instance, ScoreSource source) {
  if (source == ScoreSource::Ideal) return assign_ideal_scores(instance);
  if (instance.scores.size() != instance.documents.size()) {
    throw ConfigError("instance '" + instance.id + "' has no ingested scores");
  }
  return instance.scores;
}

PolicyInput prepare_input(const ModelConfig& config, const Vocabulary& vocab,
                          const QAInstance& instance, const Policy& policy, ScoreSource source) {
  policy.validate();
  std::vector<std::size_t> docs;
  std::vector<double> scores;
  if (policy.uses_scores()) scores = instance_scores(instance, source);
  for (std::size_t i = 0; i < instance.documents.size(); ++i) {
    switch (policy.kind) {
      case PolicyKind::NaiveClean:
        if (!is_misinformation(instance.documents[i].kind)) docs.push_back(i);
        break;
      case PolicyKind::Exclusion:
        if (scores[i] >= policy.threshold) docs.push_back(i);
        break;
      default:
        docs.push_back(i);
    }
  }
  PolicyInput in;
  in.prompt = assemble_prompt(vocab, instance, docs);
  if (policy.kind == PolicyKind::Cram || policy.kind == PolicyKind::CramAll) {
    ModificationPlan plan;
    plan.mask = normalize_scores(scores, in.prompt.spans, in.prompt.tokens.size());
    if (policy.kind == PolicyKind::Cram) {
      plan.heads.insert(policy.heads.begin(), policy.heads.end());
    } else {
      for (std::size_t l = 0; l < config.n_layers; ++l)
        for (std::size_t h = 0; h < config.n_heads; ++h) plan.heads.insert({l, h});
    }
    in.plan = std::move(plan);
  }
  return in;
}

std::string predict(const Model& model, const Vocabulary& vocab, const QAInstance& instance,
                    const Policy& policy, ScoreSource source) {
  const PolicyInput in = prepare_input(model.config(), vocab, instance, policy, source);
  const std::size_t cap = vocab.tokenize(instance.gold_answer).size() + 2;
  const std::vector<TokenId> out = greedy_decode(model, in.prompt.tokens, in.plan ? &*in.plan : nullptr,
                                                 cap, Vocabulary::kEos);
  return vocab.detokenize(out);
}

EvalReport run_condition(const Model& model, const Vocabulary& vocab,
                         std::span<const QAInstance> instances, const Policy& policy,
                         ScoreSource source) {
  policy.validate();
  if (instances.empty()) throw ConfigError("run_condition: no instances");
  const std::size_t n = instances.size();
  std::vector<InstancePrediction> preds(n);
  std::vector<std::exception_ptr> errors(n);

#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      const QAInstance& q = instances[i];
      InstancePrediction& p = preds[i];
      p.id = q.id;
      p.prediction = predict(model, vocab, q, policy, source);
      p.em = exact_match(p.prediction, q.gold_answer);
      p.f1 = f1_score(p.prediction, q.gold_answer);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  EvalReport r;
  r.policy = policy.name();
  r.score_source = source;
  r.n_mis = instances.front().n_misinformation();
  r.n = n;
  double em = 0.0, f1 = 0.0;
  for (const InstancePrediction& p : preds) {
    em += p.em;
    f1 += p.f1;
  }
  r.em = 100.0 * em / static_cast<double>(n);
  r.f1 = 100.0 * f1 / static_cast<double>(n);
  r.predictions = std::move(preds);
  return r;
}

std::vector<EvalReport> sweep_misinfo(const Model& model, const Vocabulary& vocab, const World& world,
                                      std::span<const std::size_t> facts,
                                      std::span<const Policy> policies,
                                      std::span<const std::size_t> n_mis_levels,
                                      const InstanceOptions& base, std::uint64_t seed) {
  for (const Policy& p : policies) p.validate();
  std::vector<std::vector<QAInstance>> sets;
  for (std::size_t level : n_mis_levels) {
    InstanceOptions opt = base;
    opt.n_mis = level;
    sets.push_back(make_instances(world, vocab, facts, opt, seed, "m" + std::to_string(level) + "-"));
  }
  std::vector<EvalReport> out;
  for (const Policy& p : policies) {
    for (const auto& set : sets) out.push_back(run_condition(model, vocab, set, p, ScoreSource::Ideal));
  }
  return out;
}

IeSizeSweep sweep_ie_set_size(const Model& model, const Vocabulary& vocab,
                              std::span<const QAInstance> ie_pool,
                              std::span<const QAInstance> validation,
                              std::span<const QAInstance> test, std::span<const std::size_t> sizes,
                              std::span<const double> grid) {
  if (sizes.empty()) throw ConfigError("sweep_ie_set_size: no sizes");
  IeSizeSweep sweep;
  for (std::size_t size : sizes) {
    if (size == 0 || size > ie_pool.size()) {
      throw ConfigError("IE set size " + std::to_string(size) + " not available from a pool of " +
                        std::to_string(ie_pool.size()));
    }
    const IeTable table = compute_ie_table(model, vocab, ie_pool.first(size));
    const HeadSelection sel = select_head_count(model, vocab, table, validation, grid);
    IeSizeResult r;
    r.ie_set_size = size;
    r.heads = sel.heads;
    r.report = run_condition(model, vocab, test, Policy::cram(sel.heads), ScoreSource::Ideal);
    sweep.results.push_back(std::move(r));
  }
  const auto [lo, hi] = std::minmax_element(
      sweep.results.begin(), sweep.results.end(),
      [](const IeSizeResult& a, const IeSizeResult& b) { return a.report.em < b.report.em; });
  sweep.em_spread = hi->report.em - lo->report.em;
  return sweep;
}

std::string checksum_hex(std::uint64_t checksum) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(checksum));
  return buf;
}

void serialize_report(const Report& report, const std::string& path, ReportFormat format) {
  if (report.results.empty()) throw ConfigError("serialize_report: no results");
  if (format == ReportFormat::Csv) {
    std::string text = "policy,score_source,n_mis,em,f1,n,model_checksum,corpus_seed\n";
    for (const EvalReport& r : report.results) {
      text += r.policy + "," + std::string(to_string(r.score_source)) + "," + std::to_string(r.n_mis) +
              "," + fmt(r.em) + "," + fmt(r.f1) + "," + std::to_string(r.n) + "," +
              report.meta.model_checksum + "," + std::to_string(report.meta.corpus_seed) + "\n";
    }
    write_text(path, text);
    return;
  }
  ojson heads = ojson::array();
  for (const HeadId& h : report.meta.head_set) heads.push_back({h.layer, h.head});
  ojson doc;
  doc["meta"] = {{"model_checksum", report.meta.model_checksum},
                 {"corpus_seed", report.meta.corpus_seed},
                 {"head_set", heads},
                 {"grid", report.meta.grid}};
  ojson results = ojson::array();
  for (const EvalReport& r : report.results) {
    ojson preds = ojson::array();
    for (const InstancePrediction& p : r.predictions) {
      preds.push_back({{"id", p.id}, {"prediction", p.prediction}, {"em", p.em}, {"f1", p.f1}});
    }
    results.push_back({{"policy", r.policy},
                       {"score_source", to_string(r.score_source)},
                       {"n_mis", r.n_mis},
                       {"em", r.em},
                       {"f1", r.f1},
                       {"n", r.n},
                       {"predictions", preds}});
  }
  doc["results"] = results;
  write_text(path, doc.dump(2) + "\n");
}

Report read_report_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open report '" + path + "'");
  Report report;
  try {
    const ojson doc = ojson::parse(in);
    const ojson& meta = doc.at("meta");
    report.meta.model_checksum = meta.at("model_checksum").get<std::string>();
    report.meta.corpus_seed = meta.at("corpus_seed").get<std::uint64_t>();
    for (const ojson& h : meta.at("head_set")) {
      report.meta.head_set.push_back({h.at(0).get<std::size_t>(), h.at(1).get<std::size_t>()});
    }
    report.meta.grid = meta.at("grid").get<std::vector<double>>();
    for (const ojson& r : doc.at("results")) {
      EvalReport e;
      e.policy = r.at("policy").get<std::string>();
      e.score_source = parse_score_source(r.at("score_source").get<std::string>());
      e.n_mis = r.at("n_mis").get<std::size_t>();
      e.em = r.at("em").get<double>();
      e.f1 = r.at("f1").get<double>();
      e.n = r.at("n").get<std::size_t>();
      for (const ojson& p : r.value("predictions", ojson::array())) {
        e.predictions.push_back({p.at("id").get<std::string>(), p.at("prediction").get<std::string>(),
                                 p.at("em").get<double>(), p.at("f1").get<double>()});
      }
      report.results.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InstanceError("malformed report '" + path + "': " + e.what());
  }
  return report;
}

}  // namespace cram
