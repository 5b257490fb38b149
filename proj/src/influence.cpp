#include "cram/influence.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>

#include "cram/errors.hpp"
#include "cram/eval.hpp"
#include "json.hpp"

namespace cram {
namespace {

using nlohmann::json;

std::vector<HeadId> all_heads(const ModelConfig& cfg) {
  std::vector<HeadId> heads;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t h = 0; h < cfg.n_heads; ++h) heads.push_back({l, h});
  return heads;
}

double wrong_probability(const Model& model, const IeProbe& probe, const ModificationPlan* plan) {
  return std::exp(sequence_logprob(model, probe.context, probe.wrong, plan));
}

double head_probability(const Model& model, const IeProbe& probe, HeadId head) {
  ModificationPlan plan{{head}, probe.mask};
  return wrong_probability(model, probe, &plan);
}

std::vector<IeProbe> make_probes(const Model& model, const Vocabulary& vocab,
                                 std::span<const QAInstance> ie_set) {
  if (ie_set.empty()) throw ConfigError("compute_ie_table: empty IE set");
  std::vector<IeProbe> probes;
  probes.reserve(ie_set.size());
  for (const QAInstance& q : ie_set) {
    probes.push_back(make_ie_probe(vocab, q));
    if (probes.back().context.size() + probes.back().wrong.size() > model.config().max_seq_len) {
      throw DimensionError("instance '" + q.id + "': prompt plus answer exceeds max_seq_len");
    }
  }
  return probes;
}

// Averages per-(instance, head) IE values in instance order.
IeTable reduce(const std::vector<HeadId>& heads, const std::vector<double>& p0,
               const std::vector<double>& p1, std::size_t n_inst, bool keep) {
  const std::size_t H = heads.size();
  IeTable table;
  table.entries.resize(H);
  if (keep) table.per_instance.assign(n_inst, std::vector<double>(H));
  for (std::size_t j = 0; j < H; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n_inst; ++i) {
      const double ie = p0[i] - p1[i * H + j];
      sum += ie;
      if (keep) table.per_instance[i][j] = ie;
    }
    table.entries[j] = {heads[j], sum / static_cast<double>(n_inst), n_inst};
  }
  return table;
}

}  // namespace

const IeEntry& IeTable::at(HeadId head) const {
  for (const IeEntry& e : entries) {
    if (e.head == head) return e;
  }
  throw LookupError("head (" + std::to_string(head.layer) + ", " + std::to_string(head.head) +
                    ") not in IE table");
}

IeProbe make_ie_probe(const Vocabulary& vocab, const QAInstance& instance) {
  if (instance.n_misinformation() == 0) {
    throw InstanceError("instance '" + instance.id + "' has no misinformation document");
  }
  const Prompt prompt = assemble_prompt(vocab, instance);
  std::vector<bool> zeroed;
  for (std::size_t idx : prompt.doc_indices) zeroed.push_back(is_misinformation(instance.documents[idx].kind));
  IeProbe probe;
  probe.mask = blackout_mask(zeroed, prompt.spans, prompt.tokens.size());
  probe.context = prompt.tokens;
  probe.wrong = vocab.tokenize(instance.wrong_answer);
  if (probe.wrong.empty()) throw InstanceError("instance '" + instance.id + "' has an empty wrong answer");
  return probe;
}

IeResult compute_ie(const Model& model, const Vocabulary& vocab, const QAInstance& instance,
                    HeadId head) {
  const IeProbe probe = make_ie_probe(vocab, instance);
  IeResult r;
  r.p0 = wrong_probability(model, probe, nullptr);
  r.p1 = head_probability(model, probe, head);
  r.ie = r.p0 - r.p1;
  return r;
}

IeTable compute_ie_table(const Model& model, const Vocabulary& vocab,
                         std::span<const QAInstance> ie_set, bool keep_per_instance) {
  const std::vector<IeProbe> probes = make_probes(model, vocab, ie_set);
  const std::vector<HeadId> heads = all_heads(model.config());
  const std::size_t n_inst = probes.size(), H = heads.size();
  // Task t < n_inst computes P0 of instance t; the rest cover (instance, head).
  const std::size_t n_tasks = n_inst + n_inst * H;
  std::vector<double> p0(n_inst), p1(n_inst * H);
  std::vector<std::exception_ptr> errors(n_tasks);

#pragma omp parallel for schedule(dynamic)
  for (std::size_t t = 0; t < n_tasks; ++t) {
    try {
      if (t < n_inst) {
        p0[t] = wrong_probability(model, probes[t], nullptr);
      } else {
        const std::size_t i = (t - n_inst) / H, j = (t - n_inst) % H;
        p1[i * H + j] = head_probability(model, probes[i], heads[j]);
      }
    } catch (...) {
      errors[t] = std::current_exception();
    }
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return reduce(heads, p0, p1, n_inst, keep_per_instance);
}

namespace serial {

IeTable compute_ie_table(const Model& model, const Vocabulary& vocab,
                         std::span<const QAInstance> ie_set, bool keep_per_instance) {
  const std::vector<IeProbe> probes = make_probes(model, vocab, ie_set);
  const std::vector<HeadId> heads = all_heads(model.config());
  const std::size_t n_inst = probes.size(), H = heads.size();
  std::vector<double> p0(n_inst), p1(n_inst * H);
  for (std::size_t i = 0; i < n_inst; ++i) {
    p0[i] = wrong_probability(model, probes[i], nullptr);
    for (std::size_t j = 0; j < H; ++j) p1[i * H + j] = head_probability(model, probes[i], heads[j]);
  }
  return reduce(heads, p0, p1, n_inst, keep_per_instance);
}

}  // namespace serial

std::vector<HeadId> rank_heads(const IeTable& table) {
  std::vector<IeEntry> sorted = table.entries;
  std::sort(sorted.begin(), sorted.end(), [](const IeEntry& a, const IeEntry& b) {
    if (a.mean_ie != b.mean_ie) return a.mean_ie > b.mean_ie;
    return a.head < b.head;
  });
  std::vector<HeadId> out;
  out.reserve(sorted.size());
  for (const IeEntry& e : sorted) out.push_back(e.head);
  return out;
}

std::size_t count_positive(const IeTable& table) {
  return static_cast<std::size_t>(std::count_if(table.entries.begin(), table.entries.end(),
                                                [](const IeEntry& e) { return e.mean_ie > 0.0; }));
}

std::vector<double> default_multiplier_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 10; ++i) grid.push_back(i / 5.0);
  return grid;
}

std::vector<std::size_t> candidate_counts(std::size_t m_pos, std::span<const double> grid,
                                          std::size_t total_heads) {
  std::vector<std::size_t> raw{m_pos, 1};
  for (double c : grid) {
    if (!(c > 0.0)) throw ConfigError("multiplier grid entries must be positive");
    raw.push_back(static_cast<std::size_t>(std::llround(c * static_cast<double>(m_pos))));
  }
  std::vector<std::size_t> out;
  for (std::size_t k : raw) out.push_back(std::clamp<std::size_t>(k, 1, total_heads));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

HeadSelection select_head_count(const Model& model, const Vocabulary& vocab, const IeTable& table,
                                std::span<const QAInstance> validation,
                                std::span<const double> grid) {
  if (validation.empty()) throw ConfigError("select_head_count: empty validation set");
  HeadSelection sel;
  sel.m_pos = count_positive(table);
  if (sel.m_pos == 0) throw SelectionError("no attention head has a positive indirect effect");
  sel.multiplier_grid.assign(grid.begin(), grid.end());
  const std::vector<HeadId> ranking = rank_heads(table);

  bool have_best = false;
  CandidateScore best;
  for (std::size_t k : candidate_counts(sel.m_pos, grid, ranking.size())) {
    const std::vector<HeadId> top(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(k));
    const EvalReport r = run_condition(model, vocab, validation, Policy::cram(top), ScoreSource::Ideal);
    const CandidateScore c{k, r.em, r.f1};
    sel.candidates.push_back(c);
    // Candidates arrive in ascending k, so strict improvement keeps the smaller k on ties.
    if (!have_best || c.em > best.em || (c.em == best.em && c.f1 > best.f1)) {
      best = c;
      have_best = true;
    }
  }
  sel.k = best.k;
  sel.heads.assign(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(best.k));
  return sel;
}

void export_ie_distribution(const IeTable& table, const std::string& path) {
  if (path.empty()) throw IoError("export_ie_distribution: empty path");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "layer,head,mean_ie,n_instances\n";
  char buf[96];
  for (const IeEntry& e : table.entries) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%zu\n", e.head.layer, e.head.head, e.mean_ie,
                  e.n_instances);
    out << buf;
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

void write_head_selection(const HeadSelection& selection, const std::string& path) {
  json heads = json::array();
  for (const HeadId& h : selection.heads) heads.push_back({h.layer, h.head});
  const json doc = {{"heads", heads},
                    {"k", selection.k},
                    {"m_pos", selection.m_pos},
                    {"multiplier_grid", selection.multiplier_grid}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + path + "'");
}

HeadSelection read_head_selection(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open head set '" + path + "'");
  HeadSelection sel;
  try {
    const json doc = json::parse(in);
    for (const json& h : doc.at("heads")) sel.heads.push_back({h.at(0).get<std::size_t>(), h.at(1).get<std::size_t>()});
    sel.k = doc.at("k").get<std::size_t>();
    sel.m_pos = doc.at("m_pos").get<std::size_t>();
    sel.multiplier_grid = doc.at("multiplier_grid").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw InstanceError("malformed head set '" + path + "': " + e.what());
  }
  if (sel.heads.size() != sel.k) throw InstanceError("head set '" + path + "': k disagrees with heads");
  return sel;
}

}  // namespace cram
