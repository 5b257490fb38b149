// Runs the default experiment end to end and prints one PASS/FAIL line per
// acceptance criterion. Exit status is non-zero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cram/config.hpp"
#include "cram/credibility.hpp"
#include "cram/eval.hpp"
#include "cram/influence.hpp"
#include "cram/checkpoint.hpp"
#include "cram/model.hpp"
#include "cram/pipeline.hpp"
#include "cram/train.hpp"

namespace fs = std::filesystem;
using namespace cram;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------------------

Outcome row_stochasticity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng() % 64;
    const std::size_t visible = 1 + rng() % n;
    std::vector<double> row(n, 0.0), mask(n);
    double z = 0.0;
    for (std::size_t j = 0; j < visible; ++j) z += row[j] = std::exp(6.0 * u(rng));
    for (std::size_t j = 0; j < visible; ++j) row[j] /= z;
    for (double& m : mask) m = u(rng) < 0.3 ? 0.0 : u(rng);
    const auto out = modify_row(row, mask);
    double sum = 0.0;
    bool ok = out.size() == n;
    for (std::size_t j = 0; ok && j < n; ++j) {
      ok = out[j] >= 0.0 && (row[j] != 0.0 || out[j] == 0.0);
      sum += out[j];
    }
    if (!ok || std::abs(sum - 1.0) > 1e-6) ++bad;
  }
  const double t = seconds_since(t0);
  return {bad == 0 && t < 1.0, std::to_string(bad) + " violations in 1000 pairs, " + fmt("%.3f s", t)};
}

double max_logit_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.flat().size(); ++i) d = std::max(d, std::abs(a.flat()[i] - b.flat()[i]));
  return d;
}

Outcome identity_invariance(const Model& model, const Vocabulary& vocab, const std::vector<QAInstance>& set,
                            const std::vector<HeadId>& heads) {
  double worst = 0.0;
  std::size_t mismatched = 0, checked = 0;
  for (double S : {0.0, 3.7, 10.0}) {
    for (const QAInstance& base : set) {
      QAInstance q = base;
      q.scores.assign(q.documents.size(), S);
      const Prompt prompt = assemble_prompt(vocab, q);
      const Matrix plain = forward(model, prompt.tokens).logits;
      const std::string plain_pred = predict(model, vocab, q, Policy::naive_polluted(), ScoreSource::Ingested);
      for (const Policy& p : {Policy::cram(heads), Policy::cram_all()}) {
        const PolicyInput in = prepare_input(model.config(), vocab, q, p, ScoreSource::Ingested);
        worst = std::max(worst, max_logit_diff(plain, forward(model, in.prompt.tokens, &*in.plan).logits));
        mismatched += predict(model, vocab, q, p, ScoreSource::Ingested) != plain_pred;
        ++checked;
      }
    }
  }
  return {worst <= 1e-6 && mismatched == 0 && set.size() >= 100,
          std::to_string(checked) + " (instance, S, policy) cases on " + std::to_string(set.size()) +
              " instances, max |dlogit| " + fmt("%.2e", worst) + ", " + std::to_string(mismatched) +
              " prediction changes"};
}

Outcome affine_invariance(const Model& model, const Vocabulary& vocab, const std::vector<QAInstance>& set,
                          const std::vector<HeadId>& heads) {
  std::mt19937_64 rng(202);
  std::size_t mask_diffs = 0, pred_diffs = 0;
  for (const QAInstance& base : set) {
    QAInstance a = base, b = base;
    a.scores.clear();
    for (std::size_t i = 0; i < base.documents.size(); ++i) a.scores.push_back(static_cast<double>(rng() % 11));
    b.scores = a.scores;
    for (double& s : b.scores) s = 3.0 * s + 2.0;
    const Prompt prompt = assemble_prompt(vocab, a);
    mask_diffs += normalize_scores(a.scores, prompt.spans, prompt.tokens.size()).values !=
                  normalize_scores(b.scores, prompt.spans, prompt.tokens.size()).values;
    for (const Policy& p : {Policy::cram(heads), Policy::cram_all()}) {
      pred_diffs += predict(model, vocab, a, p, ScoreSource::Ingested) !=
                    predict(model, vocab, b, p, ScoreSource::Ingested);
    }
  }
  return {mask_diffs == 0 && pred_diffs == 0,
          std::to_string(set.size()) + " instances with integer scores in [0, 10]: " +
              std::to_string(mask_diffs) + " mask differences, " + std::to_string(pred_diffs) +
              " prediction differences"};
}

Outcome blackout(const Model& model, const Vocabulary& vocab, const std::vector<std::vector<QAInstance>>& sets) {
  std::set<HeadId> all;
  for (std::size_t l = 0; l < model.config().n_layers; ++l)
    for (std::size_t h = 0; h < model.config().n_heads; ++h) all.insert({l, h});
  double leaked = 0.0;
  std::size_t rows = 0;
  for (const auto& set : sets) {
    for (const QAInstance& q : set) {
      const Prompt prompt = assemble_prompt(vocab, q);
      std::vector<bool> zeroed;
      for (std::size_t idx : prompt.doc_indices) zeroed.push_back(is_misinformation(q.documents[idx].kind));
      const ModificationPlan plan{all, blackout_mask(zeroed, prompt.spans, prompt.tokens.size())};
      const auto out = forward(model, prompt.tokens, &plan, true);
      for (const auto& [head, A] : out.attention) {
        for (std::size_t i = 0; i < A.rows(); ++i) {
          for (std::size_t d = 0; d < prompt.spans.size(); ++d) {
            if (!zeroed[d]) continue;
            for (std::size_t j = prompt.spans[d].begin; j < prompt.spans[d].end; ++j) leaked += A(i, j);
          }
          ++rows;
        }
      }
    }
  }
  return {leaked == 0.0, std::to_string(rows) + " attention rows over every head, total mass on misinformation " +
                             fmt("%.3g", leaked)};
}

// Mean IE per head from two plain forward passes per (instance, head).
std::map<HeadId, double> brute_force_ie(const Model& model, const Vocabulary& vocab,
                                        const std::vector<QAInstance>& set) {
  auto prob = [&](const std::vector<TokenId>& ctx, const std::vector<TokenId>& ans, const ModificationPlan* plan) {
    std::vector<TokenId> all = ctx;
    all.insert(all.end(), ans.begin(), ans.end() - 1);
    const Matrix logits = forward(model, all, plan).logits;
    double lp = 0.0;
    for (std::size_t k = 0; k < ans.size(); ++k) {
      const double* row = logits.row(ctx.size() - 1 + k);
      double mx = row[0];
      for (std::size_t c = 0; c < logits.cols(); ++c) mx = std::max(mx, row[c]);
      double z = 0.0;
      for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(row[c] - mx);
      lp += row[ans[k]] - mx - std::log(z);
    }
    return std::exp(lp);
  };
  std::map<HeadId, double> mean;
  for (const QAInstance& q : set) {
    const Prompt prompt = assemble_prompt(vocab, q);
    const std::vector<TokenId> wrong = vocab.tokenize(q.wrong_answer);
    const double p0 = prob(prompt.tokens, wrong, nullptr);
    CredibilityMask mask = CredibilityMask::ones(prompt.tokens.size() + wrong.size() - 1);
    for (std::size_t d = 0; d < prompt.spans.size(); ++d) {
      if (!is_misinformation(q.documents[prompt.doc_indices[d]].kind)) continue;
      for (std::size_t j = prompt.spans[d].begin; j < prompt.spans[d].end; ++j) mask.values[j] = 0.0;
    }
    for (std::size_t l = 0; l < model.config().n_layers; ++l) {
      for (std::size_t h = 0; h < model.config().n_heads; ++h) {
        const ModificationPlan plan{{{l, h}}, mask};
        mean[{l, h}] += (p0 - prob(prompt.tokens, wrong, &plan)) / static_cast<double>(set.size());
      }
    }
  }
  return mean;
}

Outcome ie_oracle() {
  const World world = gen_world(3, 40, 6, 200);
  const Vocabulary vocab = Vocabulary::build(world);
  ModelConfig c{.n_layers = 2, .n_heads = 2, .d_model = 16, .d_k = 8, .d_v = 8, .d_ff = 32,
                .vocab_size = vocab.size(), .max_seq_len = 160, .seed = 17};
  Model model = init_model(c);
  // Larger weights make the heads matter, so the IE values are far from zero.
  for (double& p : model.mutable_params()) p *= 6.0;
  InstanceOptions opt;
  opt.filler_per_doc = 0;
  opt.n_mis = 2;
  const std::vector<std::size_t> facts{0, 1, 2};
  const auto set = make_instances(world, vocab, facts, opt, 5, "ie");
  const IeTable table = compute_ie_table(model, vocab, set);
  const auto oracle = brute_force_ie(model, vocab, set);
  double worst = 0.0, largest = 0.0;
  for (const auto& [head, v] : oracle) {
    worst = std::max(worst, std::abs(table.at(head).mean_ie - v));
    largest = std::max(largest, std::abs(v));
  }
  return {worst <= 1e-8 && table.entries.size() == 4,
          "2x2 model, 3 instances: max |diff| " + fmt("%.2e", worst) + " (largest |IE| " + fmt("%.3g", largest) + ")"};
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  ModelConfig c{.n_layers = 1, .n_heads = 2, .d_model = 8, .d_k = 4, .d_v = 4, .d_ff = 16,
                .vocab_size = 12, .max_seq_len = 16, .seed = 3};
  const Model m = init_model(c);
  const TrainingExample ex{{1, 4, 2, 7, 3, 8, 2}, {5, 9, 4}, {}};
  // Gate: the sampled check at eps 1e-4, plus every coordinate at eps 1e-5.
  // Every coordinate at eps 1e-4 is reported only: near-zero LayerNorm inputs
  // at init scale put O(eps^2) truncation above 1e-4 on a few embedding entries.
  const auto sampled = grad_check(m, ex, 1e-4);
  const auto full_fine = grad_check(m, ex, 1e-5, 100000);
  const auto full = grad_check(m, ex, 1e-4, 100000);
  const double t = seconds_since(t0);
  return {sampled.max_relative_error <= 1e-4 && full_fine.max_relative_error <= 1e-4 && t < 60.0,
          "sampled " + fmt("%.2e", sampled.max_relative_error) + " over " + std::to_string(sampled.n_checked) +
              "; all " + std::to_string(full.n_checked) + " coordinates " +
              fmt("%.2e", full_fine.max_relative_error) + " at eps 1e-5, " + fmt("%.2e", full.max_relative_error) +
              " at eps 1e-4 (worst " + full.worst_tensor + "); " + fmt("%.2f s", t)};
}

// Counter-overlap F1 on whitespace tokens of already-normalized strings.
double reference_f1(const std::string& pred, const std::string& gold) {
  std::map<std::string, int> p, g;
  std::istringstream a(pred), b(gold);
  int np = 0, ng = 0, common = 0;
  for (std::string w; a >> w; ++np) ++p[w];
  for (std::string w; b >> w; ++ng) ++g[w];
  if (np == 0 || ng == 0) return np == ng ? 1.0 : 0.0;
  for (const auto& [w, n] : p) common += std::min(n, g[w]);
  if (common == 0) return 0.0;
  const double prec = double(common) / np, rec = double(common) / ng;
  return 2 * prec * rec / (prec + rec);
}

Outcome metrics() {
  std::size_t failures = 0;
  failures += exact_match("Paris.", "paris") != 1.0 || f1_score("Paris.", "paris") != 1.0;
  failures += f1_score("the Eiffel Tower", "Eiffel Tower") != 1.0;
  failures += exact_match("red", "blue") != 0.0 || f1_score("red", "blue") != 0.0;
  std::mt19937_64 rng(303);
  const std::vector<std::string> pool{"red", "blue", "green", "tower", "paris", "river", "stone", "x"};
  for (int t = 0; t < 20; ++t) {
    std::string pred, gold;
    const int np = 1 + rng() % 5, ng = 1 + rng() % 5;
    for (int i = 0; i < np; ++i) pred += (i ? " " : "") + pool[rng() % pool.size()];
    for (int i = 0; i < ng; ++i) gold += (i ? " " : "") + pool[rng() % pool.size()];
    failures += std::abs(f1_score(pred, gold) - reference_f1(pred, gold)) > 1e-12;
  }
  return {failures == 0, "3 worked examples + 20 randomized cases, " + std::to_string(failures) + " failures"};
}

// ---------------------------------------------------------------------------

const EvalReport* find(const Report& r, const std::string& policy, std::size_t n_mis) {
  for (const auto& e : r.results)
    if (e.policy == policy && e.n_mis == n_mis) return &e;
  return nullptr;
}

double em(const Report& r, const std::string& policy, std::size_t n_mis) {
  const EvalReport* e = find(r, policy, n_mis);
  if (e == nullptr) throw std::runtime_error("report lacks " + policy + " at n_mis " + std::to_string(n_mis));
  return e->em;
}

struct PipelineRun {
  Report report, filtered;
  double seconds = 0.0;
};

PipelineRun run_pipeline(const RunConfig& config) {
  const auto t0 = Clock::now();
  stage_gen_corpus(config, std::cerr);
  stage_train(config, std::cerr);
  stage_identify_heads(config, std::cerr);
  PipelineRun run;
  run.report = stage_eval(config, {}, std::cerr);
  run.filtered = stage_eval(config, {{}, true}, std::cerr);
  run.seconds = seconds_since(t0);
  return run;
}

Outcome desk_scale(const PipelineRun& run) {
  const Report& r = run.report;
  const double clean_test = em(r, "naive_polluted", 0);
  const double clean = em(r, "naive_clean", 1), polluted = em(r, "naive_polluted", 1);
  const double cram = em(r, "cram", 1), cram_all = em(r, "cram_all", 1), excl = em(r, "exclusion", 1);
  const double gap = clean - polluted;
  const double recovery = gap > 0.0 ? (cram - polluted) / gap : 0.0;
  const bool pass = clean_test >= 95.0 && gap >= 30.0 && recovery >= 0.8 && cram >= cram_all && run.seconds <= 900.0;
  return {pass, "clean-test EM " + fmt("%.2f", clean_test) + " (>= 95), drop " + fmt("%.2f", gap) +
                    " (>= 30), recovery " + fmt("%.1f%%", 100.0 * recovery) + " (>= 80%), CrAM " +
                    fmt("%.2f", cram) + " vs CrAM-all " + fmt("%.2f", cram_all) + ", exclusion " +
                    fmt("%.2f", excl) + " (not gated), runtime " + fmt("%.0f s", run.seconds) + " (<= 900 s)"};
}

Outcome sweep_direction(const Report& r) {
  const double cram_drop = em(r, "cram", 1) - em(r, "cram", 3);
  const double naive_drop = em(r, "naive_polluted", 1) - em(r, "naive_polluted", 3);
  std::string per_level;
  for (std::size_t m = 1; m <= 3; ++m) {
    per_level += " m" + std::to_string(m) + " " + fmt("%.1f", em(r, "cram", m)) + "/" +
                 fmt("%.1f", em(r, "naive_polluted", m));
  }
  return {cram_drop < naive_drop, "EM decline 1->3: CrAM " + fmt("%.2f", cram_drop) + " vs naive_polluted " +
                                      fmt("%.2f", naive_drop) + " (CrAM/naive:" + per_level + ")"};
}

Outcome filtered_variant(const Report& r) {
  const double clean = em(r, "naive_clean", 1), polluted = em(r, "naive_polluted", 1), cram = em(r, "cram", 1);
  const double gap = clean - polluted;
  const bool pass = gap > 0.0 && cram - polluted >= 0.5 * gap;
  return {pass, "filtered n_mis=1: CrAM " + fmt("%.2f", cram) + ", naive_polluted " + fmt("%.2f", polluted) +
                    ", naive_clean " + fmt("%.2f", clean) + ", closes " +
                    fmt("%.1f%%", gap > 0.0 ? 100.0 * (cram - polluted) / gap : 0.0) + " of the gap (>= 50%)"};
}

Outcome reproducibility(const std::string& a, const std::string& b) {
  std::size_t compared = 0;
  std::vector<std::string> differing;
  for (const auto& e : fs::directory_iterator(a)) {
    const std::string name = e.path().filename().string();
    ++compared;
    if (!fs::exists(fs::path(b) / name) || slurp(e.path()) != slurp(fs::path(b) / name)) differing.push_back(name);
  }
  std::string detail = std::to_string(compared) + " files compared (corpus, checkpoint, head set, IE table, reports)";
  for (const auto& d : differing) detail += ", differs: " + d;
  return {differing.empty() && compared >= 15, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string root =
      argc > 1 ? argv[1] : (fs::temp_directory_path() / "cram_acceptance").string();
  fs::remove_all(root);

  std::map<int, Outcome> results;
  auto guarded = [&](int id, const std::function<Outcome()>& fn) {
    try {
      results[id] = fn();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("error: ") + e.what()};
    }
  };

  guarded(1, row_stochasticity);
  guarded(5, ie_oracle);
  guarded(6, gradient_check);
  guarded(7, metrics);

  RunConfig config;
  config.out_dir = (fs::path(root) / "run_a").string();
  PipelineRun run;
  bool pipeline_ok = false;
  try {
    run = run_pipeline(config);
    pipeline_ok = true;
  } catch (const std::exception& e) {
    for (int id : {2, 3, 4, 8, 9, 10, 11}) results[id] = {false, std::string("pipeline error: ") + e.what()};
  }

  if (pipeline_ok) {
    guarded(2, [&] {
      const Model model = load_checkpoint(RunPaths(config.out_dir).checkpoint());
      const Vocabulary vocab = read_vocabulary(RunPaths(config.out_dir).vocab());
      const auto set = read_corpus(RunPaths(config.out_dir).test_set(1, false));
      const auto heads = read_head_selection(RunPaths(config.out_dir).heads()).heads;
      return identity_invariance(model, vocab, {set.begin(), set.begin() + 100}, heads);
    });
    guarded(3, [&] {
      const Model model = load_checkpoint(RunPaths(config.out_dir).checkpoint());
      const Vocabulary vocab = read_vocabulary(RunPaths(config.out_dir).vocab());
      const auto set = read_corpus(RunPaths(config.out_dir).test_set(2, false));
      const auto heads = read_head_selection(RunPaths(config.out_dir).heads()).heads;
      return affine_invariance(model, vocab, {set.begin(), set.begin() + 100}, heads);
    });
    guarded(4, [&] {
      const Model model = load_checkpoint(RunPaths(config.out_dir).checkpoint());
      const Vocabulary vocab = read_vocabulary(RunPaths(config.out_dir).vocab());
      std::vector<std::vector<QAInstance>> sets;
      for (std::size_t m = 1; m <= 3; ++m) {
        auto set = read_corpus(RunPaths(config.out_dir).test_set(m, false));
        set.resize(50);
        sets.push_back(std::move(set));
      }
      return blackout(model, vocab, sets);
    });
    guarded(8, [&] { return desk_scale(run); });
    guarded(9, [&] { return sweep_direction(run.report); });
    guarded(10, [&] { return filtered_variant(run.filtered); });
    guarded(11, [&] {
      RunConfig again = config;
      again.out_dir = (fs::path(root) / "run_b").string();
      run_pipeline(again);
      return reproducibility(config.out_dir, again.out_dir);
    });
  }

  const std::map<int, std::string> names{
      {1, "row stochasticity"},        {2, "identity invariance"},   {3, "affine invariance"},
      {4, "zero-credibility blackout"}, {5, "IE oracle equivalence"}, {6, "gradient correctness"},
      {7, "metric correctness"},        {8, "desk-scale end-to-end"}, {9, "pollution sweep direction"},
      {10, "filtered misinformation"},  {11, "reproducibility"}};
  bool all = true;
  for (const auto& [id, name] : names) {
    const Outcome& o = results[id];
    all = all && o.pass;
    std::printf("[%s] %2d %-26s %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
  }
  std::fflush(stdout);
  return all ? 0 : 1;
}
