#include "cram/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cram/checkpoint.hpp"
#include "cram/errors.hpp"
#include "cram/seed.hpp"

namespace cram {
namespace fs = std::filesystem;

RunPaths::RunPaths(std::string out_dir) : dir(std::move(out_dir)) {}

namespace {

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

void ensure_output_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  const std::string probe = join(dir, ".write_probe");
  {
    std::ofstream out(probe);
    if (!out) throw IoError("output directory '" + dir + "' is not writable");
  }
  fs::remove(probe, ec);
}

void require_file(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw IoError("missing '" + path + "'; " + hint);
}

Vocabulary load_checked_vocab(const RunConfig& config, const RunPaths& paths, const Universe& u) {
  require_file(paths.vocab(), "run gen-corpus with the same --out first");
  Vocabulary on_disk = read_vocabulary(paths.vocab());
  if (!(on_disk == u.vocab)) {
    throw InstanceError("vocabulary in '" + paths.vocab() + "' does not match seed " +
                        std::to_string(config.seed) + "; rerun gen-corpus");
  }
  return on_disk;
}

Model load_checked_model(const RunPaths& paths, const Vocabulary& vocab) {
  require_file(paths.checkpoint(), "run train with the same --out first");
  Model model = load_checkpoint(paths.checkpoint());
  if (model.config().vocab_size != vocab.size()) {
    throw DimensionError("checkpoint vocabulary size " + std::to_string(model.config().vocab_size) +
                         " does not match corpus vocabulary size " + std::to_string(vocab.size()));
  }
  return model;
}

std::vector<QAInstance> load_split(const std::string& path) {
  require_file(path, "run gen-corpus with the same --out first");
  return read_corpus(path);
}

InstanceOptions eval_options(const RunConfig& config, std::size_t n_mis, bool filtered) {
  InstanceOptions o = config.instance;
  o.n_mis = n_mis;
  o.filtered = filtered;
  return o;
}

}  // namespace

std::string RunPaths::vocab() const { return join(dir, "vocab.txt"); }
std::string RunPaths::ie_set() const { return join(dir, "ie.jsonl"); }
std::string RunPaths::validation_set() const { return join(dir, "validation.jsonl"); }
std::string RunPaths::test_set(std::size_t n_mis, bool filtered) const {
  return join(dir, std::string(filtered ? "test_filtered_m" : "test_m") + std::to_string(n_mis) + ".jsonl");
}
std::string RunPaths::checkpoint() const { return join(dir, "model.ckpt"); }
std::string RunPaths::loss() const { return join(dir, "loss.csv"); }
std::string RunPaths::ie_table() const { return join(dir, "ie_table.csv"); }
std::string RunPaths::heads() const { return join(dir, "heads.json"); }
std::string RunPaths::report_json(bool filtered) const {
  return join(dir, filtered ? "report_filtered.json" : "report.json");
}
std::string RunPaths::report_csv(bool filtered) const {
  return join(dir, filtered ? "report_filtered.csv" : "report.csv");
}

Universe build_universe(const RunConfig& config) {
  config.validate();
  Universe u;
  u.world = gen_world(derive_seed(config.seed, "world"), config.n_entities, config.n_relations, config.n_facts);
  u.vocab = Vocabulary::build(u.world);
  u.facts = split_dataset(u.world, config.splits, derive_seed(config.seed, "split"));
  return u;
}

std::vector<std::size_t> default_levels(bool filtered) {
  if (filtered) return {1, 2, 3};
  return {0, 1, 2, 3};
}

void stage_gen_corpus(const RunConfig& config, std::ostream& log) {
  const Universe u = build_universe(config);
  const RunPaths paths(config.out_dir);
  ensure_output_dir(paths.dir);

  write_vocabulary(u.vocab, paths.vocab());
  const InstanceOptions base = config.instance;
  write_corpus(make_instances(u.world, u.vocab, u.facts.ie, base, derive_seed(config.seed, "ie"), "ie-"),
               paths.ie_set());
  write_corpus(make_instances(u.world, u.vocab, u.facts.validation, base,
                              derive_seed(config.seed, "validation"), "val-"),
               paths.validation_set());
  // Every level shares the test facts and seed, so levels pair up instance by instance.
  const std::uint64_t test_seed = derive_seed(config.seed, "test");
  for (bool filtered : {false, true}) {
    for (std::size_t level : default_levels(filtered)) {
      const std::string prefix = std::string(filtered ? "test-f" : "test-") + "m" + std::to_string(level) + "-";
      write_corpus(make_instances(u.world, u.vocab, u.facts.test, eval_options(config, level, filtered),
                                  test_seed, prefix),
                   paths.test_set(level, filtered));
    }
  }
  log << "gen-corpus: vocab " << u.vocab.size() << ", ie " << u.facts.ie.size() << ", validation "
      << u.facts.validation.size() << ", test " << u.facts.test.size() << " per level, train facts "
      << u.facts.train.size() << " -> " << paths.dir << "\n";
}

TrainSummary stage_train(const RunConfig& config, std::ostream& log) {
  const Universe u = build_universe(config);
  const RunPaths paths(config.out_dir);
  const Vocabulary vocab = load_checked_vocab(config, paths, u);
  const auto clean_test = load_split(paths.test_set(0, false));
  ensure_output_dir(paths.dir);

  const auto data = make_training_set(u.world, vocab, u.facts.train, config.mix, derive_seed(config.seed, "train-data"));

  ModelConfig mc = config.model;
  mc.vocab_size = vocab.size();
  mc.seed = derive_seed(config.seed, "model-init");
  TrainConfig tc = config.train;
  tc.seed = derive_seed(config.seed, "train-order");

  log << "train: " << data.size() << " examples, " << tc.steps << " steps, " << mc.n_layers << " layers x "
      << mc.n_heads << " heads, d_model " << mc.d_model << "\n";
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 10);
  TrainResult result = train(init_model(mc), data, tc, [&](std::size_t step, double loss) {
    if (step % every == 0 || step + 1 == tc.steps) log << "  step " << step << " loss " << loss << "\n" << std::flush;
  });

  save_checkpoint(result.model, paths.checkpoint());
  write_loss_csv(result.trace, paths.loss());

  TrainSummary summary;
  if (!result.trace.empty()) {
    summary.initial_loss = result.trace.front().loss;
    summary.final_loss = result.trace.back().loss;
  }
  summary.clean_test_em =
      run_condition(result.model, vocab, clean_test, Policy::naive_polluted(), ScoreSource::Ideal).em;
  log << "train: loss " << summary.initial_loss << " -> " << summary.final_loss << "\n";
  log << "train: clean-test EM " << fmt2(summary.clean_test_em) << " (gate >= 95.00: "
      << (summary.clean_test_em >= 95.0 ? "pass" : "FAIL") << ")\n";
  log << "train: checkpoint " << checksum_hex(result.model.checksum()) << " -> " << paths.checkpoint() << "\n";
  return summary;
}

HeadSelection stage_identify_heads(const RunConfig& config, std::ostream& log) {
  const Universe u = build_universe(config);
  const RunPaths paths(config.out_dir);
  const Vocabulary vocab = load_checked_vocab(config, paths, u);
  const Model model = load_checked_model(paths, vocab);
  const auto ie_set = load_split(paths.ie_set());
  const auto validation = load_split(paths.validation_set());
  ensure_output_dir(paths.dir);

  const IeTable table = compute_ie_table(model, vocab, ie_set);
  export_ie_distribution(table, paths.ie_table());
  HeadSelection sel = select_head_count(model, vocab, table, validation, config.multiplier_grid);
  write_head_selection(sel, paths.heads());

  log << "identify-heads: " << ie_set.size() << " IE instances, m_pos " << sel.m_pos << ", k " << sel.k << "\n";
  for (const auto& c : sel.candidates) {
    log << "  k " << c.k << " validation EM " << fmt2(c.em) << " F1 " << fmt2(c.f1) << "\n";
  }
  log << "  heads:";
  for (const auto& h : sel.heads) log << " L" << h.layer << "H" << h.head;
  log << "\n";
  return sel;
}

std::vector<Policy> standard_policies(const RunConfig& config, const std::vector<HeadId>& heads) {
  return {Policy::naive_clean(), Policy::naive_polluted(), Policy::exclusion(config.exclusion_threshold),
          Policy::cram(heads), Policy::cram_all()};
}

Report stage_eval(const RunConfig& config, const EvalOptions& options, std::ostream& log) {
  if (config.score_source == ScoreSource::Ingested && config.scores_path.empty()) {
    throw ConfigError("score_source ingested requires a score file (--scores)");
  }
  const Universe u = build_universe(config);
  const RunPaths paths(config.out_dir);
  const Vocabulary vocab = load_checked_vocab(config, paths, u);
  const Model model = load_checked_model(paths, vocab);
  require_file(paths.heads(), "run identify-heads with the same --out first");
  const HeadSelection sel = read_head_selection(paths.heads());

  std::vector<std::size_t> levels = options.levels.empty() ? default_levels(options.filtered) : options.levels;
  std::vector<std::vector<QAInstance>> sets;
  for (std::size_t level : levels) {
    if (level > 3 || (options.filtered && level == 0)) {
      throw ConfigError("n_mis " + std::to_string(level) + " is not a generated test level");
    }
    sets.push_back(load_split(paths.test_set(level, options.filtered)));
    if (config.score_source == ScoreSource::Ingested) {
      const IngestReport ir = ingest_external_scores(config.scores_path, sets.back());
      if (ir.extra_entries > 0) {
        log << "eval: ignored " << ir.extra_entries << " score entries not in test level " << level << "\n";
      }
    }
  }
  ensure_output_dir(paths.dir);

  Report report;
  report.meta.model_checksum = checksum_hex(model.checksum());
  report.meta.corpus_seed = config.seed;
  report.meta.head_set = sel.heads;
  report.meta.grid = sel.multiplier_grid;
  for (const Policy& policy : standard_policies(config, sel.heads)) {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      EvalReport r = run_condition(model, vocab, sets[i], policy, config.score_source);
      r.n_mis = levels[i];
      report.results.push_back(std::move(r));
    }
  }
  serialize_report(report, paths.report_json(options.filtered), ReportFormat::Json);
  serialize_report(report, paths.report_csv(options.filtered), ReportFormat::Csv);

  print_report_table(report, log);
  for (std::size_t level : levels) {
    double cram = 0.0, polluted = 0.0;
    for (const auto& r : report.results) {
      if (r.n_mis != level) continue;
      if (r.policy == "cram") cram = r.em;
      if (r.policy == "naive_polluted") polluted = r.em;
    }
    log << "n_mis " << level << ": CrAM - naive_polluted EM = " << (cram >= polluted ? "+" : "")
        << fmt2(cram - polluted) << "\n";
  }
  return report;
}

void print_report_table(const Report& report, std::ostream& log) {
  log << "model " << report.meta.model_checksum << ", seed " << report.meta.corpus_seed << ", "
      << report.meta.head_set.size() << " heads\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %-9s %5s %7s %7s %6s\n", "policy", "scores", "n_mis", "EM", "F1", "n");
  log << buf;
  for (const auto& r : report.results) {
    std::snprintf(buf, sizeof buf, "%-16s %-9s %5zu %7.2f %7.2f %6zu\n", r.policy.c_str(),
                  std::string(to_string(r.score_source)).c_str(), r.n_mis, r.em, r.f1, r.n);
    log << buf;
  }
}

void stage_report(const RunConfig& config, bool filtered, std::ostream& log) {
  const RunPaths paths(config.out_dir);
  require_file(paths.report_json(filtered), "run eval with the same --out first");
  print_report_table(read_report_json(paths.report_json(filtered)), log);
}

}  // namespace cram
