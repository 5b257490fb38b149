#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "cram/config.hpp"
#include "cram/errors.hpp"
#include "cram/pipeline.hpp"
#include "cram/tensor.hpp"

extern char** environ;

namespace {

enum ExitCode { kOk = 0, kUnexpected = 1, kConfig = 2, kData = 3, kNumeric = 4, kIo = 5 };

int exit_code(cram::ErrorCategory c) {
  switch (c) {
    case cram::ErrorCategory::Config: return kConfig;
    case cram::ErrorCategory::Data: return kData;
    case cram::ErrorCategory::Numeric: return kNumeric;
    case cram::ErrorCategory::Io: return kIo;
  }
  return kUnexpected;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Credibility-aware attention modification on a synthetic QA benchmark"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path, out, score_source, scores;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::size_t> n_mis;
  bool filtered = false;
  app.add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--out", out, "run directory");
  app.add_option("--seed", seed, "global seed");
  app.add_option("--jobs", jobs, "worker thread cap (0 = all cores)");
  app.add_option("--score-source", score_source, "credibility scores for eval")
      ->check(CLI::IsMember({"ideal", "ingested"}));
  app.add_option("--scores", scores, "JSON file of ingested scores");
  app.add_option("--n-mis", n_mis, "evaluate a single misinformation level")->check(CLI::Range(0, 3));
  app.add_flag("--filtered", filtered, "use the corpora with the correct answer removed");

  auto* gen = app.add_subcommand("gen-corpus", "write vocabulary, IE, validation and test corpora");
  auto* trn = app.add_subcommand("train", "train the reader and write model.ckpt and loss.csv");
  auto* ident = app.add_subcommand("identify-heads", "rank heads by IE and choose the head count");
  auto* ev = app.add_subcommand("eval", "evaluate every policy and write report.json and report.csv");
  auto* rep = app.add_subcommand("report", "print a saved report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    cram::RunConfig config;
    if (!config_path.empty()) cram::apply_config_file(config, config_path);
    cram::apply_environment(config, environ);
    if (!out.empty()) config.out_dir = out;
    if (seed) config.seed = *seed;
    if (jobs) config.jobs = *jobs;
    if (!score_source.empty()) config.score_source = cram::parse_score_source(score_source);
    if (!scores.empty()) config.scores_path = scores;
    if (n_mis && !*ev) config.instance.n_mis = *n_mis;
    config.validate();
    if (config.jobs > 0) cram::kernels::set_max_threads(config.jobs);

    if (*gen) {
      cram::stage_gen_corpus(config, std::cout);
    } else if (*trn) {
      cram::stage_train(config, std::cout);
    } else if (*ident) {
      cram::stage_identify_heads(config, std::cout);
    } else if (*ev) {
      cram::EvalOptions options;
      options.filtered = filtered || config.instance.filtered;
      if (n_mis) options.levels = {*n_mis};
      cram::stage_eval(config, options, std::cout);
    } else if (*rep) {
      cram::stage_report(config, filtered || config.instance.filtered, std::cout);
    }
  } catch (const cram::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return kUnexpected;
  }
  return kOk;
}
