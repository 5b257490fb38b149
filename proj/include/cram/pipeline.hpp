#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "cram/config.hpp"
#include "cram/corpus.hpp"
#include "cram/eval.hpp"
#include "cram/influence.hpp"
#include "cram/train.hpp"

namespace cram {

// File layout of one run directory.
struct RunPaths {
  explicit RunPaths(std::string out_dir);

  std::string dir;
  std::string vocab() const;
  std::string ie_set() const;
  std::string validation_set() const;
  std::string test_set(std::size_t n_mis, bool filtered) const;
  std::string checkpoint() const;
  std::string loss() const;
  std::string ie_table() const;
  std::string heads() const;
  std::string report_json(bool filtered) const;
  std::string report_csv(bool filtered) const;
};

// World, vocabulary and fact splits regenerated from the config seeds.
struct Universe {
  World world;
  Vocabulary vocab;
  FactSplits facts;
};

Universe build_universe(const RunConfig& config);

// Misinformation levels written by gen-corpus and evaluated by default.
std::vector<std::size_t> default_levels(bool filtered);

// Writes the vocabulary, IE and validation sets and every test level.
void stage_gen_corpus(const RunConfig& config, std::ostream& log);

struct TrainSummary {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double clean_test_em = 0.0;
};

// Trains the reader, then writes the checkpoint and loss trace. Requires the
// corpus from gen-corpus.
TrainSummary stage_train(const RunConfig& config, std::ostream& log);

// Computes the IE table and chosen head set from the saved checkpoint.
HeadSelection stage_identify_heads(const RunConfig& config, std::ostream& log);

struct EvalOptions {
  std::vector<std::size_t> levels;  // empty = every level on disk
  bool filtered = false;
};

// Runs every policy on the requested test levels and writes both report files.
Report stage_eval(const RunConfig& config, const EvalOptions& options, std::ostream& log);

// Prints a saved report as a table.
void stage_report(const RunConfig& config, bool filtered, std::ostream& log);

// Policies in report order.
std::vector<Policy> standard_policies(const RunConfig& config, const std::vector<HeadId>& heads);

void print_report_table(const Report& report, std::ostream& log);

}  // namespace cram
