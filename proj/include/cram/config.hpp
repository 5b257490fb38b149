#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cram/corpus.hpp"
#include "cram/eval.hpp"
#include "cram/model.hpp"
#include "cram/train.hpp"

namespace cram {

// Everything a pipeline run depends on. Defaults reproduce the reference
// experiment.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  int jobs = 0;  // 0 = all cores

  std::size_t n_entities = 300;
  std::size_t n_relations = 16;
  std::size_t n_facts = 3000;
  InstanceOptions instance;  // evaluation instances
  SplitSizes splits;
  TrainingMix mix;

  ModelConfig model;
  TrainConfig train;

  double exclusion_threshold = 5.0;
  std::vector<double> multiplier_grid;
  ScoreSource score_source = ScoreSource::Ideal;
  std::string scores_path;

  RunConfig();
  void validate() const;
};

// Key names accepted by apply_setting, in a stable order.
const std::vector<std::string>& config_keys();

// Sets one key from its text value. Unknown keys and malformed values throw
// ConfigError naming the key.
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);

// Flat "key = value" lines; '#' starts a comment. `origin` labels errors.
void apply_config_text(RunConfig& config, std::string_view text, std::string_view origin);
void apply_config_file(RunConfig& config, const std::string& path);

inline constexpr std::string_view kEnvPrefix = "CRAM_";

// Applies CRAM_<KEY> variables (key upper-cased). Variables with the prefix
// that match no key are errors.
void apply_environment(RunConfig& config, char** envp);

// Every key with its current value, one "key = value" per line.
std::string dump_config(const RunConfig& config);

}  // namespace cram
