#include "cram/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

#include "cram/errors.hpp"
#include "cram/influence.hpp"

namespace cram {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) +
                    "' as " + std::string(expected));
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

int parse_int(std::string_view key, std::string_view v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Prefer the shortest text that reads back to the same value.
  for (int prec = 1; prec < 17; ++prec) {
    char shorter[40];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
    if (std::strtod(shorter, nullptr) == v) return shorter;
  }
  return buf;
}

struct Field {
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(RunConfig&)> get;
};

template <class Member>
Field size_field(Member member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) {
            std::invoke(member, c) = static_cast<std::size_t>(parse_u64(k, v));
          },
          [member](RunConfig& c) { return std::to_string(std::invoke(member, c)); }};
}

template <class Member>
Field double_field(Member member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) {
            std::invoke(member, c) = parse_double(k, v);
          },
          [member](RunConfig& c) { return fmt_double(std::invoke(member, c)); }};
}

#define CRAM_SIZE(name, expr) {name, size_field([](RunConfig& c) -> std::size_t& { return expr; })}
#define CRAM_DOUBLE(name, expr) {name, double_field([](RunConfig& c) -> double& { return expr; })}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"seed",
       {[](RunConfig& c, std::string_view k, std::string_view v) { c.seed = parse_u64(k, v); },
        [](RunConfig& c) { return std::to_string(c.seed); }}},
      {"out",
       {[](RunConfig& c, std::string_view, std::string_view v) { c.out_dir = std::string(v); },
        [](RunConfig& c) { return c.out_dir; }}},
      {"jobs",
       {[](RunConfig& c, std::string_view k, std::string_view v) { c.jobs = parse_int(k, v); },
        [](RunConfig& c) { return std::to_string(c.jobs); }}},
      CRAM_SIZE("n_entities", c.n_entities),
      CRAM_SIZE("n_relations", c.n_relations),
      CRAM_SIZE("n_facts", c.n_facts),
      CRAM_SIZE("n_high", c.instance.n_high),
      CRAM_SIZE("n_mis", c.instance.n_mis),
      CRAM_SIZE("filler_per_doc", c.instance.filler_per_doc),
      CRAM_DOUBLE("assertive_rate", c.instance.assertive_rate),
      CRAM_SIZE("ie_set_size", c.splits.ie),
      CRAM_SIZE("validation_size", c.splits.validation),
      CRAM_SIZE("test_size", c.splits.test),
      CRAM_SIZE("n_layers", c.model.n_layers),
      CRAM_SIZE("n_heads", c.model.n_heads),
      CRAM_SIZE("d_model", c.model.d_model),
      CRAM_SIZE("d_k", c.model.d_k),
      CRAM_SIZE("d_v", c.model.d_v),
      CRAM_SIZE("d_ff", c.model.d_ff),
      CRAM_SIZE("max_seq_len", c.model.max_seq_len),
      CRAM_SIZE("train_examples", c.mix.n_examples),
      CRAM_SIZE("train_max_high", c.mix.max_high),
      CRAM_SIZE("train_max_mis", c.mix.max_mis),
      CRAM_DOUBLE("train_filtered_rate", c.mix.filtered_rate),
      CRAM_DOUBLE("gap_rate", c.mix.gap_rate),
      CRAM_SIZE("max_position_gap", c.mix.max_position_gap),
      CRAM_DOUBLE("drop_rate", c.mix.drop_rate),
      CRAM_SIZE("steps", c.train.steps),
      CRAM_SIZE("batch_size", c.train.batch_size),
      CRAM_DOUBLE("learning_rate", c.train.learning_rate),
      CRAM_SIZE("warmup_steps", c.train.warmup_steps),
      CRAM_DOUBLE("gradient_clip", c.train.gradient_clip),
      {"optimizer",
       {[](RunConfig& c, std::string_view k, std::string_view v) {
          if (v == "adam") c.train.optimizer = OptimizerKind::Adam;
          else if (v == "sgd") c.train.optimizer = OptimizerKind::Sgd;
          else bad_value(k, v, "adam or sgd");
        },
        [](RunConfig& c) { return std::string(c.train.optimizer == OptimizerKind::Adam ? "adam" : "sgd"); }}},
      {"lr_schedule",
       {[](RunConfig& c, std::string_view k, std::string_view v) {
          if (v == "linear_warmup") c.train.lr_schedule = LrSchedule::LinearWarmup;
          else if (v == "constant") c.train.lr_schedule = LrSchedule::Constant;
          else bad_value(k, v, "linear_warmup or constant");
        },
        [](RunConfig& c) {
          return std::string(c.train.lr_schedule == LrSchedule::LinearWarmup ? "linear_warmup" : "constant");
        }}},
      CRAM_DOUBLE("exclusion_threshold", c.exclusion_threshold),
      {"multiplier_grid",
       {[](RunConfig& c, std::string_view k, std::string_view v) {
          c.multiplier_grid.clear();
          std::string item;
          std::istringstream in{std::string(v)};
          while (std::getline(in, item, ',')) c.multiplier_grid.push_back(parse_double(k, trim(item)));
        },
        [](RunConfig& c) {
          std::string s;
          for (double g : c.multiplier_grid) s += (s.empty() ? "" : ",") + fmt_double(g);
          return s;
        }}},
      {"score_source",
       {[](RunConfig& c, std::string_view, std::string_view v) { c.score_source = parse_score_source(v); },
        [](RunConfig& c) { return std::string(to_string(c.score_source)); }}},
      {"scores",
       {[](RunConfig& c, std::string_view, std::string_view v) { c.scores_path = std::string(v); },
        [](RunConfig& c) { return c.scores_path; }}},
      {"filtered",
       {[](RunConfig& c, std::string_view k, std::string_view v) { c.instance.filtered = parse_bool(k, v); },
        [](RunConfig& c) { return std::string(c.instance.filtered ? "true" : "false"); }}},
  };
  return table;
}

#undef CRAM_SIZE
#undef CRAM_DOUBLE

}  // namespace

RunConfig::RunConfig() {
  instance.filler_per_doc = 0;
  instance.assertive_rate = 0.7;
  mix.filler_per_doc = 0;
  mix.n_examples = 64000;
  mix.max_position_gap = 16;
  model.d_model = 64;
  model.d_k = 8;
  model.d_v = 8;
  model.d_ff = 128;
  model.max_seq_len = 256;
  train.steps = 4000;
  train.learning_rate = 3e-3;
  multiplier_grid = default_multiplier_grid();
}

void RunConfig::validate() const {
  if (n_facts < splits.ie + splits.validation + splits.test + 1) {
    throw ConfigError("n_facts too small for the requested split sizes");
  }
  if (instance.n_high == 0) throw ConfigError("n_high must be > 0");
  if (instance.n_mis > 3) throw ConfigError("n_mis must lie in 0..3");
  if (!(instance.assertive_rate >= 0.0 && instance.assertive_rate <= 1.0)) {
    throw ConfigError("assertive_rate must lie in [0, 1]");
  }
  if (!(exclusion_threshold >= 0.0 && exclusion_threshold <= 10.0)) {
    throw ConfigError("exclusion_threshold must lie in [0, 10]");
  }
  if (multiplier_grid.empty()) throw ConfigError("multiplier_grid must not be empty");
  if (jobs < 0) throw ConfigError("jobs must be >= 0");
  if (out_dir.empty()) throw ConfigError("out must not be empty");
  ModelConfig m = model;
  m.vocab_size = std::max<std::size_t>(m.vocab_size, 1);
  m.validate();
  train.validate();
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void apply_setting(RunConfig& config, std::string_view key, std::string_view value) {
  for (const auto& [name, f] : fields()) {
    if (name == key) {
      f.set(config, key, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_config_text(RunConfig& config, std::string_view text, std::string_view origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = std::string(origin) + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    try {
      apply_setting(config, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& config, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(config, buf.str(), path);
}

void apply_environment(RunConfig& config, char** envp) {
  if (envp == nullptr) return;
  for (char** e = envp; *e != nullptr; ++e) {
    const std::string_view entry(*e);
    if (!entry.starts_with(kEnvPrefix)) continue;
    const auto eq = entry.find('=');
    if (eq == std::string_view::npos) continue;
    std::string key(entry.substr(kEnvPrefix.size(), eq - kEnvPrefix.size()));
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    try {
      apply_setting(config, key, entry.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("environment variable " + std::string(entry.substr(0, eq)) + ": " + e.what());
    }
  }
}

std::string dump_config(const RunConfig& config) {
  RunConfig copy = config;
  std::string out;
  for (const auto& [name, f] : fields()) out += name + " = " + f.get(copy) + "\n";
  return out;
}

}  // namespace cram
