// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: gen-tasks, train, eval, theory-check, ablate.
//
// Configuration files hold `key = value` lines; `#` starts a comment. Lists
// are comma separated. Precedence is flags > --set overrides > file > defaults.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "metainterp/bilevel.hpp"
#include "metainterp/episodes.hpp"

namespace mi::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct RunConfig {
  episodes::GenConfig gen;
  bilevel::TrainConfig train;
  bilevel::ModelSpec model;
  std::uint64_t seed = 0;
  std::size_t test_episodes = 1000;  // meta-test episodes per ablation run
  std::size_t seeds = 5;             // ablation seeds
  bool val_batch_set = false;        // otherwise val_batch follows batch
};

/// Every recognized key, in the order to_text writes them.
const std::vector<std::string>& config_keys();

/// Throws ConfigError naming the key on an unknown key or a bad value.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_key(const RunConfig& cfg, const std::string& key);

/// Applies the lines of `text` on top of `cfg`. Throws ConfigError with the
/// line number on a malformed line or an unknown key.
void apply_text(RunConfig& cfg, const std::string& text);
void apply_file(RunConfig& cfg, const std::string& path);
/// "key=value" override.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// Fills derived fields and validates the generator, trainer and model parts.
void finalize(RunConfig& cfg);

/// Every key with its resolved value; apply_text(to_text(c)) reproduces c.
std::string to_text(const RunConfig& cfg);

/// --threads default: META_INTERP_THREADS when set to a positive integer, else 1.
unsigned default_threads();

/// Model initialization for a run seed; the same seed gives the same weights.
protonet::Model initial_model(const RunConfig& cfg, std::size_t input_dims);

/// Trains on `data` and returns the meta-test accuracy of the best snapshot.
protonet::AccuracyResult train_and_test(const RunConfig& cfg, const episodes::TaskDataset& data,
                                        unsigned threads);

/// Ablation settings of an axis: strategy, layer, cardinality, setfunc,
/// num-train-tasks, num-val-tasks. Each setting is a list of key overrides.
struct AblationSetting {
  std::string label;
  std::vector<std::pair<std::string, std::string>> overrides;
};
std::vector<AblationSetting> ablation_settings(const std::string& axis, const RunConfig& cfg);

/// Runs one command. args excludes the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mi::cli
