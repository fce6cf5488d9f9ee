// SPDX-License-Identifier: Apache-2.0
#include "metainterp/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <type_traits>

#include "CLI11.hpp"
#include "json.hpp"
#include "metainterp/checks.hpp"
#include "metainterp/errors.hpp"

namespace mi::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("key '" + key + "': expected " + what + ", got '" + value + "'");
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) bad_value(key, v, "a number");
  return d;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
    bad_value(key, v, "a nonnegative integer");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

int to_int(const std::string& key, const std::string& v) {
  const auto u = to_u64(key, v);
  if (u > 1000000) bad_value(key, v, "an integer up to 1e6");
  return static_cast<int>(u);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split_list(v)) out.push_back(to_double(key, s));
  return out;
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  for (const auto& s : split_list(v)) out.push_back(to_size(key, s));
  return out;
}

std::string show(double d) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

template <class T>
std::string show_list(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += show(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

const char* distance_name(protonet::Distance d) {
  return d == protonet::Distance::kEuclidean ? "euclidean" : "squared_euclidean";
}

protonet::Distance parse_distance(const std::string& key, const std::string& v) {
  if (v == "squared_euclidean") return protonet::Distance::kSquaredEuclidean;
  if (v == "euclidean") return protonet::Distance::kEuclidean;
  bad_value(key, v, "squared_euclidean or euclidean");
}

struct Key {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MI_NUM(name, field, conv, showfn)                                              \
  {name,                                                                               \
   {[](RunConfig& c, const std::string& k, const std::string& v) { c.field = conv(k, v); }, \
    [](const RunConfig& c) { return showfn(c.field); }}}

std::string show_size(std::size_t v) { return std::to_string(v); }
std::string show_int(int v) { return std::to_string(v); }
std::string show_bool(bool v) { return v ? "true" : "false"; }

// Keys in the order to_text writes them.
const std::vector<std::pair<std::string, Key>>& key_table() {
  static const std::vector<std::pair<std::string, Key>> table = {
      MI_NUM("seed", seed, to_u64, show_size),
      // Task generator.
      MI_NUM("way", gen.way, to_int, show_int),
      MI_NUM("shots", gen.shots, to_int, show_int),
      MI_NUM("queries", gen.queries, to_int, show_int),
      MI_NUM("dims", gen.dims, to_size, show_size),
      MI_NUM("informative", gen.informative, to_size, show_size),
      MI_NUM("train_tasks", gen.train_tasks, to_int, show_int),
      MI_NUM("val_tasks", gen.val_tasks, to_int, show_int),
      MI_NUM("test_tasks", gen.test_tasks, to_int, show_int),
      MI_NUM("center_scale", gen.center_scale, to_double, show),
      MI_NUM("spread", gen.spread, to_double, show),
      MI_NUM("nuisance_scale", gen.nuisance_scale, to_double, show),
      MI_NUM("angles", gen.angles, to_doubles, show_list<double>),
      MI_NUM("scales", gen.scales, to_doubles, show_list<double>),
      MI_NUM("offsets", gen.offsets, to_doubles, show_list<double>),
      // Training.
      {"method",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.train.method = bilevel::parse_method(v);
        },
        [](const RunConfig& c) { return std::string(bilevel::method_name(c.train.method)); }}},
      MI_NUM("alpha", train.alpha, to_double, show),
      MI_NUM("eta", train.eta, to_double, show),
      MI_NUM("update_period", train.update_period, to_size, show_size),
      MI_NUM("batch", train.batch, to_size, show_size),
      {"val_batch",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.val_batch = to_size(k, v);
          c.val_batch_set = true;
        },
        [](const RunConfig& c) { return std::to_string(c.train.val_batch); }}},
      MI_NUM("neumann", train.neumann, to_size, show_size),
      MI_NUM("max_iters", train.max_iters, to_size, show_size),
      {"theta_optimizer",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.train.theta_opt = bilevel::parse_optimizer(v);
        },
        [](const RunConfig& c) { return std::string(bilevel::optimizer_name(c.train.theta_opt)); }}},
      {"lambda_optimizer",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.train.lambda_opt = bilevel::parse_optimizer(v);
        },
        [](const RunConfig& c) { return std::string(bilevel::optimizer_name(c.train.lambda_opt)); }}},
      {"hyper_schedule",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.train.hyper_schedule = bilevel::parse_schedule(v);
        },
        [](const RunConfig& c) { return std::string(bilevel::schedule_name(c.train.hyper_schedule)); }}},
      MI_NUM("patience", train.patience, to_size, show_size),
      MI_NUM("eval_every", train.eval_every, to_size, show_size),
      MI_NUM("eval_episodes", train.eval_episodes, to_size, show_size),
      MI_NUM("mix_a", train.mix_a, to_double, show),
      MI_NUM("mix_b", train.mix_b, to_double, show),
      MI_NUM("lambda_updates", train.lambda_updates, to_bool, show_bool),
      MI_NUM("record_wall_time", train.record_wall_time, to_bool, show_bool),
      {"strategy",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.train.interp.strategy = interpolate::parse_strategy(v);
        },
        [](const RunConfig& c) {
          return std::string(interpolate::strategy_name(c.train.interp.strategy));
        }}},
      MI_NUM("cardinality", train.interp.cardinality, to_size, show_size),
      // Architecture.
      MI_NUM("hidden", model.hidden, to_sizes, show_list<std::size_t>),
      MI_NUM("out_width", model.out_width, to_size, show_size),
      MI_NUM("split", model.split, to_size, show_size),
      {"setfn",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.model.setfn = setfunc::parse_kind(v);
        },
        [](const RunConfig& c) { return std::string(setfunc::kind_name(c.model.setfn)); }}},
      MI_NUM("head_width", model.head_width, to_size, show_size),
      MI_NUM("heads", model.heads, to_size, show_size),
      MI_NUM("dropout", model.dropout, to_double, show),
      MI_NUM("deepsets_pre", model.deepsets_pre, to_sizes, show_list<std::size_t>),
      MI_NUM("deepsets_post", model.deepsets_post, to_sizes, show_list<std::size_t>),
      MI_NUM("simple_scale", model.simple_scale, to_double, show),
      {"distance",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.model.distance = parse_distance(k, v);
        },
        [](const RunConfig& c) { return std::string(distance_name(c.model.distance)); }}},
      // Evaluation of ablation runs.
      MI_NUM("test_episodes", test_episodes, to_size, show_size),
      MI_NUM("seeds", seeds, to_size, show_size),
  };
  return table;
}

#undef MI_NUM

const Key& find_key(const std::string& key) {
  for (const auto& [name, k] : key_table()) {
    if (name == key) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// ---------------------------------------------------------------------------
// Command helpers.

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  unsigned threads = 1;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) apply_file(cfg, c.config);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed_given) cfg.seed = c.seed;
  return cfg;
}

void write_prototypes(const fs::path& path, const protonet::Model& m, const RunConfig& cfg,
                      const episodes::TaskDataset& data) {
  std::ofstream out(path);
  const std::size_t width = protonet::output_width(m.encoder);
  out << "task,class,source";
  for (std::size_t j = 0; j < width; ++j) out << ",p" << j;
  out << '\n';
  auto emit = [&](std::size_t task, const char* source, const Tensor& protos) {
    for (std::size_t k = 0; k < protos.rows(); ++k) {
      out << task << ',' << k << ',' << source;
      for (std::size_t j = 0; j < protos.cols(); ++j) out << ',' << show(protos(k, j));
      out << '\n';
    }
  };
  const bool fused = bilevel::has_set_function(cfg.train.method);
  Rng rng = make_stream(cfg.seed, {0x70726f});
  const auto& tasks = data.meta_train;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& task = tasks[t];
    const Tensor emb = protonet::embed(m, episodes::features_matrix(task.support));
    emit(t, "original", protonet::prototypes(emb, protonet::labels_of(task.support), task.way));
    if (fused && tasks.size() > 1) {
      const auto& other = tasks[(t + 1) % tasks.size()];
      const auto draws = interpolate::draw_interp(task, other, cfg.train.interp,
                                                  protonet::interp_width(m.encoder), rng);
      emit(t, "interpolated", interpolate::interpolated_prototypes(m, task, other, draws));
    }
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

json run_report(const RunConfig& cfg, const bilevel::TrainState& s, bool finished) {
  json j = {{"method", bilevel::method_name(cfg.train.method)},
            {"seed", cfg.seed},
            {"iterations", s.iter},
            {"finished", finished},
            {"early_stopped", s.stopped},
            {"best_iter", s.best_iter},
            {"best_val_acc", s.best_acc}};
  std::vector<const bilevel::MetricRow*> rows;
  for (const auto& r : s.history)
    if (!std::isnan(r.train_loss)) rows.push_back(&r);
  if (!rows.empty()) {
    const auto* first = rows.front();
    const auto* last = rows.back();
    double min_val = last->val_loss;
    for (const auto* r : rows) min_val = std::min(min_val, r->val_loss);
    j["loss_curve"] = {{"first_train_loss", first->train_loss},
                       {"last_train_loss", last->train_loss},
                       {"first_val_loss", first->val_loss},
                       {"last_val_loss", last->val_loss},
                       {"min_val_loss", min_val},
                       {"generalization_gap", last->val_loss - last->train_loss}};
  }
  return j;
}

int cmd_gen_tasks(const Common& c, const std::string& out_path, std::ostream& out) {
  RunConfig cfg = resolve(c);
  finalize(cfg);
  cfg.gen.seed = cfg.seed;
  const auto data = episodes::gen_gaussian_tasks(cfg.gen);
  if (const auto parent = fs::path(out_path).parent_path(); !parent.empty()) {
    fs::create_directories(parent);
  }
  episodes::save_tasks(data, out_path);
  out << "tasks: train=" << data.meta_train.size() << " val=" << data.meta_val.size()
      << " test=" << data.meta_test.size() << " way=" << data.way << " dims=" << data.dims << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string tasks, out_dir, method;
  bool resume = false;
  std::size_t stop_after = 0;  // 0: run to completion
};

int cmd_train(const Common& c, const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = resolve(c);
  if (!a.method.empty()) cfg.train.method = bilevel::parse_method(a.method);
  finalize(cfg);
  cfg.train.threads = c.threads;
  const auto data = episodes::load_tasks(a.tasks);

  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  const std::string text = to_text(cfg);
  bilevel::TrainState state;
  if (a.resume) {
    if (!fs::exists(dir / "final.ckpt")) throw ConfigError("--resume: no final.ckpt in " + a.out_dir);
    if (!fs::exists(dir / "config.txt") || read_file((dir / "config.txt").string()) != text) {
      throw ConfigError("--resume: configuration differs from the interrupted run");
    }
    state = bilevel::load_state(Checkpoint::load((dir / "final.ckpt").string()));
  } else {
    state = bilevel::init_state(initial_model(cfg, data.dims), cfg.train);
    write_file(dir / "config.txt", text);
  }

  const std::size_t stop_at = a.stop_after == 0 ? std::numeric_limits<std::size_t>::max() : a.stop_after;
  bilevel::run(state, data, cfg.train, stop_at);
  const bool done = bilevel::finished(state, cfg.train);

  bilevel::write_metrics_csv((dir / "metrics.csv").string(), state.history);
  bilevel::save_state(state).save((dir / "final.ckpt").string());
  Checkpoint best;
  bilevel::put_model(best, state.best);
  best.save((dir / "best.ckpt").string());
  write_prototypes(dir / "prototypes.csv", state.best, cfg, data);
  write_file(dir / "report.json", run_report(cfg, state, done).dump(2) + "\n");

  out << bilevel::method_name(cfg.train.method) << ": " << state.iter << " iterations, best val acc "
      << std::fixed << std::setprecision(4) << state.best_acc << " at " << state.best_iter
      << (done ? "" : " (stopped early on request)") << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt, tasks, split = "test", out_path;
  std::size_t episodes = 1000;
  std::size_t seeds = 1;
  int shots = 0;  // 0: taken from the tasks
};

int cmd_eval(const Common& c, const EvalArgs& a, std::ostream& out) {
  const protonet::Model m = bilevel::get_model(Checkpoint::load(a.ckpt));
  const auto data = episodes::load_tasks(a.tasks);
  const auto& tasks = a.split == "train" ? data.meta_train : a.split == "val" ? data.meta_val : data.meta_test;
  if (tasks.empty()) throw ConfigError("split '" + a.split + "' has no tasks");
  const int shots = a.shots > 0 ? a.shots : protonet::shots_of(tasks.front());
  json runs = json::array();
  std::vector<double> means;
  protonet::AccuracyResult single;
  for (std::size_t s = 0; s < a.seeds; ++s) {
    const std::uint64_t seed = c.seed + s;
    single = protonet::accuracy(m, tasks, a.episodes, shots, seed, c.threads);
    means.push_back(single.mean);
    runs.push_back({{"seed", seed}, {"accuracy", single.mean}, {"ci95", single.ci95}});
  }
  // One seed: the interval is over episodes; several: over per-seed means.
  const auto agg = a.seeds == 1 ? single : protonet::aggregate_runs(means);
  const json j = {{"checkpoint", a.ckpt}, {"split", a.split},     {"episodes", a.episodes},
                  {"shots", shots},       {"seeds", a.seeds},     {"runs", runs},
                  {"accuracy", agg.mean}, {"ci95", agg.ci95}};
  out << "accuracy " << std::fixed << std::setprecision(4) << agg.mean << " +- " << agg.ci95 << '\n';
  out << j.dump(2) << '\n';
  if (!a.out_path.empty()) {
    if (const auto parent = fs::path(a.out_path).parent_path(); !parent.empty()) {
      fs::create_directories(parent);
    }
    write_file(a.out_path, j.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_theory_check(const Common& c, const std::string& check, const std::string& out_path,
                     std::ostream& out) {
  std::vector<std::string> names;
  if (check == "all") {
    names = checks::check_names();
  } else {
    names.push_back(check);
  }
  std::vector<checks::CheckResult> results;
  for (const auto& n : names) {
    results.push_back(checks::run_check(n, c.seed, c.threads));
    const auto& r = results.back();
    out << (r.pass ? "PASS " : "FAIL ") << r.name << '\n';
    for (const auto& row : r.table) out << "  " << row << '\n';
  }
  const json rep = checks::report(results);
  if (out_path.empty()) {
    out << rep.dump(2) << '\n';
  } else {
    if (const auto parent = fs::path(out_path).parent_path(); !parent.empty()) {
      fs::create_directories(parent);
    }
    write_file(out_path, rep.dump(2) + "\n");
  }
  return rep["pass"].get<bool>() ? kExitOk : kExitFailure;
}

episodes::TaskDataset restrict_tasks(episodes::TaskDataset data, const RunConfig& cfg) {
  auto cut = [](std::vector<episodes::Task>& tasks, int n, const char* what) {
    if (static_cast<std::size_t>(n) > tasks.size()) {
      throw ConfigError(std::string("asked for ") + std::to_string(n) + " " + what + " tasks, file has " +
                        std::to_string(tasks.size()));
    }
    tasks.resize(static_cast<std::size_t>(n));
  };
  cut(data.meta_train, cfg.gen.train_tasks, "meta-train");
  cut(data.meta_val, cfg.gen.val_tasks, "meta-validation");
  return data;
}

int cmd_ablate(const Common& c, const std::string& axis, const std::string& tasks_path,
               const std::string& out_path, std::size_t seeds_flag, std::ostream& out) {
  RunConfig base = resolve(c);
  finalize(base);
  const auto settings = ablation_settings(axis, base);
  const std::size_t seeds = seeds_flag > 0 ? seeds_flag : base.seeds;
  std::optional<episodes::TaskDataset> file_data;
  if (!tasks_path.empty()) file_data = episodes::load_tasks(tasks_path);

  if (const auto parent = fs::path(out_path).parent_path(); !parent.empty()) {
    fs::create_directories(parent);
  }
  std::ofstream csv(out_path);
  if (!csv) throw Error("cannot open '" + out_path + "' for writing");
  csv << "axis,setting,seed,test_acc,test_ci\n";
  for (const auto& s : settings) {
    RunConfig cfg = base;
    for (const auto& [k, v] : s.overrides) set_key(cfg, k, v);
    finalize(cfg);
    for (std::size_t i = 0; i < seeds; ++i) {
      RunConfig run = cfg;
      run.seed = base.seed + i;
      run.gen.seed = run.seed;
      const auto data = file_data ? restrict_tasks(*file_data, run) : episodes::gen_gaussian_tasks(run.gen);
      const auto acc = train_and_test(run, data, c.threads);
      csv << axis << ',' << s.label << ',' << run.seed << ',' << show(acc.mean) << ',' << show(acc.ci95)
          << '\n';
      csv.flush();
      out << axis << ' ' << s.label << " seed " << run.seed << ": " << std::fixed << std::setprecision(4)
          << acc.mean << " +- " << acc.ci95 << '\n';
    }
  }
  if (!csv) throw Error("failed writing '" + out_path + "'");
  return kExitOk;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& [name, k] : key_table()) out.push_back(name);
    return out;
  }();
  return keys;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  try {
    find_key(key).set(cfg, key, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

std::string get_key(const RunConfig& cfg, const std::string& key) { return find_key(key).get(cfg); }

void apply_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      set_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(number) + ": " + e.what());
    }
  }
}

void apply_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_text(cfg, ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void finalize(RunConfig& cfg) {
  if (!cfg.val_batch_set) cfg.train.val_batch = cfg.train.batch;
  cfg.gen.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  episodes::validate(cfg.gen);
  bilevel::validate(cfg.train);
  if (cfg.model.split > cfg.model.hidden.size()) {
    throw ConfigError("split " + std::to_string(cfg.model.split) + " exceeds the " +
                      std::to_string(cfg.model.hidden.size() + 1) + " encoder layers");
  }
  if (cfg.model.out_width == 0) throw ConfigError("out_width must be positive");
  if (cfg.model.dropout < 0.0 || cfg.model.dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (cfg.test_episodes == 0) throw ConfigError("test_episodes must be positive");
  if (cfg.seeds == 0) throw ConfigError("seeds must be positive");
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, k] : key_table()) out += name + " = " + k.get(cfg) + "\n";
  return out;
}

unsigned default_threads() {
  const char* v = std::getenv("META_INTERP_THREADS");
  if (v == nullptr) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) return 1;
  return static_cast<unsigned>(std::min<long>(n, 256));
}

protonet::Model initial_model(const RunConfig& cfg, std::size_t input_dims) {
  Rng rng = make_stream(cfg.seed, {0x6d6f64});
  return bilevel::build_model(cfg.model, input_dims, cfg.train.method, rng);
}

protonet::AccuracyResult train_and_test(const RunConfig& cfg, const episodes::TaskDataset& data,
                                        unsigned threads) {
  bilevel::TrainConfig tc = cfg.train;
  tc.threads = threads;
  const auto result = bilevel::meta_train(data, initial_model(cfg, data.dims), tc);
  if (data.meta_test.empty()) throw ConfigError("dataset has no meta-test tasks");
  return protonet::accuracy(result.best, data.meta_test, cfg.test_episodes,
                            protonet::shots_of(data.meta_test.front()), cfg.seed ^ 0x74657374ULL,
                            threads);
}

std::vector<AblationSetting> ablation_settings(const std::string& axis, const RunConfig& cfg) {
  std::vector<AblationSetting> out;
  auto single = [&](const std::string& key, const std::string& value) {
    out.push_back({value, {{key, value}}});
  };
  if (axis == "strategy") {
    for (auto s : {interpolate::Strategy::kSupport, interpolate::Strategy::kQuery,
                   interpolate::Strategy::kSupportAndQuery, interpolate::Strategy::kSupportNoise}) {
      single("strategy", interpolate::strategy_name(s));
    }
  } else if (axis == "layer") {
    for (std::size_t l = 0; l <= cfg.model.hidden.size(); ++l) single("split", std::to_string(l));
  } else if (axis == "cardinality") {
    for (std::size_t n = 2; n <= 5; ++n) single("cardinality", std::to_string(n));
  } else if (axis == "setfunc") {
    single("setfn", setfunc::kind_name(setfunc::Kind::kDeepSets));
    single("setfn", setfunc::kind_name(setfunc::Kind::kFull));
  } else if (axis == "num-train-tasks") {
    for (int n = 1; n <= cfg.gen.train_tasks; ++n) single("train_tasks", std::to_string(n));
  } else if (axis == "num-val-tasks") {
    for (int n = 1; n <= cfg.gen.val_tasks; ++n) single("val_tasks", std::to_string(n));
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-learning with task interpolation on prototypical networks", "meta_interp"};
  app.require_subcommand(1);

  Common common;
  common.threads = default_threads();
  auto add_common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", common.config, "key = value configuration file");
      sub->add_option("--set", common.overrides, "key=value override, repeatable");
    }
    sub->add_option("--seed", common.seed, "run seed")->each([&](const std::string&) { common.seed_given = true; });
    sub->add_option("--threads", common.threads, "worker threads (default META_INTERP_THREADS or 1)")
        ->check(CLI::Range(1u, 256u));
  };

  std::string gen_out;
  auto* gen = app.add_subcommand("gen-tasks", "generate a synthetic task file");
  add_common(gen, true);
  gen->add_option("--out", gen_out, "task file to write")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "meta-train one method");
  add_common(train, true);
  train->add_option("--tasks", ta.tasks, "task file")->required()->check(CLI::ExistingFile);
  train->add_option("--out-dir", ta.out_dir, "output directory")->required();
  train->add_option("--method", ta.method,
                    "meta-interp, protonet, protonet-st, mlti, no-bilevel or no-singleton");
  train->add_flag("--resume", ta.resume, "continue from final.ckpt in --out-dir");
  train->add_option("--stop-after", ta.stop_after, "stop at this iteration and checkpoint")
      ->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "meta-test accuracy of a checkpoint");
  add_common(eval, false);
  eval->add_option("--ckpt", ea.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--tasks", ea.tasks, "task file")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", ea.episodes, "episodes per seed")->check(CLI::PositiveNumber);
  eval->add_option("--seeds", ea.seeds, "evaluation seeds")->check(CLI::PositiveNumber);
  eval->add_option("--shots", ea.shots, "support examples per class")->check(CLI::PositiveNumber);
  eval->add_option("--split", ea.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", ea.out_path, "also write the JSON here");

  std::string check, check_out;
  auto* theory = app.add_subcommand("theory-check", "run numerical checks");
  add_common(theory, false);
  std::vector<std::string> check_choices = checks::check_names();
  check_choices.push_back("all");
  theory->add_option("--check", check, "check name or all")->required()->check(CLI::IsMember(check_choices));
  theory->add_option("--out", check_out, "write the JSON report here instead of standard output");

  std::string axis, ablate_out, ablate_tasks;
  std::size_t ablate_seeds = 0;
  auto* ablate = app.add_subcommand("ablate", "accuracy across the settings of one axis");
  add_common(ablate, true);
  ablate->add_option("--axis", axis, "ablation axis")
      ->required()
      ->check(CLI::IsMember({"strategy", "layer", "cardinality", "setfunc", "num-train-tasks", "num-val-tasks"}));
  ablate->add_option("--out", ablate_out, "CSV to write")->required();
  ablate->add_option("--tasks", ablate_tasks, "task file (default: generate per seed)")->check(CLI::ExistingFile);
  ablate->add_option("--seeds", ablate_seeds, "seeds per setting (default: config key seeds)")
      ->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_tasks(common, gen_out, out);
    if (train->parsed()) return cmd_train(common, ta, out);
    if (eval->parsed()) return cmd_eval(common, ea, out);
    if (theory->parsed()) return cmd_theory_check(common, check, check_out, out);
    if (ablate->parsed()) return cmd_ablate(common, axis, ablate_tasks, ablate_out, ablate_seeds, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace mi::cli
