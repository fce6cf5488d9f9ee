// SPDX-License-Identifier: Apache-2.0
#include "metainterp/episodes.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "metainterp/errors.hpp"

namespace mi::episodes {
namespace {

constexpr const char* kHeader = "# meta-interp-tasks v1";
constexpr const char* kSplits[] = {"train", "val", "test"};

std::vector<Task>& split_tasks(TaskDataset& data, int split) {
  switch (split) {
    case 0:
      return data.meta_train;
    case 1:
      return data.meta_val;
    default:
      return data.meta_test;
  }
}

const std::vector<Task>& split_tasks(const TaskDataset& data, int split) {
  return split_tasks(const_cast<TaskDataset&>(data), split);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

long parse_int(const std::string& s, std::size_t line, const char* what) {
  errno = 0;
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || *end != '\0' || errno != 0) {
    throw ParseError(std::string("bad ") + what + " '" + s + "'", line);
  }
  return v;
}

double parse_double(const std::string& s, std::size_t line) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0' || errno == ERANGE) {
    throw ParseError("bad feature value '" + s + "'", line);
  }
  return v;
}

// Task from a fixed list of rotation/scale/offset choices, applied to the
// informative coordinates.
struct Transform {
  double angle;
  double scale;
  double offset;

  void apply(std::vector<double>& x, std::size_t informative) const {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    for (std::size_t i = 0; i + 1 < informative; i += 2) {
      const double a = x[i];
      const double b = x[i + 1];
      x[i] = c * a - s * b;
      x[i + 1] = s * a + c * b;
    }
    for (std::size_t i = 0; i < informative; ++i) x[i] = scale * x[i] + offset;
  }
};

template <class T>
const T& pick(const std::vector<T>& items, Rng& rng) {
  return items[uniform_index(rng, items.size())];
}

Task make_task(const GenConfig& cfg, Rng& rng) {
  const Transform tf{pick(cfg.angles, rng), pick(cfg.scales, rng), pick(cfg.offsets, rng)};
  Task task;
  task.way = cfg.way;
  for (int k = 0; k < cfg.way; ++k) {
    std::vector<double> center(cfg.informative);
    for (auto& v : center) v = cfg.center_scale * standard_normal(rng);
    for (int i = 0; i < cfg.shots + cfg.queries; ++i) {
      Example ex;
      ex.label = k;
      ex.features.resize(cfg.dims);
      for (std::size_t j = 0; j < cfg.informative; ++j) {
        ex.features[j] = center[j] + cfg.spread * standard_normal(rng);
      }
      tf.apply(ex.features, cfg.informative);
      for (std::size_t j = cfg.informative; j < cfg.dims; ++j) {
        ex.features[j] = cfg.spread * cfg.nuisance_scale * standard_normal(rng);
      }
      (i < cfg.shots ? task.support : task.query).push_back(std::move(ex));
    }
  }
  return task;
}

}  // namespace

void validate(const Task& task, std::size_t dims) {
  if (task.way < 1) throw DomainError("task way must be positive");
  std::vector<int> count(static_cast<std::size_t>(task.way), 0);
  for (const auto* set : {&task.support, &task.query}) {
    for (const auto& ex : *set) {
      if (ex.features.size() != dims) {
        throw DimensionError("example has " + std::to_string(ex.features.size()) +
                             " features, expected " + std::to_string(dims));
      }
      if (ex.label < 0 || ex.label >= task.way) {
        throw DomainError("label " + std::to_string(ex.label) + " outside [0, " +
                          std::to_string(task.way) + ")");
      }
      for (double v : ex.features) {
        if (!std::isfinite(v)) throw DomainError("non-finite feature");
      }
      if (set == &task.support) ++count[static_cast<std::size_t>(ex.label)];
    }
  }
  for (int k = 0; k < task.way; ++k) {
    if (count[static_cast<std::size_t>(k)] == 0) throw MissingClassError(k, "support set");
  }
}

void validate(const TaskDataset& data) {
  for (int s = 0; s < 3; ++s) {
    for (const auto& t : split_tasks(data, s)) {
      if (t.way != data.way) throw DomainError("task way differs from dataset way");
      validate(t, data.dims);
    }
  }
}

std::vector<std::vector<std::size_t>> support_index(const Task& task) {
  std::vector<std::vector<std::size_t>> idx(static_cast<std::size_t>(task.way));
  for (std::size_t i = 0; i < task.support.size(); ++i) {
    idx.at(static_cast<std::size_t>(task.support[i].label)).push_back(i);
  }
  for (int k = 0; k < task.way; ++k) {
    if (idx[static_cast<std::size_t>(k)].empty()) throw MissingClassError(k, "support set");
  }
  return idx;
}

Tensor features_matrix(const std::vector<Example>& examples) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(examples.size());
  for (const auto& e : examples) ptrs.push_back(&e);
  return features_matrix(ptrs);
}

Tensor features_matrix(const std::vector<const Example*>& examples) {
  if (examples.empty()) return Tensor();
  const std::size_t d = examples[0]->features.size();
  Tensor m(examples.size(), d);
  for (std::size_t r = 0; r < examples.size(); ++r) {
    if (examples[r]->features.size() != d) throw DimensionError("ragged example widths");
    for (std::size_t c = 0; c < d; ++c) m(r, c) = examples[r]->features[c];
  }
  return m;
}

void validate(const GenConfig& cfg) {
  if (cfg.way < 1 || cfg.shots < 1 || cfg.queries < 1) {
    throw ConfigError("way, shots and queries must be positive");
  }
  if (cfg.dims < 1 || cfg.informative < 1 || cfg.informative > cfg.dims) {
    throw ConfigError("need 1 <= informative <= dims");
  }
  if (cfg.train_tasks < 1 || cfg.val_tasks < 1 || cfg.test_tasks < 1) {
    throw ConfigError("task counts must be positive");
  }
  if (cfg.spread < 0 || cfg.center_scale < 0 || cfg.nuisance_scale < 0) {
    throw ConfigError("scales must be nonnegative");
  }
  if (cfg.angles.empty() || cfg.scales.empty() || cfg.offsets.empty()) {
    throw ConfigError("transform sets must be nonempty");
  }
}

TaskDataset gen_gaussian_tasks(const GenConfig& cfg) {
  validate(cfg);
  TaskDataset data;
  data.dims = cfg.dims;
  data.way = cfg.way;
  const int counts[] = {cfg.train_tasks, cfg.val_tasks, cfg.test_tasks};
  for (int s = 0; s < 3; ++s) {
    for (int t = 0; t < counts[s]; ++t) {
      Rng rng = make_stream(cfg.seed, {static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(t)});
      split_tasks(data, s).push_back(make_task(cfg, rng));
    }
  }
  return data;
}

std::pair<std::size_t, std::size_t> sample_pair_indices(const TaskDataset& data, Rng& rng) {
  return sample_pair_indices(data.meta_train.size(), rng);
}

std::pair<std::size_t, std::size_t> sample_pair_indices(std::size_t n, Rng& rng) {
  if (n == 0) throw Error("sample_pair: no meta-train tasks");
  if (n == 1) return {0, 0};
  const std::size_t a = uniform_index(rng, n);
  std::size_t b = uniform_index(rng, n - 1);
  if (b >= a) ++b;
  return {a, b};
}

std::pair<const Task*, const Task*> sample_pair(const TaskDataset& data, Rng& rng) {
  auto [a, b] = sample_pair_indices(data, rng);
  return {&data.meta_train[a], &data.meta_train[b]};
}

Task resample_episode(const Task& task, int shots, Rng& rng) {
  std::vector<std::vector<const Example*>> pool(static_cast<std::size_t>(task.way));
  for (const auto* set : {&task.support, &task.query}) {
    for (const auto& ex : *set) pool.at(static_cast<std::size_t>(ex.label)).push_back(&ex);
  }
  Task out;
  out.way = task.way;
  for (int k = 0; k < task.way; ++k) {
    auto& members = pool[static_cast<std::size_t>(k)];
    if (members.size() <= static_cast<std::size_t>(shots)) {
      throw MissingClassError(k, "episode query set");
    }
    shuffle(std::span<const Example*>(members), rng);
    for (std::size_t i = 0; i < members.size(); ++i) {
      (i < static_cast<std::size_t>(shots) ? out.support : out.query).push_back(*members[i]);
    }
  }
  return out;
}

void save_tasks(const TaskDataset& data, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw Error("cannot open '" + path + "' for writing");
  std::fprintf(f, "%s\ndims=%zu way=%d\n", kHeader, data.dims, data.way);
  for (int s = 0; s < 3; ++s) {
    const auto& tasks = split_tasks(data, s);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      for (const auto* set : {&tasks[t].support, &tasks[t].query}) {
        const char* role = set == &tasks[t].support ? "support" : "query";
        for (const auto& ex : *set) {
          std::fprintf(f, "%zu,%s,%d,%s", t, kSplits[s], ex.label, role);
          for (double v : ex.features) std::fprintf(f, ",%.17g", v);
          std::fputc('\n', f);
        }
      }
    }
  }
  const bool failed = std::ferror(f) != 0;
  if (std::fclose(f) != 0 || failed) throw Error("failed writing '" + path + "'");
}

TaskDataset load_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 0;

  if (!std::getline(in, line)) throw ParseError("no tasks");
  ++lineno;
  if (line != kHeader) throw ParseError("expected header '" + std::string(kHeader) + "'", lineno);

  if (!std::getline(in, line)) throw ParseError("no tasks");
  ++lineno;
  TaskDataset data;
  {
    unsigned long dims = 0;
    int way = 0;
    char tail = 0;
    if (std::sscanf(line.c_str(), "dims=%lu way=%d%c", &dims, &way, &tail) != 2 || dims == 0 ||
        way < 1) {
      throw ParseError("expected 'dims=<D> way=<K>'", lineno);
    }
    data.dims = dims;
    data.way = way;
  }

  // (split, id) -> task, kept in id order per split.
  std::map<std::size_t, Task> by_split[3];
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split_csv(line);
    if (fields.size() != 4 + data.dims) {
      throw ParseError("row has " + std::to_string(fields.size() < 4 ? 0 : fields.size() - 4) +
                           " features, header says dims=" + std::to_string(data.dims),
                       lineno);
    }
    const long id = parse_int(fields[0], lineno, "task id");
    if (id < 0) throw ParseError("negative task id", lineno);
    int split = -1;
    for (int s = 0; s < 3; ++s) {
      if (fields[1] == kSplits[s]) split = s;
    }
    if (split < 0) throw ParseError("unknown split '" + fields[1] + "'", lineno);
    const long label = parse_int(fields[2], lineno, "label");
    if (label < 0 || label >= data.way) {
      throw ParseError("label " + fields[2] + " outside [0, " + std::to_string(data.way) + ")",
                       lineno);
    }
    const bool support = fields[3] == "support";
    if (!support && fields[3] != "query") {
      throw ParseError("unknown role '" + fields[3] + "'", lineno);
    }
    Example ex;
    ex.label = static_cast<int>(label);
    ex.features.reserve(data.dims);
    for (std::size_t j = 0; j < data.dims; ++j) {
      const double v = parse_double(fields[4 + j], lineno);
      if (!std::isfinite(v)) throw ParseError("non-finite feature", lineno);
      ex.features.push_back(v);
    }
    Task& task = by_split[split][static_cast<std::size_t>(id)];
    task.way = data.way;
    (support ? task.support : task.query).push_back(std::move(ex));
  }

  std::size_t total = 0;
  for (int s = 0; s < 3; ++s) {
    std::size_t expect = 0;
    for (auto& [id, task] : by_split[s]) {
      if (id != expect++) {
        throw ParseError(std::string(kSplits[s]) + " task ids are not contiguous from 0");
      }
      split_tasks(data, s).push_back(std::move(task));
    }
    total += by_split[s].size();
  }
  if (total == 0) throw ParseError("no tasks");
  validate(data);
  return data;
}

}  // namespace mi::episodes
