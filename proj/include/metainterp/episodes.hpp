// SPDX-License-Identifier: Apache-2.0
//
// Episodic task data, a synthetic few-task generator, and the task file format.
// Class labels are 0-based: a K-way task uses labels 0..K-1.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metainterp/random.hpp"
#include "metainterp/tensor.hpp"

namespace mi::episodes {

struct Example {
  std::vector<double> features;
  int label = 0;
  friend bool operator==(const Example&, const Example&) = default;
};

struct Task {
  std::vector<Example> support;
  std::vector<Example> query;
  int way = 0;
  friend bool operator==(const Task&, const Task&) = default;
};

struct TaskDataset {
  std::vector<Task> meta_train;
  std::vector<Task> meta_val;
  std::vector<Task> meta_test;
  std::size_t dims = 0;
  int way = 0;
  friend bool operator==(const TaskDataset&, const TaskDataset&) = default;
};

/// Throws MissingClassError if a class has no support example, DimensionError
/// on a feature width other than `dims`, and DomainError on a label outside
/// [0, way) or a non-finite feature.
void validate(const Task& task, std::size_t dims);
void validate(const TaskDataset& data);

/// Indices of the support examples of each class.
std::vector<std::vector<std::size_t>> support_index(const Task& task);

/// Stacks feature vectors into a matrix, one example per row.
Tensor features_matrix(const std::vector<Example>& examples);
Tensor features_matrix(const std::vector<const Example*>& examples);

struct GenConfig {
  int way = 5;
  int shots = 1;
  int queries = 15;
  std::size_t dims = 16;
  /// Leading coordinates that carry class information; the rest are nuisance.
  std::size_t informative = 8;
  int train_tasks = 5;
  int val_tasks = 5;
  int test_tasks = 50;
  double center_scale = 1.0;
  double spread = 0.5;
  /// Noise multiplier of the nuisance coordinates relative to `spread`.
  double nuisance_scale = 2.0;
  std::vector<double> angles{0.0, 0.5, 1.0, 1.5, 2.0, 2.5};
  std::vector<double> scales{0.75, 1.0, 1.25};
  std::vector<double> offsets{-0.5, 0.0, 0.5};
  std::uint64_t seed = 0;
};

void validate(const GenConfig& cfg);

/// Each task draws K class centers in the informative coordinates, composes a
/// task transform (plane rotations by an angle, a scale, an offset) chosen
/// from the configured sets, and samples shots + queries points per class
/// around each transformed center. Deterministic in cfg.seed.
TaskDataset gen_gaussian_tasks(const GenConfig& cfg);

/// Ordered pair of distinct meta-train task indices, uniform; (0, 0) when
/// only one task exists. Throws Error on an empty meta-train list.
std::pair<std::size_t, std::size_t> sample_pair_indices(const TaskDataset& data, Rng& rng);
/// Same draw over `count` meta-train tasks.
std::pair<std::size_t, std::size_t> sample_pair_indices(std::size_t count, Rng& rng);
std::pair<const Task*, const Task*> sample_pair(const TaskDataset& data, Rng& rng);

/// Fresh episode from a task: pools every example of a class, shuffles, and
/// deals `shots` to the support set and the rest to the query set.
/// Throws MissingClassError if a class has at most `shots` examples.
Task resample_episode(const Task& task, int shots, Rng& rng);

void save_tasks(const TaskDataset& data, const std::string& path);
/// Throws ParseError (with line number) on malformed content.
TaskDataset load_tasks(const std::string& path);

}  // namespace mi::episodes
