#pragma once

// Task sequences with mutually disjoint label sets.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bace/autodiff.hpp"

namespace bace {

using ad::Tensor;

enum class Split { train, test };

// One labeled sample, as handed out by LabeledSet::sample().
struct Sample {
  std::vector<double> x;
  int y = 0;
  Split split = Split::train;
};

// Rows of `x` paired with labels in `y`.
struct LabeledSet {
  Tensor x;  // [n × dim]
  std::vector<int> y;

  std::size_t size() const noexcept { return y.size(); }
  Sample sample(std::size_t i, Split split) const;
  void append(const LabeledSet& other);
  bool operator==(const LabeledSet&) const = default;
};

struct Task {
  std::vector<int> classes;
  LabeledSet train;
  LabeledSet test;
  bool operator==(const Task&) const = default;
};

struct TaskStream {
  std::vector<Task> tasks;
  std::size_t input_dim = 0;
  std::uint64_t seed = 0;
  std::string source;

  std::size_t num_tasks() const noexcept { return tasks.size(); }
  std::size_t num_classes() const;

  // Disjoint class sets, labels within their task's set, finite inputs,
  // consistent dimensions. Throws ContractError.
  void validate() const;

  // Union of train (or test) data over tasks [0, upto].
  LabeledSet train_upto(std::size_t upto) const;
  LabeledSet test_upto(std::size_t upto) const;

  nlohmann::json manifest() const;
  bool operator==(const TaskStream&) const = default;
};

struct SyntheticConfig {
  std::size_t n_classes = 10;
  std::size_t n_tasks = 5;
  std::size_t dim = 32;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double center_scale = 1.0;
  double noise_sigma = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SyntheticConfig&) const = default;
};

nlohmann::json to_json(const SyntheticConfig& cfg);
SyntheticConfig synthetic_from_json(const nlohmann::json& j);

// Parses "synth-<C>c<T>t" into a default-sized synthetic config.
std::optional<SyntheticConfig> parse_stream_name(const std::string& name);

TaskStream generate_gaussian_stream(const SyntheticConfig& cfg);

// CSV with header "label,f0,...,f{D-1}". Labels are kept raw here.
struct CsvDataset {
  Tensor x;
  std::vector<int> labels;
  std::vector<std::size_t> lines;  // 1-based source line per row
};

CsvDataset load_csv_dataset(const std::filesystem::path& path);

// Remaps the train set's sorted distinct labels onto 0..n-1 (test labels use
// the same map; unseen ones raise ParseError with their line number), then
// partitions classes into `n_tasks` equal groups following `class_order`
// (remapped ids, ascending by default).
TaskStream split_into_tasks(const CsvDataset& train, const CsvDataset& test, std::size_t n_tasks,
                            std::optional<std::vector<int>> class_order = std::nullopt);

}  // namespace bace
