#pragma once

// Persistence: JSON config/report, CSV series, bit-exact checkpoints, and
// stream descriptions that can be rebuilt from a report.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bace/trainer.hpp"

namespace bace {

inline constexpr const char* kVersion = "0.3.0";

nlohmann::json to_json(const TrainConfig& cfg);
// Missing keys keep their defaults; unknown keys and bad types raise
// ConfigError naming the field.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// {"kind": "synthetic", ...SyntheticConfig} or
// {"kind": "csv", "train": path, "test": path, "n_tasks": N, "class_order": [...]}.
// A bare name "synth-<C>c<T>t" is accepted too.
TaskStream load_stream(const nlohmann::json& spec);
nlohmann::json stream_spec(const SyntheticConfig& cfg);

nlohmann::json report_to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& j);

// Summary fields only, for re-summarize comparisons.
nlohmann::json summary_json(const RunReport& report);

std::string matrix_csv(const AccuracyMatrix& m);
std::string losses_csv(const std::vector<EpochLoss>& losses);
std::string probing_csv(const std::vector<ProbePoint>& points);
std::string tracking_csv(const std::vector<TrackingRecord>& records);

// Reads matrix.csv back (row, task, accuracy, before, random_baseline).
AccuracyMatrix matrix_from_csv(const std::string& text);

// config.echo, report.json, matrix.csv, losses.csv, probing.csv,
// tracking.csv and, when present, neighbors.csv.
void write_run_outputs(const std::filesystem::path& dir, const RunReport& report, const std::string& neighbors = {});
RunReport read_report(const std::filesystem::path& file_or_dir);

// Fixed-width table with one line per metric: a, b, b − a.
std::string compare_reports(const RunReport& a, const RunReport& b);

enum class CheckpointFormat { binary, text };

struct Checkpoint {
  TrainConfig config;
  nlohmann::json stream;
  RunState state;
};

// Binary: little-endian integers and raw IEEE-754 bits. Text: one token per
// field, doubles in hexfloat. Both reload bit-exactly; the format is detected
// on load.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, CheckpointFormat format);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace bace
