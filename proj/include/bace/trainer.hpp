#pragma once

// Teacher/student class-incremental training loop shared by every method.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bace/losses.hpp"
#include "bace/memory.hpp"
#include "bace/metrics.hpp"
#include "bace/model.hpp"
#include "bace/neighbors.hpp"
#include "bace/taskstream.hpp"

namespace bace {

enum class Method { SEQ, REPLAY, DERPP, MTL, BACE, BACE_W1, BACE_A0, BACE_W1_A0 };

std::string to_string(Method m);
Method parse_method(const std::string& s);  // case-insensitive

struct TrainConfig {
  Method method = Method::BACE;
  std::size_t epochs = 20;
  double lr = 0.05;
  bool cosine_decay = false;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::size_t batch_size = 128;
  std::size_t buffer_batch_size = 0;  // 0: same as batch_size
  std::size_t k = 5;
  double w0 = 0.95;
  double alpha = 1.0;
  double beta = 0.9;
  std::size_t buffer_capacity = 50;
  std::uint64_t seed = 0;
  NeighborVariant neighbor_variant = NeighborVariant::standard;
  KlDirection kl_direction = KlDirection::teacher_student;
  unsigned threads = 1;  // neighbor-index workers
  EncoderConfig encoder;
  ClassifierConfig classifier;
  ProbeConfig probe;
  bool probing = true;
  bool tracking = true;
  bool check_identities = false;  // re-derive reduction identities on live batches
  bool dump_neighbors = false;

  void validate() const;

  // Method-resolved knobs.
  bool uses_teacher() const noexcept;
  bool uses_buffer() const noexcept;
  bool uses_logit_l2() const noexcept;
  double effective_w0() const noexcept;
  double effective_alpha() const noexcept;
  std::size_t effective_buffer_batch() const noexcept { return buffer_batch_size ? buffer_batch_size : batch_size; }

  bool operator==(const TrainConfig&) const = default;
};

// Defaults scaled for the synthetic desk benchmark: batch 32, otherwise as above.
TrainConfig desk_config(Method method = Method::BACE, std::uint64_t seed = 0);

struct EpochLoss {
  std::size_t task = 0;
  std::size_t epoch = 0;
  LossBreakdown mean;
};

struct TrainDiagnostics {
  std::size_t buffer_reads = 0;
  std::size_t probability_floor_hits = 0;
  std::size_t zero_norm_hits = 0;
  std::size_t neighbor_fallbacks = 0;
  std::size_t identity_checks = 0;
  std::size_t sgd_steps = 0;
};

struct RunState {
  ModelState student;
  ModelState teacher;
  RehearsalBuffer buffer;
  AccuracyMatrix matrix;
  std::vector<EpochLoss> losses;
  TrainDiagnostics diagnostics;
  std::size_t tasks_done = 0;
  std::string neighbors_csv;  // last epoch of the last task, when requested
};

// Fresh state: student and teacher share one random init, empty classifiers.
RunState init_run(const TaskStream& stream, const TrainConfig& cfg);

// One task of the sequential loop.
// Observer for per-epoch hooks (teacher snapshots in tests, checkpoints).
using EpochObserver = std::function<void(const RunState&, std::size_t task, std::size_t epoch)>;

void train_task(RunState& state, const TaskStream& stream, std::size_t task, const TrainConfig& cfg,
                const EpochObserver& observer = {});

struct ProbePoint {
  std::size_t checkpoint = 0;
  double observed = 0.0;
  double probing = 0.0;
};

struct RunReport {
  TrainConfig config;
  nlohmann::json stream_config;  // enough to regenerate the stream
  nlohmann::json stream_manifest;
  AccuracyMatrix matrix;
  std::optional<double> a_last;
  std::optional<double> fgt;
  std::optional<double> fwd;
  std::vector<EpochLoss> losses;
  std::vector<ProbePoint> probing;
  std::vector<TrackingRecord> tracking;
  std::vector<double> task_seconds;
  TrainDiagnostics diagnostics;
  std::uint64_t seed = 0;
  std::string version;
  bool partial = false;
  std::string error;
};

// A_last / FGT / FWD from the matrix, where defined.
void summarize_metrics(RunReport& report);

using CheckpointHook = std::function<void(const RunState&, std::size_t task)>;

// Sequential loop over every task (or joint training for MTL) with
// evaluation, probing and tracking after each task.
RunReport run_method(const TaskStream& stream, const TrainConfig& cfg, const CheckpointHook& on_checkpoint = {});

}  // namespace bace
