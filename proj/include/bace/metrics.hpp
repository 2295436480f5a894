#pragma once

// Continual-learning scores over the accuracy matrix, encoder probing, and
// class feature ↔ class embedding distances.

#include <cstddef>
#include <cstdint>
#include <map>
#include <vector>

#include "bace/model.hpp"
#include "bace/taskstream.hpp"

namespace bace {

// Task indices are 0-based: row t holds accuracies on tasks 0..t measured
// right after training task t. `before[i]` is the accuracy on task i measured
// just before training it (i ≥ 1); `random_baseline[i]` is the accuracy of a
// freshly initialized model on task i. Unmeasured entries are empty / NaN.
struct AccuracyMatrix {
  std::vector<std::vector<double>> rows;
  std::vector<double> before;
  std::vector<double> random_baseline;

  std::size_t num_tasks() const noexcept { return rows.size(); }
  bool row_complete(std::size_t t) const;
  void validate() const;  // lower-triangular shape, entries in [0,1]
  bool operator==(const AccuracyMatrix& other) const;
};

// Mean of row t. Throws ContractError on an incomplete row.
double avg_accuracy(const AccuracyMatrix& m, std::size_t t);

// (1/(T−1)) Σ_{i<T−1} [max_{j<T−1} a_{j,i} − a_{T−1,i}]; needs T ≥ 2 and
// complete rows. Negative under backward transfer.
double forgetting(const AccuracyMatrix& m);

// (1/(T−1)) Σ_{i≥1} [before[i] − random_baseline[i]]; needs T ≥ 2.
double forward_transfer(const AccuracyMatrix& m);

// Per-task accuracy (argmax over every registered class) on tasks 0..upto.
std::vector<double> evaluate(const ModelState& model, const TaskStream& stream, std::size_t upto);
double accuracy(const ModelState& model, const LabeledSet& set);

struct ProbeConfig {
  std::size_t max_epochs = 100;
  double lr = 0.1;
  double plateau = 1e-5;
  bool operator==(const ProbeConfig&) const = default;
};

struct ProbeResult {
  double accuracy = 0.0;            // mean over tasks 0..upto
  std::vector<double> per_task;
  std::size_t epochs = 0;
  double final_loss = 0.0;
};

// Freezes the encoder, trains a fresh cosine classifier (same η) with
// full-batch SGD on every seen training sample, and scores it on every seen
// test sample. `model` is not modified.
ProbeResult probing_accuracy(const ModelState& model, const TaskStream& stream, std::size_t upto,
                             const ProbeConfig& cfg, std::uint64_t seed);

// ‖W_c/‖W_c‖ − μ_c/‖μ_c‖‖₂ with μ_c the mean encoder feature of class c over
// `train`. Throws ContractError when `train` has no sample of c.
double feature_embedding_distance(const ModelState& model, const LabeledSet& train, int class_id);

struct TrackingRecord {
  std::size_t checkpoint = 0;               // task just learned
  std::map<int, double> class_distance;
  std::vector<double> task_mean;             // per task 0..checkpoint
  double new_mean = 0.0;                     // classes of the checkpoint task
  double old_mean = 0.0;                     // classes of earlier tasks (0 if none)
  double old_minus_new = 0.0;
};

TrackingRecord track_checkpoint(const ModelState& model, const TaskStream& stream, std::size_t checkpoint);

struct TrackingSummary {
  std::vector<TrackingRecord> records;
  double final_old_minus_new = 0.0;
};

TrackingSummary tracking_report(const std::vector<TrackingRecord>& records);

}  // namespace bace
