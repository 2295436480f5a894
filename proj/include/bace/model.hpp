#pragma once

// Encoder MLP + cosine-normalized expanding classifier.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bace/autodiff.hpp"

namespace bace {

using ad::Tensor;
using ad::Var;

enum class Nonlinearity { relu, tanh };

std::string to_string(Nonlinearity n);
Nonlinearity parse_nonlinearity(const std::string& s);

// Layer widths in order; the last entry is the feature width. The
// nonlinearity is applied after every layer except the last.
struct EncoderConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden_dims{128, 128, 64};
  Nonlinearity nonlinearity = Nonlinearity::relu;
  std::size_t feature_dim = 64;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct ClassifierConfig {
  double cosine_scale = 10.0;
  bool learnable_scale = false;
  double init_std = 0.02;

  void validate() const;
  bool operator==(const ClassifierConfig&) const = default;
};

// Task → class-id list, plus class-id ↔ classifier-row mapping.
class ClassRegistry {
 public:
  // Registers a new task's classes; appends rows in the given order.
  void add_task(std::span<const int> class_ids);

  std::size_t num_tasks() const noexcept { return tasks_.size(); }
  std::size_t num_classes() const noexcept { return row_class_.size(); }
  const std::vector<int>& task_classes(std::size_t task) const { return tasks_.at(task); }
  const std::vector<std::vector<int>>& tasks() const noexcept { return tasks_; }

  bool contains(int class_id) const;
  std::size_t row_of(int class_id) const;
  int class_of_row(std::size_t row) const { return row_class_.at(row); }

  // Rows of classes registered before the latest task ("old") and by it ("new").
  std::vector<std::size_t> old_rows() const;
  std::vector<std::size_t> new_rows() const;
  std::vector<std::size_t> task_rows(std::size_t task) const;

  bool operator==(const ClassRegistry&) const = default;

 private:
  std::vector<std::vector<int>> tasks_;
  std::vector<int> row_class_;
};

struct ModelState {
  EncoderConfig encoder;
  ClassifierConfig classifier_config;
  std::vector<Tensor> weights;  // layer l: [in × out]
  std::vector<Tensor> biases;   // layer l: [out]
  Tensor classifier;            // [C × feature_dim]; row c embeds class_of_row(c)
  Tensor scale;                 // one-element cosine scale η
  ClassRegistry registry;

  std::size_t num_classes() const noexcept { return registry.num_classes(); }

  // Trainable tensors in a fixed order (η included only when learnable).
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;

  bool operator==(const ModelState&) const = default;
};

// He-style Gaussian encoder init, zero biases, empty classifier.
ModelState init_model(const EncoderConfig& encoder, const ClassifierConfig& classifier,
                      std::mt19937_64& rng);

// Parameters placed on a tape, in ModelState::parameters() order.
struct BoundModel {
  const ModelState* state = nullptr;
  std::vector<Var> weights;
  std::vector<Var> biases;
  Var classifier;
  Var scale;

  std::vector<Var> trainable() const;
};

// trainable=false binds everything as constants (teacher, evaluation).
BoundModel bind(ad::Tape& tape, const ModelState& model, bool trainable);

Var forward_features(const BoundModel& model, Var x);
Var forward_logits(const BoundModel& model, Var features);

// Tape-free convenience wrappers.
Tensor features_of(const ModelState& model, const Tensor& x);
Tensor logits_of(const ModelState& model, const Tensor& x);
Tensor logits_from_features(const ModelState& model, const Tensor& features);

// Appends one row per new class, drawn from N(0, init_std²). Existing rows
// are untouched. Throws RegistryError on a duplicate id.
void expand_classifier(ModelState& model, std::span<const int> new_class_ids, std::mt19937_64& rng);

// Same as above with explicit rows (used to keep teacher and student in step).
void expand_classifier(ModelState& model, std::span<const int> new_class_ids, const Tensor& rows);

// θ_T ← β·θ_T + (1−β)·θ_S for every tensor. Throws ContractError when the
// architectures or class registries differ.
void ema_update(ModelState& teacher, const ModelState& student, double beta);

inline ModelState clone_state(const ModelState& model) { return model; }

bool same_architecture(const ModelState& a, const ModelState& b);

// FNV-1a over every tensor's bytes and the registry; used for purity checks.
std::uint64_t state_hash(const ModelState& model);

}  // namespace bace
