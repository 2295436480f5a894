#pragma once

// Rehearsal buffer filled by iCaRL herding.

#include <cstddef>
#include <map>
#include <random>
#include <vector>

#include "bace/model.hpp"
#include "bace/taskstream.hpp"

namespace bace {

// Greedy herding: at step k pick the unpicked row i minimizing
// ‖μ − (f_i + Σ picked) / k‖₂, where μ is the mean row. Ties go to the lowest
// index. Returns m indices in pick order. Throws ContractError unless 1 ≤ m ≤ n.
std::vector<std::size_t> herding_select(const Tensor& features, std::size_t m);

class RehearsalBuffer {
 public:
  explicit RehearsalBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept;
  bool empty() const noexcept { return size() == 0; }
  std::size_t num_classes() const noexcept { return store_.size(); }

  // Exemplars of one class, herding order, rows of [count × dim].
  const Tensor& exemplars(int class_id) const { return store_.at(class_id); }
  const std::map<int, Tensor>& store() const noexcept { return store_; }

  // Equal per-class budget ⌊capacity / classes_seen⌋: old classes truncated
  // along their herding order, new classes herded on `model` features.
  void update_after_task(const Task& task, const ModelState& model);

  // Uniform with replacement over all stored exemplars; an empty buffer
  // yields an empty set.
  LabeledSet sample_batch(std::size_t n, std::mt19937_64& rng) const;

  // Everything currently stored, class-major, herding order within class.
  LabeledSet contents() const;

  // Direct insertion for deserialization; replaces any existing list.
  void set_class(int class_id, Tensor exemplars);

  std::size_t reads() const noexcept { return reads_; }

  bool operator==(const RehearsalBuffer& other) const {
    return capacity_ == other.capacity_ && store_ == other.store_;
  }

 private:
  std::size_t capacity_;
  std::map<int, Tensor> store_;
  mutable std::size_t reads_ = 0;
};

}  // namespace bace
