#pragma once

// Dense 64-bit tensors and a single-threaded reverse-mode tape.
//
// Values are row-major. Rank-1 tensors are treated as a single row by the
// row-wise ops (softmax, cross_entropy, kl_div), so a probability vector and
// a 1×n batch behave identically.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

namespace bace::ad {

using Shape = std::vector<std::size_t>;

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kNormFloor = 1e-12;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-0 and rank-1 tensors count as one row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  // Scalar value of a one-element tensor.
  double item() const;
  bool all_finite() const noexcept;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_size(const Shape& shape) noexcept;

// Value-level helpers (no tape).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_rows(const Tensor& a, const Tensor& b);

// Counters for numeric clamps applied during forward ops.
struct Diagnostics {
  std::size_t probability_floor_hits = 0;
  std::size_t zero_norm_hits = 0;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as its tape is.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the gradient flowing into a node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(Tensor value);
  Var constant(Tensor value);

  // Appends an op node. Inputs must already be on this tape.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  // Reverse sweep from a one-element root. Allowed once per tape lifetime
  // (or per reset()); a second call throws ContractError.
  void backward(Var loss);

  // Gradient of the last backward() root w.r.t. `v`; zeros when unreachable.
  Tensor grad(Var v) const;
  std::vector<Tensor> gradients(std::span<const Var> params) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient accumulator for `id`, allocated as zeros on first touch.
  Tensor& grad_buffer(std::size_t id);

  Diagnostics& diagnostics() noexcept { return diagnostics_; }
  const Diagnostics& diagnostics() const noexcept { return diagnostics_; }

  std::size_t size() const noexcept { return nodes_.size(); }
  void reset();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owned(Var v) const;

  // deque keeps references stable while ops append nodes.
  std::deque<Node> nodes_;
  Diagnostics diagnostics_;
  bool backward_done_ = false;
};

// Linear algebra.
Var matmul(Var a, Var b);
Var transpose(Var a);

// Elementwise kit.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_bias(Var x, Var bias);  // x[m×n] + bias[n] per row
Var scale(Var x, double factor);
Var mul_scalar(Var x, Var factor);  // factor is a one-element node
Var sum(Var x);
Var mean(Var x);
Var relu(Var x);
Var tanh(Var x);

// Row-wise ops.
Var normalize_rows(Var x);
Var softmax(Var z);
Var softmax(Var z, std::span<const std::size_t> columns);
Var select_columns(Var z, std::span<const std::size_t> columns);
Var gather_rows(Var x, std::span<const std::size_t> rows);

// out[r] = Σ weight · x[src] for each (src, weight) in mixture[r].
using RowMixture = std::vector<std::vector<std::pair<std::size_t, double>>>;
Var mix_rows(Var x, const RowMixture& mixture);

// Losses. cross_entropy and kl_div average over rows.
Var cross_entropy(Var probabilities, std::span<const std::size_t> labels);
Var kl_div(Var p, Var q);
Var squared_l2(Var a, Var b);

// Optimization.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);

struct SgdOptions {
  double lr = 0.05;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

class Sgd {
 public:
  explicit Sgd(SgdOptions options);
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);
  const SgdOptions& options() const noexcept { return options_; }
  void set_lr(double lr);

 private:
  SgdOptions options_;
  std::vector<Tensor> velocity_;
};

}  // namespace bace::ad
