#include "bace/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <Eigen/Core>

#include "bace/errors.hpp"

namespace bace::ad {

namespace {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// c[m×n] += a[m×k] · b[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap(c, M, N).noalias() += CMap(a, M, K) * CMap(b, K, N);
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap(c, M, N).noalias() += CMap(a, M, K) * CMap(b, N, K).transpose();
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap(c, K, N).noalias() += CMap(a, M, K).transpose() * CMap(b, M, N);
}

Shape like_rows(const Tensor& src, std::size_t cols) {
  if (src.rank() <= 1) return {cols};
  return {src.rows(), cols};
}

}  // namespace

// ---------------------------------------------------------------- Tensor

std::size_t shape_size(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape_) + " does not hold " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("tensor: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(values));
}

std::size_t Tensor::rows() const noexcept { return rank() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const noexcept {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return shape_[0];
  return 1;
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item: tensor has " + std::to_string(size()) + " values");
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t c = x.cols();
  Tensor out(Shape{rows.size(), c});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.rows()) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(x.data() + rows[r] * c, c, out.data() + r * c);
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  require_matrix(a, "concat_rows");
  require_matrix(b, "concat_rows");
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: column mismatch");
  std::vector<double> values(a.values().begin(), a.values().end());
  values.insert(values.end(), b.values().begin(), b.values().end());
  return Tensor::matrix(a.rows() + b.rows(), a.cols(), std::move(values));
}

// ------------------------------------------------------------------ Tape

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("var: not bound to a tape");
  return tape_->value(id_);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    check_owned(v);
    needs = needs || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw ContractError("tape: variable belongs to a different tape");
  }
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape(), 0.0);
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  check_owned(loss);
  if (backward_done_) {
    throw ContractError("backward: already run on this tape; reset() before reuse");
  }
  if (nodes_[loss.id()].value.size() != 1) {
    throw ContractError("backward: root must be a scalar, got " +
                        shape_str(nodes_[loss.id()].value.shape()));
  }
  backward_done_ = true;
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

Tensor Tape::grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

std::vector<Tensor> Tape::gradients(std::span<const Var> params) const {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Var& p : params) out.push_back(grad(p));
  return out;
}

void Tape::reset() {
  nodes_.clear();
  diagnostics_ = {};
  backward_done_ = false;
}

// ------------------------------------------------------------------- ops

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(av.shape()) + " · " +
                         shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) gemm_nt(g.data(), t.value(ib).data(), t.grad_buffer(ia).data(), m, n, k);
    if (t.requires_grad(ib)) gemm_tn(t.value(ia).data(), g.data(), t.grad_buffer(ib).data(), m, k, n);
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_matrix(av, "transpose");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, r, c](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += g.at(j, i);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      Tensor& gi = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_matrix(xv, "add_bias");
  if (bv.size() != xv.cols()) throw DimensionError("add_bias: bias length must equal column count");
  Tensor out = xv;
  const std::size_t r = xv.rows(), c = xv.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) += bv[j];
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib, r, c](Tape& t, const Tensor& g) {
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g.at(i, j);
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, factor](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var mul_scalar(Var x, Var factor) {
  if (factor.value().size() != 1) throw DimensionError("mul_scalar: factor must hold one value");
  const double f = factor.value()[0];
  Tensor out = x.value();
  for (double& v : out.values()) v *= f;
  const std::size_t ix = x.id(), is = factor.id();
  return x.tape().record(std::move(out), {x, factor}, [ix, is](Tape& t, const Tensor& g) {
    const double fv = t.value(is)[0];
    const Tensor& xv = t.value(ix);
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += fv * g[i];
    }
    if (t.requires_grad(is)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += xv[i] * g[i];
      t.grad_buffer(is)[0] += acc;
    }
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  const double s = std::accumulate(xv.values().begin(), xv.values().end(), 0.0);
  const std::size_t ix = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (double& v : gx.values()) v += g[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DomainError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

Var tanh(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::tanh(v);
  const std::size_t ix = x.id();
  Tensor y = out;
  return x.tape().record(std::move(out), {x}, [ix, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var normalize_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out = xv;
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (double v : xv.row(i)) ss += v * v;
    double n = std::sqrt(ss);
    if (n < kNormFloor) {
      n = kNormFloor;
      ++x.tape().diagnostics().zero_norm_hits;
    }
    norms[i] = n;
    for (double& v : out.row(i)) v /= n;
  }
  const std::size_t ix = x.id();
  Tensor y = out;
  return x.tape().record(std::move(out), {x},
                         [ix, r, c, norms = std::move(norms), y = std::move(y)](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad_buffer(ix);
                           for (std::size_t i = 0; i < r; ++i) {
                             const double n = norms[i];
                             const auto yi = y.row(i);
                             const auto gi = g.row(i);
                             auto gxi = gx.row(i);
                             if (n <= kNormFloor) {
                               for (std::size_t j = 0; j < c; ++j) gxi[j] += gi[j] / n;
                               continue;
                             }
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += yi[j] * gi[j];
                             for (std::size_t j = 0; j < c; ++j) gxi[j] += (gi[j] - yi[j] * dot) / n;
                           }
                         });
}

Var softmax(Var z) {
  std::vector<std::size_t> cols(z.value().cols());
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  return softmax(z, cols);
}

Var softmax(Var z, std::span<const std::size_t> columns) {
  const Tensor& zv = z.value();
  if (columns.empty()) throw DomainError("softmax: empty column subset");
  if (zv.rank() > 2) throw DimensionError("softmax: rank must be 1 or 2");
  const std::size_t r = zv.rows(), c = zv.cols(), k = columns.size();
  for (std::size_t col : columns)
    if (col >= c) throw DimensionError("softmax: column index out of range");
  Tensor out(like_rows(zv, k));
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t col : columns) mx = std::max(mx, zv.at(i, col));
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(zv.at(i, columns[j]) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) /= denom;
  }
  const std::size_t iz = z.id();
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  Tensor s = out;
  return z.tape().record(std::move(out), {z},
                         [iz, r, cols = std::move(cols), s = std::move(s)](Tape& t, const Tensor& g) {
                           Tensor& gz = t.grad_buffer(iz);
                           const std::size_t k = cols.size();
                           for (std::size_t i = 0; i < r; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < k; ++j) dot += g.at(i, j) * s.at(i, j);
                             for (std::size_t j = 0; j < k; ++j)
                               gz.at(i, cols[j]) += s.at(i, j) * (g.at(i, j) - dot);
                           }
                         });
}

Var select_columns(Var z, std::span<const std::size_t> columns) {
  const Tensor& zv = z.value();
  const std::size_t r = zv.rows(), c = zv.cols(), k = columns.size();
  for (std::size_t col : columns)
    if (col >= c) throw DimensionError("select_columns: column index out of range");
  Tensor out(like_rows(zv, k));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = zv.at(i, columns[j]);
  const std::size_t iz = z.id();
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  return z.tape().record(std::move(out), {z}, [iz, r, cols = std::move(cols)](Tape& t, const Tensor& g) {
    Tensor& gz = t.grad_buffer(iz);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < cols.size(); ++j) gz.at(i, cols[j]) += g.at(i, j);
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  Tensor out = gather_rows(x.value(), rows);
  const std::size_t ix = x.id();
  const std::size_t c = x.value().cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return x.tape().record(std::move(out), {x}, [ix, c, idx = std::move(idx)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double* dst = gx.data() + idx[r] * c;
      const double* src = g.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var mix_rows(Var x, const RowMixture& mixture) {
  const Tensor& xv = x.value();
  require_matrix(xv, "mix_rows");
  const std::size_t c = xv.cols();
  Tensor out(Shape{mixture.size(), c});
  for (std::size_t r = 0; r < mixture.size(); ++r) {
    double* dst = out.data() + r * c;
    for (const auto& [src, w] : mixture[r]) {
      if (src >= xv.rows()) throw DimensionError("mix_rows: source row out of range");
      const double* s = xv.data() + src * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += w * s[j];
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c, mixture](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < mixture.size(); ++r) {
      const double* gr = g.data() + r * c;
      for (const auto& [src, w] : mixture[r]) {
        double* d = gx.data() + src * c;
        for (std::size_t j = 0; j < c; ++j) d[j] += w * gr[j];
      }
    }
  });
}

Var cross_entropy(Var probabilities, std::span<const std::size_t> labels) {
  const Tensor& pv = probabilities.value();
  if (pv.rank() > 2) throw DimensionError("cross_entropy: rank must be 1 or 2");
  const std::size_t r = pv.rows();
  if (labels.size() != r) throw DimensionError("cross_entropy: one label per row required");
  if (r == 0) throw DomainError("cross_entropy: empty batch");
  double total = 0.0;
  std::vector<char> clamped(r, 0);
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] >= pv.cols()) throw DimensionError("cross_entropy: label out of range");
    double p = pv.at(i, labels[i]);
    if (p < kProbabilityFloor) {
      p = kProbabilityFloor;
      clamped[i] = 1;
      ++probabilities.tape().diagnostics().probability_floor_hits;
    }
    total -= std::log(p);
  }
  const double inv = 1.0 / static_cast<double>(r);
  const std::size_t ip = probabilities.id();
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return probabilities.tape().record(
      Tensor::scalar(total * inv), {probabilities},
      [ip, inv, y = std::move(y), clamped = std::move(clamped)](Tape& t, const Tensor& g) {
        const Tensor& p = t.value(ip);
        Tensor& gp = t.grad_buffer(ip);
        for (std::size_t i = 0; i < y.size(); ++i) {
          if (clamped[i]) continue;
          gp.at(i, y[i]) -= g[0] * inv / p.at(i, y[i]);
        }
      });
}

Var kl_div(Var p, Var q) {
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  if (pv.size() != qv.size() || pv.cols() != qv.cols()) {
    throw DimensionError("kl_div: length mismatch " + shape_str(pv.shape()) + " vs " +
                         shape_str(qv.shape()));
  }
  const std::size_t r = pv.rows();
  if (r == 0) throw DomainError("kl_div: empty batch");
  const double inv = 1.0 / static_cast<double>(r);
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] <= 0.0) continue;
    double qi = qv[i];
    if (qi < kProbabilityFloor) {
      qi = kProbabilityFloor;
      ++p.tape().diagnostics().probability_floor_hits;
    }
    total += pv[i] * (std::log(pv[i]) - std::log(qi));
  }
  const std::size_t ip = p.id(), iq = q.id();
  return p.tape().record(Tensor::scalar(total * inv), {p, q}, [ip, iq, inv](Tape& t, const Tensor& g) {
    const Tensor& pt = t.value(ip);
    const Tensor& qt = t.value(iq);
    const double s = g[0] * inv;
    if (t.requires_grad(ip)) {
      Tensor& gp = t.grad_buffer(ip);
      for (std::size_t i = 0; i < pt.size(); ++i) {
        if (pt[i] <= 0.0) continue;
        const double qi = std::max(qt[i], kProbabilityFloor);
        gp[i] += s * (std::log(pt[i]) - std::log(qi) + 1.0);
      }
    }
    if (t.requires_grad(iq)) {
      Tensor& gq = t.grad_buffer(iq);
      for (std::size_t i = 0; i < pt.size(); ++i) {
        if (pt[i] <= 0.0 || qt[i] < kProbabilityFloor) continue;
        gq[i] -= s * pt[i] / qt[i];
      }
    }
  });
}

Var squared_l2(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "squared_l2");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    total += d * d;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(Tensor::scalar(total), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& at = t.value(ia);
    const Tensor& bt = t.value(ib);
    const bool ga_on = t.requires_grad(ia), gb_on = t.requires_grad(ib);
    Tensor* ga = ga_on ? &t.grad_buffer(ia) : nullptr;
    Tensor* gb = gb_on ? &t.grad_buffer(ib) : nullptr;
    for (std::size_t i = 0; i < at.size(); ++i) {
      const double d = 2.0 * g[0] * (at[i] - bt[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

// ------------------------------------------------------------------- SGD

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  if (!(lr > 0.0)) throw ContractError("sgd_step: learning rate must be positive");
  if (params.size() != grads.size()) throw DimensionError("sgd_step: parameter/gradient count mismatch");
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p];
    const Tensor& g = grads[p];
    if (g.size() != w.size()) throw DimensionError("sgd_step: gradient shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  }
}

Sgd::Sgd(SgdOptions options) : options_(options) {
  if (!(options_.lr > 0.0)) throw ContractError("sgd: learning rate must be positive");
  if (options_.momentum < 0.0 || options_.momentum >= 1.0) throw ContractError("sgd: momentum in [0,1)");
  if (options_.weight_decay < 0.0) throw ContractError("sgd: weight decay must be non-negative");
}

void Sgd::set_lr(double lr) {
  if (!(lr > 0.0)) throw ContractError("sgd: learning rate must be positive");
  options_.lr = lr;
}

void Sgd::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (options_.momentum == 0.0 && options_.weight_decay == 0.0) {
    sgd_step(params, grads, options_.lr);
    return;
  }
  if (params.size() != grads.size()) throw DimensionError("sgd: parameter/gradient count mismatch");
  if (velocity_.size() != params.size()) velocity_.assign(params.size(), Tensor{});
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p];
    const Tensor& g = grads[p];
    Tensor& v = velocity_[p];
    if (v.shape() != w.shape() || v.size() != w.size()) v = Tensor(w.shape(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + options_.weight_decay * w[i];
      v[i] = options_.momentum * v[i] + gi;
      w[i] -= options_.lr * v[i];
    }
  }
}

}  // namespace bace::ad
