#include "bace/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bace/errors.hpp"
#include "bace/losses.hpp"
#include "bace/rng.hpp"

namespace bace {

bool AccuracyMatrix::row_complete(std::size_t t) const {
  if (t >= rows.size() || rows[t].size() != t + 1) return false;
  return std::all_of(rows[t].begin(), rows[t].end(), [](double v) { return std::isfinite(v); });
}

void AccuracyMatrix::validate() const {
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (!rows[t].empty() && rows[t].size() != t + 1) {
      throw ContractError("accuracy matrix: row " + std::to_string(t) + " must hold " + std::to_string(t + 1) +
                          " entries");
    }
    for (double v : rows[t])
      if (!(v >= 0.0 && v <= 1.0)) throw ContractError("accuracy matrix: entry outside [0,1]");
  }
}

bool AccuracyMatrix::operator==(const AccuracyMatrix& other) const {
  auto same = [](const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (std::isnan(a[i]) && std::isnan(b[i])) continue;
      if (a[i] != b[i]) return false;
    }
    return true;
  };
  if (rows.size() != other.rows.size()) return false;
  for (std::size_t t = 0; t < rows.size(); ++t)
    if (!same(rows[t], other.rows[t])) return false;
  return same(before, other.before) && same(random_baseline, other.random_baseline);
}

double avg_accuracy(const AccuracyMatrix& m, std::size_t t) {
  if (!m.row_complete(t)) throw ContractError("avg_accuracy: row " + std::to_string(t) + " is incomplete");
  const auto& row = m.rows[t];
  return std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
}

double forgetting(const AccuracyMatrix& m) {
  const std::size_t T = m.num_tasks();
  if (T < 2) throw ContractError("forgetting: needs at least two tasks");
  for (std::size_t t = 0; t < T; ++t)
    if (!m.row_complete(t)) throw ContractError("forgetting: row " + std::to_string(t) + " is incomplete");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < T; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = i; j + 1 < T; ++j) best = std::max(best, m.rows[j][i]);
    total += best - m.rows[T - 1][i];
  }
  return total / static_cast<double>(T - 1);
}

double forward_transfer(const AccuracyMatrix& m) {
  const std::size_t T = m.num_tasks();
  if (T < 2) throw ContractError("forward_transfer: needs at least two tasks");
  if (m.before.size() < T || m.random_baseline.size() < T) {
    throw ContractError("forward_transfer: pre-training or random-baseline accuracies missing");
  }
  double total = 0.0;
  for (std::size_t i = 1; i < T; ++i) {
    if (!std::isfinite(m.before[i]) || !std::isfinite(m.random_baseline[i])) {
      throw ContractError("forward_transfer: missing entry for task " + std::to_string(i));
    }
    total += m.before[i] - m.random_baseline[i];
  }
  return total / static_cast<double>(T - 1);
}

double accuracy(const ModelState& model, const LabeledSet& set) {
  if (set.size() == 0) return 0.0;
  const Tensor logits = logits_of(model, set.x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto row = logits.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (model.registry.class_of_row(best) == set.y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

std::vector<double> evaluate(const ModelState& model, const TaskStream& stream, std::size_t upto) {
  std::vector<double> acc;
  for (std::size_t t = 0; t <= upto && t < stream.num_tasks(); ++t) acc.push_back(accuracy(model, stream.tasks[t].test));
  return acc;
}

// ---------------------------------------------------------------- probing

ProbeResult probing_accuracy(const ModelState& model, const TaskStream& stream, std::size_t upto,
                             const ProbeConfig& cfg, std::uint64_t seed) {
  if (upto >= stream.num_tasks()) throw ContractError("probing_accuracy: checkpoint beyond the stream");
  ModelState probe = model;  // private copy; only its classifier is retrained
  probe.classifier = Tensor(ad::Shape{0, model.encoder.feature_dim});
  probe.registry = ClassRegistry{};
  std::mt19937_64 rng = make_rng(seed, RngPurpose::probe_init, upto);
  for (std::size_t t = 0; t <= upto; ++t) expand_classifier(probe, stream.tasks[t].classes, rng);

  const LabeledSet train = stream.train_upto(upto);
  const Tensor feats = features_of(model, train.x);
  const auto rows = label_rows(probe.registry, train.y);
  ProbeResult result;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
    ad::Tape tape;
    Var h = tape.constant(feats);
    Var w = tape.parameter(probe.classifier);
    Var cos = ad::matmul(ad::normalize_rows(h), ad::transpose(ad::normalize_rows(w)));
    Var loss = plain_cross_entropy(ad::mul_scalar(cos, tape.constant(probe.scale)), rows);
    tape.backward(loss);
    const Tensor g = tape.grad(w);
    Tensor* params[] = {&probe.classifier};
    ad::sgd_step(params, std::span<const Tensor>(&g, 1), cfg.lr);
    result.epochs = e + 1;
    result.final_loss = loss.value().item();
    if (std::abs(prev - result.final_loss) < cfg.plateau) break;
    prev = result.final_loss;
  }
  result.per_task = evaluate(probe, stream, upto);
  result.accuracy = std::accumulate(result.per_task.begin(), result.per_task.end(), 0.0) /
                    static_cast<double>(result.per_task.size());
  return result;
}

// --------------------------------------------------------------- tracking

namespace {

std::vector<double> unit(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double n = std::max(std::sqrt(ss), ad::kNormFloor);
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

double class_distance(const ModelState& model, const Tensor& feats, const LabeledSet& train, int class_id) {
  const std::size_t f = feats.cols();
  std::vector<double> mu(f, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.y[i] != class_id) continue;
    ++count;
    const auto r = feats.row(i);
    for (std::size_t j = 0; j < f; ++j) mu[j] += r[j];
  }
  if (count == 0) throw ContractError("feature_embedding_distance: no samples of class " + std::to_string(class_id));
  for (double& v : mu) v /= static_cast<double>(count);
  const auto a = unit(model.classifier.row(model.registry.row_of(class_id)));
  const auto b = unit(mu);
  double ss = 0.0;
  for (std::size_t j = 0; j < f; ++j) ss += (a[j] - b[j]) * (a[j] - b[j]);
  return std::sqrt(ss);
}

}  // namespace

double feature_embedding_distance(const ModelState& model, const LabeledSet& train, int class_id) {
  if (!model.registry.contains(class_id)) throw ContractError("feature_embedding_distance: class not registered");
  return class_distance(model, features_of(model, train.x), train, class_id);
}

TrackingRecord track_checkpoint(const ModelState& model, const TaskStream& stream, std::size_t checkpoint) {
  TrackingRecord rec;
  rec.checkpoint = checkpoint;
  const LabeledSet train = stream.train_upto(checkpoint);
  const Tensor feats = features_of(model, train.x);
  double old_sum = 0.0, new_sum = 0.0;
  std::size_t old_n = 0, new_n = 0;
  for (std::size_t t = 0; t <= checkpoint; ++t) {
    double task_sum = 0.0;
    for (int c : stream.tasks[t].classes) {
      const double d = class_distance(model, feats, train, c);
      rec.class_distance[c] = d;
      task_sum += d;
      if (t == checkpoint) {
        new_sum += d;
        ++new_n;
      } else {
        old_sum += d;
        ++old_n;
      }
    }
    rec.task_mean.push_back(task_sum / static_cast<double>(stream.tasks[t].classes.size()));
  }
  rec.new_mean = new_sum / static_cast<double>(new_n);
  rec.old_mean = old_n ? old_sum / static_cast<double>(old_n) : 0.0;
  rec.old_minus_new = old_n ? rec.old_mean - rec.new_mean : 0.0;
  return rec;
}

TrackingSummary tracking_report(const std::vector<TrackingRecord>& records) {
  TrackingSummary s;
  s.records = records;
  if (!records.empty()) s.final_old_minus_new = records.back().old_minus_new;
  return s;
}

}  // namespace bace
