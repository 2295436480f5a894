#include "bace/memory.hpp"

#include <limits>

#include "bace/errors.hpp"

namespace bace {

namespace {
constexpr double kTieTolerance = 1e-12;
}

std::vector<std::size_t> herding_select(const Tensor& features, std::size_t m) {
  const std::size_t n = features.rows(), d = features.cols();
  if (features.rank() != 2) throw DimensionError("herding_select: expected a feature matrix");
  if (m < 1 || m > n) {
    throw ContractError("herding_select: need 1 <= m <= n (m=" + std::to_string(m) + ", n=" + std::to_string(n) + ")");
  }
  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += features.at(i, j);
  for (double& v : mu) v /= static_cast<double>(n);

  std::vector<double> running(d, 0.0);
  std::vector<char> picked(n, 0);
  std::vector<std::size_t> order;
  order.reserve(m);
  for (std::size_t k = 1; k <= m; ++k) {
    const double inv_k = 1.0 / static_cast<double>(k);
    std::size_t best = n;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (picked[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = mu[j] - (features.at(i, j) + running[j]) * inv_k;
        dist += diff * diff;
      }
      // near-ties from rounding count as ties and keep the lower index
      if (best == n || dist < best_dist * (1.0 - kTieTolerance)) {
        best_dist = dist;
        best = i;
      }
    }
    picked[best] = 1;
    order.push_back(best);
    for (std::size_t j = 0; j < d; ++j) running[j] += features.at(best, j);
  }
  return order;
}

std::size_t RehearsalBuffer::size() const noexcept {
  std::size_t n = 0;
  for (const auto& [c, rows] : store_) n += rows.rows();
  return n;
}

void RehearsalBuffer::update_after_task(const Task& task, const ModelState& model) {
  std::size_t classes_seen = store_.size();
  for (int c : task.classes)
    if (!store_.count(c)) ++classes_seen;
  if (classes_seen == 0) return;
  const std::size_t budget = capacity_ / classes_seen;

  for (auto& [c, rows] : store_) {
    if (rows.rows() <= budget) continue;
    std::vector<std::size_t> keep(budget);
    for (std::size_t i = 0; i < budget; ++i) keep[i] = i;
    rows = ad::gather_rows(rows, keep);
  }

  if (budget == 0) {
    for (int c : task.classes) store_.erase(c);
    for (auto it = store_.begin(); it != store_.end();) it = it->second.rows() == 0 ? store_.erase(it) : ++it;
    return;
  }

  const Tensor feats = features_of(model, task.train.x);
  for (int c : task.classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < task.train.size(); ++i)
      if (task.train.y[i] == c) members.push_back(i);
    if (members.empty()) continue;
    const Tensor class_feats = ad::gather_rows(feats, members);
    const std::size_t m = std::min(budget, members.size());
    const auto pick = herding_select(class_feats, m);
    std::vector<std::size_t> rows;
    rows.reserve(m);
    for (std::size_t p : pick) rows.push_back(members[p]);
    store_[c] = ad::gather_rows(task.train.x, rows);
  }
}

LabeledSet RehearsalBuffer::sample_batch(std::size_t n, std::mt19937_64& rng) const {
  LabeledSet out;
  const std::size_t total = size();
  if (total == 0 || n == 0) return out;
  ++reads_;
  std::vector<std::pair<int, const Tensor*>> lists;
  std::vector<std::size_t> offsets;
  std::size_t acc = 0;
  for (const auto& [c, rows] : store_) {
    lists.emplace_back(c, &rows);
    offsets.push_back(acc);
    acc += rows.rows();
  }
  const std::size_t dim = lists.front().second->cols();
  out.x = Tensor(ad::Shape{n, dim});
  out.y.resize(n);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t flat = pick(rng);
    std::size_t l = lists.size() - 1;
    while (offsets[l] > flat) --l;
    const auto src = lists[l].second->row(flat - offsets[l]);
    std::copy(src.begin(), src.end(), out.x.row(i).begin());
    out.y[i] = lists[l].first;
  }
  return out;
}

LabeledSet RehearsalBuffer::contents() const {
  LabeledSet out;
  for (const auto& [c, rows] : store_) {
    LabeledSet part;
    part.x = rows;
    part.y.assign(rows.rows(), c);
    out.append(part);
  }
  return out;
}

void RehearsalBuffer::set_class(int class_id, Tensor exemplars) {
  if (exemplars.rank() != 2) throw DimensionError("buffer: exemplars must be a matrix");
  store_[class_id] = std::move(exemplars);
  std::size_t total = size();
  if (total > capacity_) throw ContractError("buffer: capacity exceeded");
}

}  // namespace bace
