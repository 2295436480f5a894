#include "bace/neighbors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "bace/errors.hpp"

namespace bace {

namespace {

constexpr std::size_t kBlock = 64;

double squared_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = a[j] - b[j];
    s += diff * diff;
  }
  return s;
}

template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

NeighborIndex build_index(const Tensor& features, std::size_t k, unsigned threads) {
  if (features.rank() != 2) throw DimensionError("build_index: expected a feature matrix");
  const std::size_t n = features.rows(), d = features.cols();
  if (k == 0 || k >= n) {
    throw ContractError("build_index: need 0 < K < n (K=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  }
  NeighborIndex index;
  index.k = k;
  index.ids.assign(n * k, 0);
  index.distances.assign(n * k, 0.0);

  parallel_for(n, threads, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::pair<double, std::size_t>> cand(n);
    std::vector<double> dist(n * kBlock);
    for (std::size_t q0 = lo; q0 < hi; q0 += kBlock) {
      const std::size_t q1 = std::min(hi, q0 + kBlock);
      // Tile over candidates so a block of queries reuses each candidate row.
      for (std::size_t c0 = 0; c0 < n; c0 += kBlock) {
        const std::size_t c1 = std::min(n, c0 + kBlock);
        for (std::size_t q = q0; q < q1; ++q) {
          const double* qa = features.data() + q * d;
          for (std::size_t c = c0; c < c1; ++c)
            dist[(q - q0) * n + c] = squared_distance(qa, features.data() + c * d, d);
        }
      }
      for (std::size_t q = q0; q < q1; ++q) {
        std::size_t m = 0;
        for (std::size_t c = 0; c < n; ++c)
          if (c != q) cand[m++] = {dist[(q - q0) * n + c], c};
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k),
                          cand.begin() + static_cast<std::ptrdiff_t>(m));
        for (std::size_t j = 0; j < k; ++j) {
          index.ids[q * k + j] = cand[j].second;
          index.distances[q * k + j] = std::sqrt(cand[j].first);
        }
      }
    }
  });
  return index;
}

double WeightVector::total() const noexcept {
  return std::accumulate(neighbors.begin(), neighbors.end(), self);
}

WeightVector neighbor_weights(std::span<const double> distances, double w0) {
  if (!(w0 > 0.0 && w0 <= 1.0)) throw ContractError("neighbor_weights: W0 must lie in (0, 1]");
  WeightVector w;
  w.self = w0;
  w.neighbors.assign(distances.size(), 0.0);
  if (distances.empty()) {
    w.self = 1.0;
    return w;
  }
  if (w0 == 1.0) return w;
  double denom = 0.0;
  for (std::size_t j = 0; j < distances.size(); ++j) {
    if (distances[j] < 0.0) throw ContractError("neighbor_weights: negative distance");
    w.neighbors[j] = 1.0 / std::max(distances[j], kDistanceFloor);
    denom += w.neighbors[j];
  }
  for (double& v : w.neighbors) v = (1.0 - w0) * v / denom;
  return w;
}

std::string to_string(NeighborVariant v) {
  switch (v) {
    case NeighborVariant::standard: return "standard";
    case NeighborVariant::same: return "same";
    case NeighborVariant::different: return "different";
    case NeighborVariant::uniform: return "uniform";
    case NeighborVariant::random: return "random";
    case NeighborVariant::reverse: return "reverse";
  }
  return "standard";
}

NeighborVariant parse_neighbor_variant(const std::string& s) {
  for (auto v : {NeighborVariant::standard, NeighborVariant::same, NeighborVariant::different,
                 NeighborVariant::uniform, NeighborVariant::random, NeighborVariant::reverse}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("neighbor_variant", "unknown variant '" + s + "'");
}

NeighborPlan self_only_plan(std::size_t n) {
  NeighborPlan plan;
  plan.ids.assign(n, {});
  plan.distances.assign(n, {});
  plan.weights.assign(n, WeightVector{1.0, {}});
  return plan;
}

NeighborPlan select_variant(const Tensor& features, std::size_t k, NeighborVariant mode,
                            std::span<const int> labels, double w0, std::mt19937_64& rng, unsigned threads) {
  const std::size_t n = features.rows(), d = features.cols();
  if (labels.size() != n) throw DimensionError("select_variant: one label per sample required");
  NeighborPlan plan;
  plan.index = build_index(features, k, threads);
  plan.ids.resize(n);
  plan.distances.resize(n);
  plan.weights.resize(n);

  auto dist_to = [&](std::size_t a, std::size_t b) {
    return std::sqrt(squared_distance(features.data() + a * d, features.data() + b * d, d));
  };

  for (std::size_t i = 0; i < n; ++i) {
    const auto nb = plan.index.neighbors(i);
    const auto nd = plan.index.neighbor_distances(i);
    std::vector<std::size_t> ids;
    std::vector<double> dists;
    switch (mode) {
      case NeighborVariant::standard:
      case NeighborVariant::uniform:
        ids.assign(nb.begin(), nb.end());
        dists.assign(nd.begin(), nd.end());
        break;
      case NeighborVariant::same:
      case NeighborVariant::different:
        for (std::size_t j = 0; j < k; ++j) {
          const bool same_label = labels[nb[j]] == labels[i];
          if (same_label == (mode == NeighborVariant::same)) {
            ids.push_back(nb[j]);
            dists.push_back(nd[j]);
          }
        }
        break;
      case NeighborVariant::random: {
        // Partial Fisher–Yates over the non-self pool.
        std::vector<std::size_t> pool;
        pool.reserve(n - 1);
        for (std::size_t c = 0; c < n; ++c)
          if (c != i) pool.push_back(c);
        for (std::size_t j = 0; j < k; ++j) {
          std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
          std::swap(pool[j], pool[pick(rng)]);
        }
        std::vector<std::pair<double, std::size_t>> chosen;
        for (std::size_t j = 0; j < k; ++j) chosen.emplace_back(dist_to(i, pool[j]), pool[j]);
        std::sort(chosen.begin(), chosen.end());
        for (const auto& [dd, id] : chosen) {
          ids.push_back(id);
          dists.push_back(dd);
        }
        break;
      }
      case NeighborVariant::reverse: {
        std::vector<std::pair<double, std::size_t>> all;
        all.reserve(n - 1);
        for (std::size_t c = 0; c < n; ++c)
          if (c != i) all.emplace_back(-dist_to(i, c), c);
        std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
        for (std::size_t j = 0; j < k; ++j) {
          ids.push_back(all[j].second);
          dists.push_back(-all[j].first);
        }
        break;
      }
    }

    WeightVector w;
    if (ids.empty()) {
      w = WeightVector{1.0, {}};
      ++plan.fallbacks;
    } else if (mode == NeighborVariant::uniform) {
      w.self = w0;
      w.neighbors.assign(ids.size(), (1.0 - w0) / static_cast<double>(ids.size()));
    } else {
      w = neighbor_weights(dists, w0);
    }
    plan.ids[i] = std::move(ids);
    plan.distances[i] = std::move(dists);
    plan.weights[i] = std::move(w);
  }
  return plan;
}

std::string neighbors_csv(const NeighborPlan& plan, std::span<const int> labels) {
  std::ostringstream out;
  out.precision(17);
  out << "sample,label,rank,neighbor,neighbor_label,distance,weight\n";
  for (std::size_t i = 0; i < plan.size(); ++i) {
    for (std::size_t j = 0; j < plan.ids[i].size(); ++j) {
      const std::size_t nb = plan.ids[i][j];
      out << i << ',' << labels[i] << ',' << j << ',' << nb << ',' << labels[nb] << ','
          << plan.distances[i][j] << ','
          << plan.weights[i].neighbors[j] << '\n';
    }
  }
  return out.str();
}

}  // namespace bace
