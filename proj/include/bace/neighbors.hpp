#pragma once

// Exact Euclidean KNN over teacher features and the reciprocal-distance
// weights used by the joint-score objective.

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bace/autodiff.hpp"

namespace bace {

using ad::Tensor;

inline constexpr double kDistanceFloor = 1e-8;

struct NeighborIndex {
  std::size_t k = 0;
  std::vector<std::size_t> ids;    // [n × k], ascending distance
  std::vector<double> distances;   // [n × k]

  std::size_t size() const noexcept { return k ? ids.size() / k : 0; }
  std::span<const std::size_t> neighbors(std::size_t i) const { return {ids.data() + i * k, k}; }
  std::span<const double> neighbor_distances(std::size_t i) const { return {distances.data() + i * k, k}; }

  bool operator==(const NeighborIndex&) const = default;
};

// Self excluded; ties by lower id. Queries are split across `threads`
// workers; the result does not depend on the thread count.
NeighborIndex build_index(const Tensor& features, std::size_t k, unsigned threads = 1);

struct WeightVector {
  double self = 1.0;
  std::vector<double> neighbors;

  double total() const noexcept;
};

// w_self = W₀; w_k = (1−W₀)·(1/d_k) / Σ_j 1/d_j, distances floored at 1e-8.
WeightVector neighbor_weights(std::span<const double> distances, double w0);

enum class NeighborVariant { standard, same, different, uniform, random, reverse };

std::string to_string(NeighborVariant v);
NeighborVariant parse_neighbor_variant(const std::string& s);

// Neighbor list and weights for every sample of the pool.
struct NeighborPlan {
  std::vector<std::vector<std::size_t>> ids;
  std::vector<std::vector<double>> distances;
  std::vector<WeightVector> weights;
  NeighborIndex index;          // shared exact index (standard order)
  std::size_t fallbacks = 0;    // samples left with w_self = 1 (same/different)

  std::size_t size() const noexcept { return ids.size(); }
};

// Applies a neighbor-selection variant on top of the exact index.
//   same / different: keep only neighbors whose label matches / differs;
//   uniform: standard neighbors, equal weights (1−W₀)/K;
//   random: K distinct random non-self samples, reciprocal-distance weights;
//   reverse: the K farthest samples, reciprocal-distance weights.
NeighborPlan select_variant(const Tensor& features, std::size_t k, NeighborVariant mode,
                            std::span<const int> labels, double w0, std::mt19937_64& rng,
                            unsigned threads = 1);

// Plan with only self weight 1 (W₀ = 1 or no index).
NeighborPlan self_only_plan(std::size_t n);

// CSV rows: sample,label,rank,neighbor,neighbor_label,distance,weight
std::string neighbors_csv(const NeighborPlan& plan, std::span<const int> labels);

}  // namespace bace
