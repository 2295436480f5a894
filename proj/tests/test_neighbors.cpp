#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "bace/errors.hpp"
#include "bace/neighbors.hpp"
#include "test_util.hpp"

using namespace bace;
using bace::testing::brute_force_knn;
using bace::testing::random_tensor;

namespace {

Tensor line_points(std::initializer_list<double> xs) {
  Tensor t(ad::Shape{xs.size(), 1});
  std::size_t i = 0;
  for (double x : xs) t[i++] = x;
  return t;
}

TEST(Index, CollinearHandCase) {
  const NeighborIndex idx = build_index(line_points({0, 1, 3}), 1);
  EXPECT_EQ(idx.ids, (std::vector<std::size_t>{1, 0, 1}));
  EXPECT_EQ(idx.distances, (std::vector<double>{1, 1, 2}));
}

TEST(Index, MatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (int inst = 0; inst < 40; ++inst) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(3, 300)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 64)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(n - 1, 8))(rng);
    Tensor f = random_tensor({n, d}, rng());
    if (inst % 3 == 0)
      for (double& v : f.values()) v = std::round(v * 2.0);  // grid points force exact ties
    const NeighborIndex idx = build_index(f, k);
    const auto oracle = brute_force_knn(f, k);
    for (std::size_t i = 0; i < n; ++i) {
      const auto got = idx.neighbors(i);
      ASSERT_TRUE(std::equal(got.begin(), got.end(), oracle[i].begin())) << "instance " << inst << " row " << i;
      const auto dist = idx.neighbor_distances(i);
      EXPECT_TRUE(std::is_sorted(dist.begin(), dist.end()));
      EXPECT_EQ(std::find(got.begin(), got.end(), i), got.end());
    }
  }
}

TEST(Index, DuplicatesPickEachOther) {
  const Tensor f = Tensor::from_rows({{0, 0}, {5, 5}, {0, 0}, {5, 5}});
  const NeighborIndex idx = build_index(f, 1);
  EXPECT_EQ(idx.ids, (std::vector<std::size_t>{2, 3, 0, 1}));
  EXPECT_EQ(idx.distances[0], 0.0);
}

TEST(Index, ThreadCountIrrelevant) {
  const Tensor f = random_tensor({257, 9}, 4);
  const NeighborIndex one = build_index(f, 5, 1);
  EXPECT_EQ(build_index(f, 5, 3), one);
  EXPECT_EQ(build_index(f, 5, 8), one);
  EXPECT_EQ(build_index(f, 5, 1), one);
}

TEST(Index, KMustBeBelowN) {
  const Tensor f = random_tensor({4, 2}, 1);
  EXPECT_THROW(build_index(f, 4), ContractError);
  EXPECT_THROW(build_index(f, 0), ContractError);
}

TEST(Weights, HandExample) {
  const double d[] = {1.0, 3.0};
  const WeightVector w = neighbor_weights(d, 0.95);
  EXPECT_DOUBLE_EQ(w.self, 0.95);
  EXPECT_NEAR(w.neighbors[0], 0.0375, 1e-15);
  EXPECT_NEAR(w.neighbors[1], 0.0125, 1e-15);
  EXPECT_NEAR(w.total(), 1.0, 1e-12);
}

TEST(Weights, BoundaryAndSymmetry) {
  const double d[] = {0.4, 2.0, 7.0};
  const WeightVector w1 = neighbor_weights(d, 1.0);
  EXPECT_EQ(w1.self, 1.0);
  for (double v : w1.neighbors) EXPECT_EQ(v, 0.0);

  const double eq[] = {2.5, 2.5};
  const WeightVector w = neighbor_weights(eq, 0.7);
  EXPECT_NEAR(w.neighbors[0], 0.15, 1e-15);
  EXPECT_NEAR(w.neighbors[1], 0.15, 1e-15);

  const double zero[] = {0.0, 1.0};
  const WeightVector wz = neighbor_weights(zero, 0.5);
  EXPECT_TRUE(std::isfinite(wz.neighbors[0]));
  EXPECT_NEAR(wz.total(), 1.0, 1e-9);
  EXPECT_THROW(neighbor_weights(d, 0.0), ContractError);
  EXPECT_THROW(neighbor_weights(d, 1.1), ContractError);
}

TEST(Weights, SimplexAndMonotone) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.01, 10.0), uw(0.05, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> d(1 + trial % 7);
    for (double& v : d) v = u(rng);
    std::sort(d.begin(), d.end());
    const WeightVector w = neighbor_weights(d, uw(rng));
    EXPECT_NEAR(w.total(), 1.0, 1e-9);
    for (std::size_t j = 0; j < d.size(); ++j) {
      EXPECT_GE(w.neighbors[j], 0.0);
      if (j + 1 < d.size() && d[j] < d[j + 1] && w.self < 1.0) EXPECT_GT(w.neighbors[j], w.neighbors[j + 1]);
    }
  }
}

TEST(Variants, StandardIsIndex) {
  const Tensor f = random_tensor({30, 3}, 6);
  std::vector<int> labels(30);
  for (std::size_t i = 0; i < 30; ++i) labels[i] = static_cast<int>(i % 3);
  std::mt19937_64 rng(0);
  const NeighborPlan plan = select_variant(f, 4, NeighborVariant::standard, labels, 0.9, rng);
  const NeighborIndex idx = build_index(f, 4);
  for (std::size_t i = 0; i < 30; ++i) {
    const auto nb = idx.neighbors(i);
    EXPECT_TRUE(std::equal(nb.begin(), nb.end(), plan.ids[i].begin()));
    EXPECT_EQ(plan.weights[i].neighbors, neighbor_weights(idx.neighbor_distances(i), 0.9).neighbors);
  }
}

TEST(Variants, UniformWeights) {
  const Tensor f = random_tensor({20, 2}, 7);
  std::vector<int> labels(20, 0);
  std::mt19937_64 rng(0);
  const NeighborPlan plan = select_variant(f, 5, NeighborVariant::uniform, labels, 0.8, rng);
  for (const auto& w : plan.weights) {
    EXPECT_DOUBLE_EQ(w.self, 0.8);
    for (double v : w.neighbors) EXPECT_NEAR(v, 0.04, 1e-15);
  }
}

TEST(Variants, ReverseTakesFarthest) {
  const int labels[] = {0, 0, 0};
  std::mt19937_64 rng(0);
  const NeighborPlan plan = select_variant(line_points({0, 1, 3}), 1, NeighborVariant::reverse, labels, 0.9, rng);
  EXPECT_EQ(plan.ids[0], (std::vector<std::size_t>{2}));
  EXPECT_EQ(plan.ids[1], (std::vector<std::size_t>{2}));
  EXPECT_EQ(plan.ids[2], (std::vector<std::size_t>{0}));
}

TEST(Variants, RandomIsSeededAndValid) {
  const Tensor f = random_tensor({25, 3}, 8);
  std::vector<int> labels(25, 1);
  std::mt19937_64 a(5), b(5);
  const NeighborPlan pa = select_variant(f, 3, NeighborVariant::random, labels, 0.9, a);
  const NeighborPlan pb = select_variant(f, 3, NeighborVariant::random, labels, 0.9, b);
  EXPECT_EQ(pa.ids, pb.ids);
  for (std::size_t i = 0; i < 25; ++i) {
    auto ids = pa.ids[i];
    EXPECT_EQ(ids.size(), 3u);
    EXPECT_EQ(std::find(ids.begin(), ids.end(), i), ids.end());
    std::sort(ids.begin(), ids.end());
    EXPECT_EQ(std::adjacent_find(ids.begin(), ids.end()), ids.end());
    EXPECT_NEAR(pa.weights[i].total(), 1.0, 1e-9);
  }
}

TEST(Variants, SameAndDifferentFilterWithFallback) {
  // 0,1 share a label far from 2 (its own label); K = 1
  const Tensor f = line_points({0, 1, 10});
  const int labels[] = {0, 0, 1};
  std::mt19937_64 rng(0);
  const NeighborPlan same = select_variant(f, 1, NeighborVariant::same, labels, 0.9, rng);
  EXPECT_EQ(same.ids[0], (std::vector<std::size_t>{1}));
  EXPECT_TRUE(same.ids[2].empty());  // nearest is 1, a different label
  EXPECT_EQ(same.weights[2].self, 1.0);
  EXPECT_EQ(same.fallbacks, 1u);

  const NeighborPlan diff = select_variant(f, 1, NeighborVariant::different, labels, 0.9, rng);
  EXPECT_TRUE(diff.ids[0].empty());
  EXPECT_TRUE(diff.ids[1].empty());
  EXPECT_EQ(diff.ids[2], (std::vector<std::size_t>{1}));
  EXPECT_EQ(diff.fallbacks, 2u);
  for (const auto& w : diff.weights) EXPECT_NEAR(w.total(), 1.0, 1e-12);
}

TEST(Variants, Names) {
  EXPECT_EQ(parse_neighbor_variant("reverse"), NeighborVariant::reverse);
  EXPECT_THROW(parse_neighbor_variant("closest"), ConfigError);
}

TEST(Dump, CsvRows) {
  const int labels[] = {0, 0, 1};
  std::mt19937_64 rng(0);
  const NeighborPlan plan = select_variant(line_points({0, 1, 3}), 1, NeighborVariant::standard, labels, 0.5, rng);
  const std::string csv = neighbors_csv(plan, labels);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "sample,label,rank,neighbor,neighbor_label,distance,weight");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

}  // namespace
