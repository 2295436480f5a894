#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "bace/errors.hpp"
#include "bace/memory.hpp"
#include "test_util.hpp"

using namespace bace;
using bace::testing::greedy_orderings;
using bace::testing::random_tensor;

namespace {

TEST(Herding, FirstPickIsClosestToMean) {
  const Tensor f = Tensor::from_rows({{0, 0}, {10, 0}, {4, 1}, {0, 10}});
  // mean (3.5, 2.75); row 2 is closest
  EXPECT_EQ(herding_select(f, 1), (std::vector<std::size_t>{2}));
}

TEST(Herding, MatchesExhaustiveOracle) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const std::size_t n = 2 + seed % 4;
    const Tensor f = random_tensor({n, 3}, 100 + seed);
    const auto orders = greedy_orderings(f);
    ASSERT_EQ(orders.size(), 1u) << "seed " << seed;
    EXPECT_EQ(herding_select(f, n), orders[0]) << "seed " << seed;
    // a shorter budget is a prefix of the full order
    const auto part = herding_select(f, n - 1);
    EXPECT_TRUE(std::equal(part.begin(), part.end(), orders[0].begin()));
  }
}

TEST(Herding, DuplicatesStayUnique) {
  const Tensor f = Tensor::from_rows({{1, 1}, {1, 1}, {1, 1}, {2, 0}});
  auto picks = herding_select(f, 4);
  std::sort(picks.begin(), picks.end());
  EXPECT_EQ(picks, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Herding, Contracts) {
  const Tensor f = random_tensor({3, 2}, 1);
  EXPECT_THROW(herding_select(f, 4), ContractError);
  EXPECT_THROW(herding_select(f, 0), ContractError);
}

Task make_task(std::vector<int> classes, std::size_t per_class, std::uint64_t seed, std::size_t dim = 4) {
  Task t;
  t.classes = classes;
  const std::size_t n = per_class * classes.size();
  t.train.x = random_tensor({n, dim}, seed);
  for (std::size_t i = 0; i < n; ++i) t.train.y.push_back(classes[i % classes.size()]);
  t.test = t.train;
  return t;
}

ModelState identity_like_model(std::size_t dim = 4) {
  EncoderConfig enc;
  enc.input_dim = dim;
  enc.hidden_dims = {dim};
  enc.feature_dim = dim;
  std::mt19937_64 rng(0);
  return init_model(enc, ClassifierConfig{}, rng);
}

TEST(Buffer, CapacityScheduleTruncatesInOrder) {
  RehearsalBuffer buf(100);
  const ModelState m = identity_like_model();
  buf.update_after_task(make_task({0, 1, 2, 3}, 40, 1), m);
  ASSERT_EQ(buf.num_classes(), 4u);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(buf.exemplars(c).rows(), 25u);
  const Tensor before = buf.exemplars(2);
  buf.update_after_task(make_task({4}, 40, 2), m);
  for (int c = 0; c < 5; ++c) EXPECT_EQ(buf.exemplars(c).rows(), 20u);
  for (std::size_t r = 0; r < 20; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(buf.exemplars(2).at(r, j), before.at(r, j));
  EXPECT_EQ(buf.size(), 100u);
}

TEST(Buffer, LargeCapacityHoldsEverything) {
  RehearsalBuffer buf(1000);
  const ModelState m = identity_like_model();
  const Task a = make_task({0, 1}, 7, 3), b = make_task({2, 3}, 5, 4);
  buf.update_after_task(a, m);
  buf.update_after_task(b, m);
  EXPECT_EQ(buf.size(), a.train.size() + b.train.size());
}

TEST(Buffer, RemainderLeftUnused) {
  RehearsalBuffer buf(10);
  buf.update_after_task(make_task({0, 1, 2}, 10, 5), identity_like_model());
  EXPECT_EQ(buf.size(), 9u);
}

TEST(Buffer, SingleExemplarRepeats) {
  RehearsalBuffer buf(1);
  buf.update_after_task(make_task({7}, 3, 6), identity_like_model());
  std::mt19937_64 rng(1);
  const LabeledSet b = buf.sample_batch(5, rng);
  ASSERT_EQ(b.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(b.y[i], 7);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(b.x.at(i, j), buf.exemplars(7).at(0, j));
  }
}

TEST(Buffer, SeededSamplingReproducible) {
  RehearsalBuffer buf(20);
  buf.update_after_task(make_task({0, 1}, 15, 7), identity_like_model());
  std::mt19937_64 a(42), b(42);
  EXPECT_EQ(buf.sample_batch(16, a), buf.sample_batch(16, b));
}

TEST(Buffer, SamplingUniformOverClasses) {
  RehearsalBuffer buf(40);
  buf.update_after_task(make_task({0, 1, 2, 3}, 10, 8), identity_like_model());
  std::mt19937_64 rng(5);
  const std::size_t draws = 10000;
  const LabeledSet b = buf.sample_batch(draws, rng);
  std::vector<double> counts(4, 0.0);
  for (int y : b.y) counts[static_cast<std::size_t>(y)] += 1.0;
  const double expect = draws / 4.0;
  const double sd = std::sqrt(draws * 0.25 * 0.75);
  for (double c : counts) EXPECT_LT(std::abs(c - expect), 3.0 * sd);
}

TEST(Buffer, EmptyGivesEmptyBatch) {
  RehearsalBuffer buf(10);
  std::mt19937_64 rng(0);
  EXPECT_EQ(buf.sample_batch(8, rng).size(), 0u);
  EXPECT_TRUE(buf.empty());
}

TEST(Buffer, HerdsOnModelFeatures) {
  RehearsalBuffer buf(2);
  const Task t = make_task({0}, 6, 9);
  const ModelState m = identity_like_model();
  buf.update_after_task(t, m);
  const auto picks = herding_select(features_of(m, t.train.x), 2);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(buf.exemplars(0).at(r, j), t.train.x.at(picks[r], j));
}

}  // namespace
