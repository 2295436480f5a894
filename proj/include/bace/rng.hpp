#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace bace {

// Stream purposes for hierarchical seed derivation. Values are part of the
// reproducibility contract; append, never renumber.
enum class RngPurpose : std::uint64_t {
  init = 1,
  expand = 2,
  shuffle = 3,
  buffer_sample = 4,
  neighbor_random = 5,
  probe_init = 6,
  random_baseline = 7,
  data_centers = 8,
  data_samples = 9,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Child seed for (root, path...). Distinct paths give independent streams, so
// consuming more numbers in one stream never shifts another.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(root);
  for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t root, RngPurpose purpose, std::uint64_t task = 0,
                                std::uint64_t epoch = 0) {
  return std::mt19937_64(derive_seed(root, {static_cast<std::uint64_t>(purpose), task, epoch}));
}

}  // namespace bace
