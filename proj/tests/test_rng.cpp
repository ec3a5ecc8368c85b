#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "prevmatch/rng.hpp"

using prevmatch::CounterRng;

TEST_CASE("same seed gives identical streams") {
  auto a = CounterRng::seeded(42);
  auto b = CounterRng::seeded(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("different seeds and forks give different streams") {
  auto a = CounterRng::seeded(1);
  auto b = CounterRng::seeded(2);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64() ? 1 : 0;
  REQUIRE(same == 0);

  auto parent = CounterRng::seeded(7);
  auto c1 = parent.fork(1);
  auto c2 = parent.fork(2);
  auto c1b = parent.fork(1, 0, 1);
  same = 0;
  for (int i = 0; i < 64; ++i) {
    const auto x = c1.next_u64();
    same += (x == c2.next_u64()) ? 1 : 0;
    same += (x == c1b.next_u64()) ? 1 : 0;
  }
  REQUIRE(same == 0);
}

TEST_CASE("fork is independent of parent draw position") {
  auto a = CounterRng::seeded(9);
  auto b = CounterRng::seeded(9);
  (void)b.next_u64();
  (void)b.next_u64();
  auto fa = a.fork(3);
  auto fb = b.fork(3);
  for (int i = 0; i < 16; ++i) REQUIRE(fa.next_u64() == fb.next_u64());
}

TEST_CASE("next_double lies in [0,1) and is roughly uniform") {
  auto rng = CounterRng::seeded(5);
  const int n = 10000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.next_double();
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
    sum += v;
  }
  REQUIRE(std::fabs(sum / n - 0.5) < 0.01);
}

TEST_CASE("uniform_int covers its range exactly") {
  auto rng = CounterRng::seeded(11);
  std::vector<std::uint64_t> counts(5, 0);
  for (int i = 0; i < 10000; ++i) ++counts[rng.uniform_int(5)];
  const double stat = oracle::chi_square(counts, std::vector<double>(5, 0.2));
  REQUIRE(stat < oracle::chi_square_crit_99(4));
  REQUIRE_THROWS_AS(rng.uniform_int(0), std::invalid_argument);
}

TEST_CASE("normal moments") {
  auto rng = CounterRng::seeded(13);
  const int n = 20000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  REQUIRE(std::fabs(mean) < 0.03);
  REQUIRE(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("gamma matches its mean/variance law") {
  auto rng = CounterRng::seeded(17);
  for (double shape : {0.5, 1.0, 2.5, 8.0}) {
    const int n = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double v = rng.gamma(shape);
      REQUIRE(v > 0.0);
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    // Gamma(k,1): mean k, variance k
    REQUIRE(std::fabs(mean - shape) < 5.0 * std::sqrt(shape / n) + 0.01);
    REQUIRE(std::fabs(var - shape) < 0.15 * shape + 0.05);
  }
  REQUIRE_THROWS_AS(rng.gamma(0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(rng.gamma(-1.0), std::invalid_argument);
}

TEST_CASE("sample_distinct draws k distinct indices") {
  auto rng = CounterRng::seeded(19);
  for (int trial = 0; trial < 200; ++trial) {
    auto picks = rng.sample_distinct(3, 8);
    REQUIRE(picks.size() == 3);
    for (std::size_t i = 0; i < picks.size(); ++i) {
      REQUIRE(picks[i] >= 0);
      REQUIRE(picks[i] < 8);
      for (std::size_t j = i + 1; j < picks.size(); ++j) REQUIRE(picks[i] != picks[j]);
    }
  }
  REQUIRE_THROWS_AS(rng.sample_distinct(4, 3), std::invalid_argument);
}

TEST_CASE("shuffle is a permutation and seed-stable") {
  auto rng = CounterRng::seeded(23);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});

  auto rng2 = CounterRng::seeded(23);
  std::vector<int> w{0, 1, 2, 3, 4, 5, 6, 7};
  rng2.shuffle(w);
  REQUIRE(v == w);
}
