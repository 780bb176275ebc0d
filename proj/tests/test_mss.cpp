#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "oracles.hpp"
#include "watervib/mss.hpp"
#include "watervib/partition.hpp"

using namespace watervib;
using Catch::Approx;

TEST_CASE("partition enumeration matches Bell numbers") {
  CHECK(enumerate_partitions(1).size() == 1);
  CHECK(enumerate_partitions(3).size() == 5);
  CHECK(enumerate_partitions(5).size() == 52);
  CHECK(bell_number(12) == 4213597ULL);
  CHECK_THROWS_AS(enumerate_partitions(13), std::invalid_argument);
  CHECK_THROWS_AS(enumerate_partitions(0), std::invalid_argument);
}

TEST_CASE("enumerated partitions are canonical and distinct") {
  const auto parts = enumerate_partitions(5);
  std::set<std::vector<int>> seen;
  for (const auto& p : parts) {
    CHECK_NOTHROW(validate(p));
    seen.insert(p.block_of);
  }
  CHECK(seen.size() == parts.size());
}

TEST_CASE("canonicalization relabels by first appearance") {
  const Partition p = canonicalized({7, 7, 3, 7, 3, 9});
  CHECK(p.block_of == std::vector<int>{0, 0, 1, 0, 1, 2});
  CHECK(p.n_blocks == 3);
  CHECK(p == canonicalized({0, 0, 5, 0, 5, 1}));
}

TEST_CASE("construct_mss on the reference channels") {
  SECTION("copy channel: identity partition") {
    const Partition p = construct_mss(oracles::copy_channel());
    CHECK(p == Partition::identity(2));
  }
  SECTION("4-symbol channel: posterior pairs merge") {
    const Partition p = construct_mss(oracles::four_symbol_channel());
    CHECK(p == canonicalized({0, 0, 1, 1}));
    CHECK(statistic_rate(oracles::four_symbol_channel(), p).value ==
          Approx(std::log(2.0)).margin(1e-12));
    CHECK(statistic_rate(oracles::four_symbol_channel(), Partition::identity(4)).value ==
          Approx(std::log(4.0)).margin(1e-12));
  }
  SECTION("independent channel: single block") {
    const Partition p = construct_mss(oracles::independent_channel(2, 5));
    CHECK(p == Partition::single_block(5));
  }
}

TEST_CASE("construct_mss routes zero-marginal symbols to one block") {
  JointPMF j;
  j.m_size = 2;
  j.x_size = 4;
  // symbols 1 and 3 carry no mass
  j.p = {0.5, 0.0, 0.0, 0.0,
         0.0, 0.0, 0.5, 0.0};
  const Partition p = construct_mss(j);
  CHECK(p.block_of[1] == p.block_of[3]);
  CHECK(p.block_of[0] != p.block_of[2]);
  CHECK(is_sufficient(j, p).sufficient);
}

TEST_CASE("is_sufficient") {
  const JointPMF j = oracles::four_symbol_channel();
  SECTION("identity partition is sufficient with zero gap") {
    const SufficiencyReport r = is_sufficient(j, Partition::identity(4));
    CHECK(r.sufficient);
    CHECK(r.gap.value == Approx(0.0).margin(1e-15));
    CHECK(r.i_mx.value == Approx(std::log(2.0)).margin(1e-12));
  }
  SECTION("single block is not sufficient on a dependent channel") {
    const SufficiencyReport r = is_sufficient(j, Partition::single_block(4));
    CHECK_FALSE(r.sufficient);
    CHECK(r.i_mt.value == Approx(0.0).margin(1e-15));
  }
  SECTION("the posterior-grouped partition is sufficient with tiny gap") {
    const SufficiencyReport r = is_sufficient(j, canonicalized({0, 0, 1, 1}));
    CHECK(r.sufficient);
    CHECK(r.gap.value < 1e-12);
    CHECK(r.i_xt.value == Approx(std::log(2.0)).margin(1e-12));
  }
  SECTION("alphabet mismatch throws") {
    CHECK_THROWS_AS(is_sufficient(j, Partition::identity(5)), std::invalid_argument);
  }
}

TEST_CASE("verify_theorems on the 4-symbol channel (exhaustive over 15 partitions)") {
  const JointPMF j = oracles::four_symbol_channel();
  const MSSReport r = verify_theorems(j);
  CHECK(r.theorem2_holds);
  CHECK(r.theorem3_holds);
  CHECK_FALSE(r.flagged);
  CHECK(r.rate.value == Approx(std::log(2.0)).margin(1e-12));
  CHECK(r.mss == canonicalized({0, 0, 1, 1}));
  // independent brute force: count sufficient partitions and the minimal rate
  int n_sufficient = 0;
  double min_rate = 1e300;
  for (const auto& p : enumerate_partitions(4)) {
    if (is_sufficient(j, p).sufficient) {
      ++n_sufficient;
      min_rate = std::min(min_rate, statistic_rate(j, p).value);
    }
  }
  CHECK(n_sufficient == 4);  // {ab|cd} and its refinements
  CHECK(r.all_sufficient_rates.size() == 4);
  CHECK(min_rate == Approx(r.rate.value).margin(1e-12));
}

TEST_CASE("verify_theorems on the independent channel") {
  const MSSReport r = verify_theorems(oracles::independent_channel(2, 4));
  CHECK(r.theorem2_holds);
  CHECK(r.theorem3_holds);
  CHECK(r.mss == Partition::single_block(4));
  CHECK(r.rate.value == Approx(0.0).margin(1e-12));
}

TEST_CASE("theorems hold on random Dirichlet joints") {
  Rng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    const int ms = 2 + static_cast<int>(rng.uniform_int(2));
    const int xs = 2 + static_cast<int>(rng.uniform_int(5));
    const JointPMF j = oracles::random_joint(ms, xs, rng);
    const MSSReport r = verify_theorems(j);
    if (!r.flagged) {
      CHECK(r.theorem2_holds);
      CHECK(r.theorem3_holds);
    }
    // the constructed MSS is itself sufficient
    CHECK(is_sufficient(j, r.mss, 1e-9).gap.value <= 1e-9);
  }
}

TEST_CASE("construct_mss is idempotent") {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const JointPMF j = oracles::random_joint(3, 6, rng);
    const Partition p = construct_mss(j);
    const JointPMF pushed = apply_statistic(j, p);
    CHECK(construct_mss(pushed) == Partition::identity(p.n_blocks));
  }
}

TEST_CASE("theorem-2 inequality holds exhaustively") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const JointPMF j = oracles::random_joint(2, 5, rng);
    const MSSReport r = verify_theorems(j);
    for (const auto& [p, rate] : r.all_sufficient_rates)
      CHECK(r.rate.value <= rate + 1e-9);
  }
}

TEST_CASE("verify_theorems rejects alphabets beyond 12") {
  JointPMF j;
  j.m_size = 1;
  j.x_size = 13;
  j.p.assign(13, 1.0 / 13.0);
  CHECK_THROWS_AS(verify_theorems(j), std::invalid_argument);
}
