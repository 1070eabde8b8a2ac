#include <doctest.h>

#include <cstdint>
#include <limits>

#include "goldfish/analytics.hpp"
#include "goldfish/errors.hpp"

using namespace goldfish;

TEST_CASE("regeneration probabilities") {
  // reference values computed with 30-digit arithmetic
  CHECK(regen_prob_standard(0.999, 256) == doctest::Approx(0.77404281886050828).epsilon(1e-12));
  CHECK(regen_prob_goldfish(0.999, 0.95, 3, 256) == doctest::Approx(0.010590691281629978).epsilon(1e-12));
  CHECK(regen_prob_standard(0.9, 64) == doctest::Approx(0.0011790184577738583).epsilon(1e-12));
  CHECK(regen_prob_goldfish(0.9, 0.5, 4, 64) == doctest::Approx(9.7086875017333105e-8).epsilon(1e-12));
  CHECK(regen_prob_goldfish(0.8, 0.8, 4, 50) == regen_prob_standard(0.8, 50));
  CHECK(regen_prob_goldfish(0.99, 0.3, 4, 100) < regen_prob_standard(0.99, 100));
  CHECK(regen_prob_standard(1.0, 1000) == 1.0);
  CHECK_THROWS_AS(regen_prob_standard(1.5, 3), ConfigError);
  CHECK_THROWS_AS(regen_prob_goldfish(0.5, 0.5, 1, 3), ConfigError);
  CHECK_THROWS_AS(regen_prob_standard(0.5, -1), ConfigError);
}

TEST_CASE("token accounting") {
  CHECK(supervised_tokens(1000, 4) == 750);
  CHECK(supervised_tokens(1000000, 1000000) == 999999);
  CHECK(supervised_tokens(7, 3) == 4);
  CHECK(required_input(750, 4) == 1000);
  CHECK(required_input(20000000000ULL, 4) == 26666666667ULL);
  CHECK(required_input(4, 3) == 6);
  CHECK_THROWS_AS(supervised_tokens(10, 1), ConfigError);
  CHECK_THROWS_AS(required_input(10, 0), ConfigError);
  // no overflow near the top of the range
  const std::uint64_t big = std::numeric_limits<std::uint64_t>::max();
  CHECK(supervised_tokens(big, 2) == big / 2);
}

TEST_CASE("required input is the least input reaching the target") {
  for (std::uint64_t k = 2; k <= 9; ++k) {
    for (std::uint64_t s = 0; s <= 300; ++s) {
      const std::uint64_t in = required_input(s, k);
      CHECK(supervised_tokens(in, k) >= s);
      if (in > 0) CHECK(supervised_tokens(in - 1, k) < s);
    }
  }
}
