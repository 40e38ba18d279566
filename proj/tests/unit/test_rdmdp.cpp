#include <cmath>
#include <random>

#include "defog/errors.hpp"
#include "defog/rdmdp.hpp"
#include "defog/toy_envs.hpp"
#include "oracles.hpp"

// after the torch headers: c10 defines its own CHECK
#include <doctest.h>

using namespace defog;

TEST_CASE("emit_observation repeats or passes through") {
  const StateVec s{5.0}, prev{3.0};
  CHECK(emit_observation(s, prev, true) == StateVec{3.0});
  CHECK(emit_observation(s, prev, false) == StateVec{5.0});
  CHECK_THROWS_AS(emit_observation(StateVec{1.0, 2.0}, prev, false), Error);
}

TEST_CASE("emission recurrence unrolled by hand") {
  const std::vector<double> s{1, 2, 3, 4};
  const std::vector<int> d{0, 1, 1, 0};
  StateVec obs{s[0]};
  std::vector<double> got;
  for (std::size_t t = 0; t < s.size(); ++t) {
    obs = emit_observation(StateVec{s[t]}, obs, d[t] != 0);
    got.push_back(obs[0]);
  }
  CHECK(got == std::vector<double>{1, 1, 1, 4});
}

TEST_CASE("cumulative reward emission") {
  CHECK(emit_cumulative_reward(7.5, 4.0, true) == 4.0);
  CHECK(emit_cumulative_reward(7.5, 4.0, false) == 7.5);

  const std::vector<double> r{1, 1, 1};
  const std::vector<int> d{0, 1, 0};
  double cum = 0.0, seen = 0.0;
  std::vector<double> got;
  for (std::size_t t = 0; t < r.size(); ++t) {
    cum += r[t];
    seen = emit_cumulative_reward(cum, seen, d[t] != 0);
    got.push_back(seen);
  }
  CHECK(got == std::vector<double>{1, 1, 3});
}

TEST_CASE("observed reward-to-go is a plain difference") {
  CHECK(observed_reward_to_go(100, 0) == 100);
  CHECK(observed_reward_to_go(100, 37.5) == 62.5);
  CHECK(observed_reward_to_go(50, 60) == -10);
}

TEST_CASE("emission matches s[t-k] on random sequences") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng() % 100;
    std::vector<double> s(n), R(n);
    std::vector<std::uint8_t> d(n);
    double acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      s[t] = u(rng);
      acc += u(rng);
      R[t] = acc;
      d[t] = t > 0 && (rng() & 1);
    }
    const auto spans = compute_drop_spans(d, std::vector<std::int64_t>{0});
    StateVec obs{s[0]};
    double seen = R[0];
    for (std::size_t t = 0; t < n; ++t) {
      obs = emit_observation(StateVec{s[t]}, obs, d[t] != 0);
      seen = emit_cumulative_reward(R[t], seen, d[t] != 0);
      const auto j = oracle::last_delivered(d, t);
      REQUIRE(obs[0] == s[j]);
      REQUIRE(seen == R[j]);
      REQUIRE(static_cast<std::size_t>(spans[t]) == t - j);
    }
  }
}

TEST_CASE("drop spans match the linear-scan oracle with trajectory resets") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng() % 20;
    std::vector<std::int64_t> starts{0};
    for (std::size_t i = 1; i < n; ++i)
      if (rng() % 5 == 0) starts.push_back(static_cast<std::int64_t>(i));
    std::vector<std::uint8_t> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = rng() & 1;
    for (auto s : starts) d[s] = 0;
    REQUIRE(compute_drop_spans(d, starts) == oracle::drop_spans(d, starts));
  }
}

TEST_CASE("a dropped trajectory start is rejected") {
  const std::vector<std::uint8_t> d{0, 0, 1};
  CHECK_THROWS_AS(compute_drop_spans(d, std::vector<std::int64_t>{0, 2}), Error);
}

TEST_CASE("sample_drop_sequence") {
  std::mt19937_64 rng(5);
  const std::vector<std::int64_t> starts{0};

  SUBCASE("p_d = 0 drops nothing") {
    const auto m = sample_drop_sequence(DropProcessConfig::bernoulli(0.0), 10, starts, rng);
    CHECK(m.dropped == std::vector<std::uint8_t>(10, 0));
    CHECK(m.drop_spans == std::vector<std::int32_t>(10, 0));
  }
  SUBCASE("bernoulli rate within the binomial band") {
    const std::size_t n = 1000000;
    const auto m = sample_drop_sequence(DropProcessConfig::bernoulli(0.5), n, starts, rng);
    // the guaranteed first frame shifts the mean by 1/n, far inside the band
    CHECK(std::abs(m.drop_fraction() - 0.5) < oracle::binomial_band(0.5, n));
  }
  SUBCASE("markov steady state") {
    const auto m = sample_drop_sequence(DropProcessConfig::markov(0.2, 0.9), 1000000, starts, rng);
    CHECK(std::abs(m.drop_fraction() - 0.667) < 0.01);
  }
  SUBCASE("trajectory starts are always delivered") {
    const std::vector<std::int64_t> many{0, 3, 4, 9, 17};
    for (int rep = 0; rep < 50; ++rep) {
      const auto m = sample_drop_sequence(DropProcessConfig::bernoulli(0.9), 20, many, rng);
      for (auto s : many) REQUIRE(m.dropped[s] == 0);
      REQUIRE(m.drop_spans == oracle::drop_spans(m.dropped, many));
    }
  }
  SUBCASE("same seed, same mask") {
    std::mt19937_64 a(42), b(42);
    const auto cfg = DropProcessConfig::markov(0.3, 0.8);
    CHECK(sample_drop_sequence(cfg, 5000, starts, a) == sample_drop_sequence(cfg, 5000, starts, b));
  }
  SUBCASE("linear schedule follows progress") {
    const auto cfg = DropProcessConfig::linear(0.0, 0.8);
    CHECK(cfg.rate_at(0.0) == 0.0);
    CHECK(cfg.rate_at(0.5) == doctest::Approx(0.4));
    CHECK(cfg.rate_at(1.0) == doctest::Approx(0.8));
    const auto m = sample_drop_sequence(cfg, 200000, starts, rng, 0.5);
    CHECK(std::abs(m.drop_fraction() - 0.4) < oracle::binomial_band(0.4, 200000));
  }
}

TEST_CASE("markov_steady_state") {
  CHECK(markov_steady_state(0.2, 0.9) == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(markov_steady_state(0.3, 0.9) == doctest::Approx(0.75));
  for (double p : {0.0, 0.1, 0.5, 0.9}) CHECK(markov_steady_state(p, p) == doctest::Approx(p));
  try {
    markov_steady_state(0.0, 1.0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::UndefinedSteadyState);
  }
}

TEST_CASE("drop config validation") {
  CHECK_THROWS_AS(DropProcessConfig::bernoulli(1.5).validate(), Error);
  CHECK_THROWS_AS(DropProcessConfig::markov(-0.1, 0.5).validate(), Error);
  auto c = DropProcessConfig::bernoulli(0.3);
  c.guarantee_first_frame = false;
  CHECK_THROWS_AS(c.validate(), Error);
}

namespace {

struct Trace {
  std::vector<StateVec> obs;
  std::vector<StateVec> truth;
  std::vector<int> spans;
  std::vector<double> cum;
  std::vector<double> true_cum;
  bool operator==(const Trace&) const = default;
};

Trace run_wrapped(double p, std::uint64_t seed, int steps) {
  auto env = wrap_env(make_env("point-mass"), DropProcessConfig::bernoulli(p), seed);
  Trace tr;
  auto o = env->reset();
  tr.obs.push_back(o.state);
  tr.truth.push_back(env->true_state());
  tr.spans.push_back(o.drop_span);
  tr.cum.push_back(o.cum_reward);
  tr.true_cum.push_back(env->true_cumreward());
  for (int t = 0; t < steps && !o.done; ++t) {
    o = env->step({0.3, -0.2});
    tr.obs.push_back(o.state);
    tr.truth.push_back(env->true_state());
    tr.spans.push_back(o.drop_span);
    tr.cum.push_back(o.cum_reward);
    tr.true_cum.push_back(env->true_cumreward());
  }
  return tr;
}

}  // namespace

TEST_CASE("wrapped environment") {
  SUBCASE("p_d = 0 is the identity") {
    const auto tr = run_wrapped(0.0, 1, 50);
    CHECK(tr.obs == tr.truth);
    CHECK(tr.cum == tr.true_cum);
    for (int k : tr.spans) CHECK(k == 0);
  }
  SUBCASE("p_d = 1 repeats the reset frame, k_t = t") {
    const auto tr = run_wrapped(1.0, 1, 200);
    CHECK(tr.obs.size() == static_cast<std::size_t>(point_mass::kMaxSteps + 1));
    for (std::size_t t = 0; t < tr.obs.size(); ++t) {
      CHECK(tr.obs[t] == tr.obs[0]);
      CHECK(tr.spans[t] == static_cast<int>(t));
      CHECK(tr.cum[t] == 0.0);
    }
  }
  SUBCASE("observations equal the true state k steps back") {
    const auto tr = run_wrapped(0.6, 9, 100);
    for (std::size_t t = 0; t < tr.obs.size(); ++t) {
      CHECK(tr.obs[t] == tr.truth[t - tr.spans[t]]);
      CHECK(tr.cum[t] == tr.true_cum[t - tr.spans[t]]);
    }
  }
  SUBCASE("seeded traces are identical") { CHECK(run_wrapped(0.5, 7, 100) == run_wrapped(0.5, 7, 100)); }
  SUBCASE("termination is never dropped") {
    auto env = wrap_env(make_env("chain-walk"), DropProcessConfig::bernoulli(1.0), 3);
    auto o = env->reset();
    int steps = 0;
    while (!o.done) {
      o = env->step({1.0});
      ++steps;
    }
    CHECK(steps == chain_walk::kCells - 1);
    CHECK(env->true_cumreward() == 1.0);
    CHECK(o.cum_reward == 0.0);
    CHECK_THROWS_AS(env->step({1.0}), Error);
  }
  SUBCASE("protocol and config errors") {
    auto env = wrap_env(make_env("point-mass"), DropProcessConfig::bernoulli(0.2), 1);
    CHECK_THROWS_AS(env->step({0.0, 0.0}), Error);
    CHECK_THROWS_AS(wrap_env(make_env("point-mass"), DropProcessConfig::linear(0.1, 0.5), 1), Error);
  }
}
