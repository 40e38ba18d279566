#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "defog/archive.hpp"
#include "defog/dataset.hpp"
#include "defog/errors.hpp"
#include "defog/toy_envs.hpp"
#include "oracles.hpp"

// after the torch headers: c10 defines its own CHECK
#include <doctest.h>

using namespace defog;
namespace fs = std::filesystem;

namespace {

DropMask mask_from(const std::vector<std::uint8_t>& d, const std::vector<std::int64_t>& starts) {
  return DropMask{d, compute_drop_spans(d, starts)};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("defog_ds_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("reward-to-go") {
  CHECK(compute_reward_to_go(std::vector<float>{1, 1, 1}, std::vector<std::int64_t>{0}, 10.0) ==
        std::vector<double>{9, 8, 7});
  CHECK(compute_reward_to_go(std::vector<float>{}, std::vector<std::int64_t>{}, 10.0).empty());

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-2.0f, 1.0f);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 1 + rng() % 50;
    std::vector<float> r(n);
    for (auto& x : r) x = u(rng);
    std::vector<std::int64_t> starts{0};
    for (std::size_t i = 1; i < n; ++i)
      if (rng() % 7 == 0) starts.push_back(static_cast<std::int64_t>(i));
    const auto got = compute_reward_to_go(r, starts, 3.5);
    const auto want = oracle::reward_to_go(r, starts, 3.5);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("zero-reward trajectory keeps the target") {
  const auto d = oracle::scalar_dataset({1, 2, 3}, {0, 0, 0}, {0}, 7.0);
  for (double g : d.reward_to_gos) CHECK(g == 7.0);
}

TEST_CASE("apply_mask placeholders") {
  const auto d = oracle::scalar_dataset({1, 2, 3, 4}, {1, 1, 1, 1}, {0}, 10.0);
  std::mt19937_64 rng(0);

  SUBCASE("no drops is the raw slice") {
    MaskedView v(d, {});
    const auto w = v.apply_mask(0, 4, rng);
    CHECK(w.obs == std::vector<float>{1, 2, 3, 4});
    CHECK(w.drop_spans == std::vector<std::int32_t>{0, 0, 0, 0});
    CHECK(w.rtg == std::vector<float>{10, 9, 8, 7});
    CHECK(w.act == d.actions);
  }
  SUBCASE("repeat_last") {
    MaskedView v(d, {});
    v.set_mask(mask_from({0, 1, 1, 0}, {0}));
    const auto w = v.apply_mask(0, 4, rng);
    CHECK(w.obs == std::vector<float>{1, 1, 1, 4});
    CHECK(w.drop_spans == std::vector<std::int32_t>{0, 1, 2, 0});
    CHECK(w.rtg == std::vector<float>{10, 10, 10, 7});
    CHECK(w.mask_flags == std::vector<std::uint8_t>{0, 0, 0, 0});
  }
  SUBCASE("zeros") {
    MaskedView v(d, {Placeholder::Zeros, 0.1, false});
    v.set_mask(mask_from({0, 1, 1, 0}, {0}));
    CHECK(v.apply_mask(0, 4, rng).obs == std::vector<float>{1, 0, 0, 4});
  }
  SUBCASE("learnable mask only flags") {
    MaskedView v(d, {Placeholder::LearnableMask, 0.1, false});
    v.set_mask(mask_from({0, 1, 1, 0}, {0}));
    const auto w = v.apply_mask(0, 4, rng);
    CHECK(w.mask_flags == std::vector<std::uint8_t>{0, 1, 1, 0});
    CHECK(w.obs == std::vector<float>{1, 1, 1, 4});
  }
  SUBCASE("actions untouched unless drop_actions") {
    MaskedView v(d, {});
    v.set_mask(mask_from({0, 1, 1, 0}, {0}));
    CHECK(v.apply_mask(0, 4, rng).act == d.actions);
    MaskedView va(d, {Placeholder::RepeatLast, 0.1, true});
    va.set_mask(mask_from({0, 1, 1, 0}, {0}));
    const auto w = va.apply_mask(0, 4, rng);
    CHECK(w.act == std::vector<float>{d.actions[0], d.actions[0], d.actions[0], d.actions[3]});
  }
  SUBCASE("window errors") {
    const auto two = oracle::scalar_dataset({1, 2, 3, 4}, {1, 1, 1, 1}, {0, 2});
    MaskedView v(two, {});
    CHECK_THROWS_AS(v.apply_mask(1, 3, rng), Error);
    CHECK_THROWS_AS(v.apply_mask(2, 5, rng), Error);
    CHECK_THROWS_AS(v.set_mask(mask_from({0, 0}, {0})), Error);
  }
}

TEST_CASE("masked rtg and obs index the last delivered frame") {
  const auto d = generate_dataset("point-mass", Tier::MediumReplay, 2000, 3);
  const auto cond = oracle::reward_to_go(d.rewards, d.trajectory_starts, d.target_return);
  MaskedView v(d, {});
  std::mt19937_64 rng(1), noise(2);
  resample_mask(v, DropProcessConfig::bernoulli(0.6), rng);
  const auto& m = v.mask();
  for (std::size_t t = 0; t < d.n_trajectories(); ++t) {
    const auto b = d.trajectory_begin(t), e = d.trajectory_end(t);
    const auto w = v.apply_mask(b, e, noise);
    for (auto i = b; i < e; ++i) {
      const auto src = i - m.drop_spans[i];
      const double want = d.is_trajectory_start(src) ? d.target_return : cond[src - 1];
      REQUIRE(w.rtg[i - b] == doctest::Approx(static_cast<float>(want)).epsilon(1e-6));
      for (int k = 0; k < d.state_dim; ++k) REQUIRE(w.obs[(i - b) * d.state_dim + k] == d.state(src)[k]);
    }
  }
}

TEST_CASE("repeat_last commutes with windowing") {
  const auto d = generate_dataset("point-mass", Tier::Expert, 1000, 5);
  MaskedView v(d, {});
  std::mt19937_64 rng(4), noise(0);
  resample_mask(v, DropProcessConfig::bernoulli(0.5), rng);
  const auto full = v.apply_mask(0, d.trajectory_end(0), noise);
  for (std::int64_t b = 0; b + 10 <= d.trajectory_end(0); b += 7) {
    const auto w = v.apply_mask(b, b + 10, noise);
    for (std::int64_t j = 0; j < 10; ++j) {
      REQUIRE(w.rtg[j] == full.rtg[b + j]);
      for (int k = 0; k < d.state_dim; ++k)
        REQUIRE(w.obs[j * d.state_dim + k] == full.obs[(b + j) * d.state_dim + k]);
    }
  }
}

TEST_CASE("noise statistics") {
  SUBCASE("constant states") {
    const auto s = estimate_noise_stats(oracle::scalar_dataset({2, 2, 2, 2}, {0, 0, 0, 0}, {0}));
    CHECK(s.std[0] == 0.0);
  }
  SUBCASE("unit ramp") {
    const auto s = estimate_noise_stats(oracle::scalar_dataset({0, 1, 2, 3}, {0, 0, 0, 0}, {0}));
    CHECK(s.mean[0] == 1.0);
    CHECK(s.std[0] == 0.0);
  }
  SUBCASE("random walk") {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> step(0.0, 0.5);
    std::vector<float> states(10000);
    double x = 0.0;
    for (auto& s : states) {
      s = static_cast<float>(x);
      x += step(rng);
    }
    const auto st = estimate_noise_stats(oracle::scalar_dataset(states, std::vector<float>(states.size()), {0}));
    CHECK(std::abs(st.std[0] - 0.5) < 0.05 * 0.5);
  }
  SUBCASE("needs two-step trajectories") {
    CHECK_THROWS_AS(estimate_noise_stats(oracle::scalar_dataset({1, 2}, {0, 0}, {0, 1})), Error);
  }
}

TEST_CASE("gaussian placeholder variance grows with the span") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> step(0.0, 1.0);
  std::vector<float> states(2000);
  double x = 0.0;
  for (auto& s : states) {
    s = static_cast<float>(x);
    x += step(rng);
  }
  const auto d = oracle::scalar_dataset(states, std::vector<float>(states.size()), {0});
  MaskedView v(d, {Placeholder::GaussianNoise, 1.0, false});
  std::vector<std::uint8_t> drop(d.size(), 0);
  drop[101] = drop[102] = drop[103] = 1;
  v.set_mask(mask_from(drop, {0}));
  const double sigma = v.noise_stats().std[0], mu = v.noise_stats().mean[0];
  for (int k = 1; k <= 3; ++k) {
    const auto i = 100 + k;
    std::mt19937_64 noise(k);
    double sum = 0.0, sumsq = 0.0;
    const int n = 10000;
    for (int r = 0; r < n; ++r) {
      const double e = v.apply_mask(i, i + 1, noise).obs[0] - states[100] - k * mu;
      sum += e;
      sumsq += e * e;
    }
    const double var = sumsq / n - (sum / n) * (sum / n);
    CHECK(std::abs(var - k * sigma * sigma) < 0.1 * k * sigma * sigma);
  }
}

TEST_CASE("sample_batch") {
  SUBCASE("single transition") {
    const auto d = oracle::scalar_dataset({3}, {1}, {0}, 2.0);
    MaskedView v(d, {});
    std::mt19937_64 rng(0), noise(0);
    const auto b = sample_batch(v, 1, 1, rng, noise);
    CHECK(b.pad_mask == std::vector<std::uint8_t>{0});
    CHECK(b.obs == std::vector<float>{3});
    CHECK(b.rtg == std::vector<float>{2});
    CHECK(b.next_valid == std::vector<std::uint8_t>{0});
  }
  SUBCASE("left padding at trajectory starts") {
    const auto d = generate_dataset("point-mass", Tier::Expert, 1000, 1);
    MaskedView v(d, {});
    auto b = TokenBatch::empty(1, 20, d.state_dim, d.action_dim, false);
    std::mt19937_64 noise(0);
    fill_row(b, 0, v, 4, noise);
    for (int j = 0; j < 15; ++j) CHECK(b.pad_mask[j] == 1);
    for (int j = 15; j < 20; ++j) CHECK(b.timesteps[j] == j - 15);
  }
  SUBCASE("p_d = 0 view equals an unmasked sampler") {
    const auto d = generate_dataset("point-mass", Tier::Medium, 3000, 2);
    MaskedView plain(d, {});
    MaskedView zero(d, {});
    std::mt19937_64 mrng(3);
    resample_mask(zero, DropProcessConfig::bernoulli(0.0), mrng);
    std::mt19937_64 a(9), b(9), na(1), nb(1);
    const auto x = sample_batch(plain, 32, 20, a, na);
    const auto y = sample_batch(zero, 32, 20, b, nb);
    CHECK(x.obs == y.obs);
    CHECK(x.rtg == y.rtg);
    CHECK(x.act == y.act);
    CHECK(x.anchors == y.anchors);
  }
  SUBCASE("actions are raw dataset actions") {
    const auto d = generate_dataset("point-mass", Tier::Medium, 3000, 2);
    MaskedView v(d, {});
    std::mt19937_64 mrng(3), rng(4), noise(5);
    resample_mask(v, DropProcessConfig::bernoulli(0.7), mrng);
    const auto b = sample_batch(v, 64, 20, rng, noise);
    CHECK(b.act == b.act_target);
    for (std::int64_t r = 0; r < b.batch; ++r) {
      const auto last = b.pos(r, b.context - 1);
      const auto a = d.action(b.anchors[r]);
      CHECK(b.act_target[last * 2] == a[0]);
      CHECK(b.act_target[last * 2 + 1] == a[1]);
    }
  }
  SUBCASE("anchors are uniform") {
    std::vector<float> states(1000);
    for (std::size_t i = 0; i < states.size(); ++i) states[i] = static_cast<float>(i);
    const auto d = oracle::scalar_dataset(states, std::vector<float>(1000), {0});
    MaskedView v(d, {});
    std::mt19937_64 rng(17), noise(0);
    std::vector<int> counts(1000, 0);
    for (int rep = 0; rep < 100; ++rep) {
      const auto b = sample_batch(v, 1000, 1, rng, noise);
      for (auto a : b.anchors) ++counts[a];
    }
    const double n = 1e5, p = 1e-3;
    const double band = 3.0 * std::sqrt(n * p * (1 - p));
    int outside = 0;
    for (int c : counts) outside += std::abs(c - n * p) > band;
    // 3 sigma per index: about 0.3% of 1000 bins may fall outside by chance
    CHECK(outside <= 10);
  }
  SUBCASE("context longer than any trajectory") {
    const auto d = oracle::scalar_dataset({1, 2, 3}, {0, 0, 0}, {0});
    MaskedView v(d, {});
    std::mt19937_64 rng(0), noise(0);
    CHECK_THROWS_AS(sample_batch(v, 1, 4, rng, noise), Error);
  }
}

TEST_CASE("resample_mask determinism and variation") {
  const auto d = generate_dataset("point-mass", Tier::Expert, 10000, 1);
  MaskedView a(d, {}), b(d, {});
  std::mt19937_64 ra(5), rb(5);
  const auto cfg = DropProcessConfig::bernoulli(0.5);
  const auto m0 = resample_mask(a, cfg, ra);
  const auto m1 = resample_mask(a, cfg, ra);
  CHECK(m0 == resample_mask(b, cfg, rb));
  CHECK(m1 == resample_mask(b, cfg, rb));
  CHECK(m0.dropped != m1.dropped);
}

TEST_CASE("dataset persistence") {
  TempDir tmp;
  const auto d = generate_dataset("chain-walk", Tier::MediumReplay, 3000, 7);
  const auto path = tmp.file("d.bin");
  save_dataset(d, path);
  const auto back = load_dataset(path);
  CHECK(back == d);
  CHECK(back.reward_to_gos == d.reward_to_gos);
  CHECK(back.n_actions == d.n_actions);

  SUBCASE("truncated file") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    std::ofstream(tmp.file("t.bin"), std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    try {
      load_dataset(tmp.file("t.bin"));
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Format);
    }
  }
  SUBCASE("schema bump") {
    auto arc = Archive::load(path);
    const auto pos = arc.manifest.find("schema_version: 1");
    REQUIRE(pos != std::string::npos);
    arc.manifest.replace(pos, 17, "schema_version: 2");
    arc.save(tmp.file("v2.bin"));
    try {
      load_dataset(tmp.file("v2.bin"));
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Format);
      CHECK(std::string(e.what()).find("schema_version") != std::string::npos);
    }
  }
  SUBCASE("missing file") {
    try {
      load_dataset(tmp.file("nope.bin"));
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Io);
    }
  }
}

TEST_CASE("discrete actions are stored as int32") {
  TempDir tmp;
  const auto d = generate_dataset("chain-walk", Tier::Expert, 600, 1);
  save_dataset(d, tmp.file("c.bin"));
  const auto arc = Archive::load(tmp.file("c.bin"));
  CHECK(arc.at("actions").dtype == Archive::DType::I32);
  CHECK(arc.at("states").dtype == Archive::DType::F32);
}
