#include <cmath>
#include <numbers>
#include <set>

#include "defog/errors.hpp"
#include "defog/model.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

// after the torch headers: c10 defines its own CHECK
#include <doctest.h>

using namespace defog;

namespace {

torch::Tensor tokens_for(DeFogNet& m, const TokenBatch& b) {
  torch::NoGradGuard ng;
  m->eval();
  return m->encode_tokens(m->to_tensors(b));
}

}  // namespace

TEST_CASE("config validation") {
  auto c = fixture::small_config();
  c.state_dim = 4;
  c.action_dim = 2;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.embed_dim = 33;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.dropspan_mode = DropspanMode::Implicit;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.use_timestep_embedding = true;
  CHECK_NOTHROW(bad.validate());
  bad = c;
  bad.max_dropspan = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("gaussian nll closed form and oracle") {
  auto a = torch::randn({3, 5, 4}, torch::kFloat64);
  const auto zero = torch::zeros_like(a);
  const auto at_mode = gaussian_nll(a, a, zero);
  CHECK(at_mode.allclose(torch::full({3, 5}, 4 * 0.5 * std::log(2 * std::numbers::pi), torch::kFloat64),
                         0, 1e-12));

  torch::manual_seed(3);
  const auto mu = torch::randn({6, 3}, torch::kFloat64);
  const auto ls = torch::rand({6, 3}, torch::kFloat64) * 3 - 2;
  const auto x = torch::randn({6, 3}, torch::kFloat64);
  const auto got = gaussian_nll(x, mu, ls);
  for (int i = 0; i < 6; ++i) {
    double want = 0.0;
    for (int k = 0; k < 3; ++k)
      want += oracle::gaussian_nll(x[i][k].item<double>(), mu[i][k].item<double>(), ls[i][k].item<double>());
    CHECK(got[i].item<double>() == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("gaussian nll gradient vs central differences") {
  const double a = 0.3, h = 1e-5;
  for (double mu0 : {-0.7, 0.1, 1.2}) {
    for (double ls0 : {-1.5, 0.0, 0.8}) {
      auto mu = torch::tensor({mu0}, torch::dtype(torch::kFloat64).requires_grad(true));
      auto ls = torch::tensor({ls0}, torch::dtype(torch::kFloat64).requires_grad(true));
      gaussian_nll(torch::tensor({a}, torch::kFloat64), mu, ls).sum().backward();
      const double dmu = (oracle::gaussian_nll(a, mu0 + h, ls0) - oracle::gaussian_nll(a, mu0 - h, ls0)) / (2 * h);
      const double dls = (oracle::gaussian_nll(a, mu0, ls0 + h) - oracle::gaussian_nll(a, mu0, ls0 - h)) / (2 * h);
      CHECK(mu.grad().item<double>() == doctest::Approx(dmu).epsilon(1e-4));
      CHECK(ls.grad().item<double>() == doctest::Approx(dls).epsilon(1e-4));
    }
  }
}

TEST_CASE("model loss equals an elementwise oracle over non-pad positions") {
  auto m = fixture::small_model();
  m->eval();
  const auto b = fixture::random_batch(fixture::point_mass_data(), 8, 8, 0.5, 4);
  const auto t = m->to_tensors(b);
  torch::NoGradGuard ng;
  const auto out = m->forward(t);
  const auto loss = m->loss(t, out);
  const auto mean = out.mean.to(torch::kFloat64), ls = out.log_std.to(torch::kFloat64);
  double sum = 0.0;
  int n = 0;
  for (std::int64_t r = 0; r < b.batch; ++r) {
    for (std::int64_t j = 0; j < b.context; ++j) {
      if (b.pad_mask[b.pos(r, j)]) continue;
      ++n;
      for (int k = 0; k < b.action_dim; ++k)
        sum += oracle::gaussian_nll(b.act_target[b.pos(r, j) * b.action_dim + k],
                                    mean[r][j][k].item<double>(), ls[r][j][k].item<double>());
    }
  }
  CHECK(loss.action_nll == doctest::Approx(sum / n).epsilon(1e-5));
  CHECK(loss.nll_per_dim == doctest::Approx(sum / n / b.action_dim).epsilon(1e-5));
  CHECK(std::isfinite(loss.total.item<double>()));
}

TEST_CASE("log_std is clamped to its bounds") {
  auto m = fixture::small_model();
  m->eval();
  torch::NoGradGuard ng;
  for (auto& p : m->named_parameters()) {
    if (p.key() == "action_log_std.bias") p.value().fill_(50.0);
    if (p.key() == "action_log_std.weight") p.value().zero_();
  }
  const auto b = fixture::random_batch(fixture::point_mass_data(), 2, 8, 0.0, 1);
  CHECK(m->forward(m->to_tensors(b)).log_std.max().item<double>() == doctest::Approx(2.0));
}

TEST_CASE("categorical head with uniform logits gives log n") {
  auto c = fixture::small_config();
  c.action_head = ActionHead::Categorical;
  c.use_timestep_embedding = true;
  auto m = fixture::small_model(c, fixture::chain_data());
  m->eval();
  torch::NoGradGuard ng;
  for (auto& p : m->named_parameters())
    if (p.key().starts_with("action_logits")) p.value().zero_();
  const auto b = fixture::random_batch(fixture::chain_data(), 4, 8, 0.3, 2);
  const auto t = m->to_tensors(b);
  CHECK(m->loss(t, m->forward(t)).action_nll == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("causality: a perturbed suffix leaves earlier outputs unchanged") {
  auto m = fixture::small_model();
  m->eval();
  torch::NoGradGuard ng;
  const auto b = fixture::random_batch(fixture::point_mass_data(), 4, 8, 0.5, 9);
  const auto base = m->forward(m->to_tensors(b)).hidden;
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const auto step = static_cast<std::int64_t>(rng() % 8);
    const int kind = static_cast<int>(rng() % 3);  // first perturbed token of the step: rtg, state, action
    auto p = b;
    for (std::int64_t r = 0; r < p.batch; ++r) {
      for (std::int64_t j = step; j < p.context; ++j) {
        const auto q = p.pos(r, j);
        const bool whole = j > step;
        // the span embedding enters both the rtg and the state token
        if (whole || kind == 0) {
          p.rtg[q] += 3.0f;
          p.drop_spans[q] += 2;
        }
        if (whole || kind <= 1)
          for (int k = 0; k < p.state_dim; ++k) p.obs[q * p.state_dim + k] -= 1.5f;
        for (int k = 0; k < p.action_dim; ++k) p.act[q * p.action_dim + k] = 0.9f;
      }
    }
    const auto out = m->forward(m->to_tensors(p)).hidden;
    const auto first = 3 * step + kind;
    REQUIRE(torch::equal(out.narrow(1, 0, first), base.narrow(1, 0, first)));
    REQUIRE_FALSE(torch::equal(out.narrow(1, first, 3 * 8 - first), base.narrow(1, first, 3 * 8 - first)));
  }
}

TEST_CASE("K = 1 prediction ignores the action token") {
  auto c = fixture::small_config(1);
  auto m = fixture::small_model(c);
  m->eval();
  torch::NoGradGuard ng;
  auto b = fixture::random_batch(fixture::point_mass_data(), 3, 1, 0.0, 2);
  const auto before = m->forward(m->to_tensors(b)).mean;
  for (auto& a : b.act) a = -a + 0.5f;
  CHECK(torch::equal(before, m->forward(m->to_tensors(b)).mean));
}

TEST_CASE("eval forward is deterministic and row independent") {
  auto m = fixture::small_model();
  m->eval();
  torch::NoGradGuard ng;
  const auto b = fixture::random_batch(fixture::point_mass_data(), 6, 8, 0.5, 5);
  const auto t = m->to_tensors(b);
  const auto x = m->forward(t).mean;
  CHECK(torch::equal(x, m->forward(t).mean));

  const auto perm = torch::tensor({3, 0, 5, 1, 4, 2}, torch::kLong);
  BatchTensors s = t;
  for (auto* f : {&s.rtg, &s.obs, &s.act, &s.act_target, &s.timesteps, &s.drop_spans, &s.pad,
                  &s.mask_flags, &s.next_obs, &s.next_rtg, &s.next_valid})
    *f = f->index_select(0, perm);
  CHECK(m->forward(s).mean.allclose(x.index_select(0, perm), 0, 1e-6));
}

TEST_CASE("train-mode dropout follows the seeded stream") {
  auto m = fixture::small_model();
  m->train();
  torch::NoGradGuard ng;
  const auto t = m->to_tensors(fixture::random_batch(fixture::point_mass_data(), 4, 8, 0.5, 1));
  m->seed_dropout(7);
  const auto a = m->forward(t).mean;
  const auto b = m->forward(t).mean;
  m->seed_dropout(7);
  CHECK(torch::equal(a, m->forward(t).mean));
  CHECK_FALSE(torch::equal(a, b));
}

TEST_CASE("drop-span encodings") {
  const auto& d = fixture::point_mass_data();
  const auto b0 = fixture::random_batch(d, 4, 8, 0.0, 3);
  const auto K = b0.context;

  auto ce = fixture::small_config();
  ce.use_timestep_embedding = true;
  auto cn = ce;
  cn.dropspan_mode = DropspanMode::None;
  auto ci = ce;
  ci.dropspan_mode = DropspanMode::Implicit;
  auto me = fixture::small_model(ce), mn = fixture::small_model(cn), mi = fixture::small_model(ci);

  SUBCASE("explicit minus none is psi(0) on rtg and state tokens") {
    torch::Tensor psi0;
    for (auto& p : me->named_parameters())
      if (p.key() == "dropspan_embed.weight") psi0 = p.value()[0].detach();
    const auto diff = (tokens_for(me, b0) - tokens_for(mn, b0)).view({4, K, 3, -1});
    CHECK(diff.select(2, 0).allclose(psi0.expand_as(diff.select(2, 0)), 0, 1e-6));
    CHECK(diff.select(2, 1).allclose(psi0.expand_as(diff.select(2, 1)), 0, 1e-6));
    CHECK(diff.select(2, 2).abs().max().item<double>() == 0.0);
  }
  SUBCASE("implicit with k = 0 equals none") { CHECK(torch::equal(tokens_for(mi, b0), tokens_for(mn, b0))); }
  SUBCASE("explicit action tokens ignore k") {
    auto b1 = b0;
    for (auto& k : b1.drop_spans) k += 5;
    const auto x = tokens_for(me, b0).view({4, K, 3, -1}).select(2, 2);
    const auto y = tokens_for(me, b1).view({4, K, 3, -1}).select(2, 2);
    CHECK(torch::equal(x, y));
  }
  SUBCASE("spans beyond max_dropspan share one embedding") {
    auto b1 = b0, b2 = b0;
    for (auto& k : b1.drop_spans) k = ce.max_dropspan;
    for (auto& k : b2.drop_spans) k = ce.max_dropspan + 40;
    const auto before = me->clamped_span_count();
    CHECK(torch::equal(tokens_for(me, b1), tokens_for(me, b2)));
    CHECK(me->clamped_span_count() == before + 4 * K);
  }
}

TEST_CASE("mask token substitution") {
  auto c = fixture::small_config();
  c.mask_token = MaskTokenMode::Separate;
  auto m = fixture::small_model(c);
  MaskingOptions opts;
  opts.placeholder = Placeholder::LearnableMask;
  const auto b = fixture::random_batch(fixture::point_mass_data(), 4, 8, 0.6, 2, opts);
  torch::Tensor ms, mr, psi;
  for (auto& p : m->named_parameters()) {
    if (p.key() == "mask_state") ms = p.value().detach();
    if (p.key() == "mask_rtg") mr = p.value().detach();
    if (p.key() == "dropspan_embed.weight") psi = p.value().detach();
  }
  const auto tok = tokens_for(m, b).view({4, 8, 3, -1});
  int flagged = 0;
  for (std::int64_t r = 0; r < 4; ++r) {
    for (std::int64_t j = 0; j < 8; ++j) {
      const auto q = b.pos(r, j);
      if (!b.mask_token_flags[q]) continue;
      ++flagged;
      const auto k = b.drop_spans[q];
      CHECK(tok[r][j][1].allclose(ms + psi[k], 0, 1e-6));
      CHECK(tok[r][j][0].allclose(mr + psi[k], 0, 1e-6));
    }
  }
  CHECK(flagged > 0);
}

TEST_CASE("parameter groups partition the parameters") {
  for (auto mode : {DropspanMode::Explicit, DropspanMode::None}) {
    for (auto mask : {MaskTokenMode::Off, MaskTokenMode::Shared, MaskTokenMode::Separate}) {
      auto c = fixture::small_config();
      c.dropspan_mode = mode;
      c.mask_token = mask;
      c.predict_state = true;
      c.predict_rtg = true;
      auto m = fixture::small_model(c);
      const auto groups = m->parameter_groups();
      std::set<std::string> seen;
      std::size_t total = 0;
      for (const auto& [g, params] : groups) {
        for (const auto& [name, t] : params) {
          CHECK(seen.insert(name).second);
          ++total;
        }
      }
      CHECK(total == m->named_parameters().size());
      CHECK(groups.at(ParamGroup::DropspanEncoder).empty() == (mode == DropspanMode::None));
      CHECK(groups.at(ParamGroup::OtherHeads).size() == 4);
      for (const auto& [name, t] : groups.at(ParamGroup::Trunk)) {
        CHECK_FALSE(name.starts_with("action_"));
        CHECK_FALSE(name.starts_with("dropspan"));
      }
      if (mask == MaskTokenMode::Separate) {
        std::set<std::string> trunk;
        for (const auto& [name, t] : groups.at(ParamGroup::Trunk)) trunk.insert(name);
        CHECK(trunk.count("mask_state") == 1);
        CHECK(trunk.count("mask_rtg") == 1);
      }
    }
  }
}

TEST_CASE("act") {
  auto m = fixture::small_model();
  const auto space = env_spec("point-mass").action_space;
  std::deque<ContextEntry> hist;
  std::mt19937_64 rng(0);
  std::normal_distribution<double> g(0.0, 0.3);
  for (int t = 0; t < 13; ++t) {
    ContextEntry e;
    e.rtg = -20.0f + static_cast<float>(t);
    e.obs = {static_cast<float>(g(rng)), static_cast<float>(g(rng)), 0.0f, 0.0f};
    e.act = {static_cast<float>(g(rng)), static_cast<float>(g(rng))};
    e.timestep = t;
    e.drop_span = t % 3;
    hist.push_back(e);
  }
  hist.back().act = {0.0f, 0.0f};

  SUBCASE("mean mode is repeatable and restores train mode") {
    m->train();
    const auto a = act(m, hist, ActMode::Mean, rng, space);
    CHECK(m->is_training());
    CHECK(a == act(m, hist, ActMode::Mean, rng, space));
    for (double v : a) CHECK((v >= -1.0 && v <= 1.0));
  }
  SUBCASE("history longer than K equals its last-K suffix") {
    std::deque<ContextEntry> tail(hist.end() - 8, hist.end());
    CHECK(act(m, hist, ActMode::Mean, rng, space) == act(m, tail, ActMode::Mean, rng, space));
  }
  SUBCASE("sampling at the lower log_std bound stays near the mean") {
    {
      torch::NoGradGuard ng;
      for (auto& p : m->named_parameters()) {
        if (p.key() == "action_log_std.bias") p.value().fill_(-50.0);
        if (p.key() == "action_log_std.weight") p.value().zero_();
      }
    }
    const auto mean = act(m, hist, ActMode::Mean, rng, space);
    const double sigma = std::exp(-5.0);
    double sq = 0.0;
    int n = 0;
    for (int rep = 0; rep < 500; ++rep) {
      const auto a = act(m, hist, ActMode::Sample, rng, space);
      for (std::size_t k = 0; k < a.size(); ++k) {
        if (std::abs(mean[k]) >= 1.0) continue;  // clipped at the bound
        const double e = a[k] - mean[k];
        // 4.5 sigma: 1000 draws must all stay inside
        REQUIRE(std::abs(e) < 4.5 * sigma);
        sq += e * e;
        ++n;
      }
    }
    if (n > 0) CHECK(std::sqrt(sq / n) == doctest::Approx(sigma).epsilon(0.15));
  }
  SUBCASE("empty history") {
    std::deque<ContextEntry> none;
    CHECK_THROWS_AS(act(m, none, ActMode::Mean, rng, space), Error);
  }
}

TEST_CASE("batch dims must match the model") {
  auto m = fixture::small_model();
  const auto b = fixture::random_batch(fixture::chain_data(), 2, 8, 0.0, 1);
  CHECK_THROWS_AS(m->to_tensors(b), Error);
}
