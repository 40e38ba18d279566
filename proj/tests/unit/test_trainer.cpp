#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "defog/errors.hpp"
#include "defog/trainer.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

// after the torch headers: c10 defines its own CHECK
#include <doctest.h>

using namespace defog;
namespace fs = std::filesystem;

namespace {

TrainConfig quick(std::int64_t steps = 30) {
  TrainConfig t;
  t.batch_size = 16;
  t.learning_rate = 1e-3;
  t.scale_to(steps);
  t.update_interval = 7;
  t.seed = 3;
  return t;
}

std::map<std::string, torch::Tensor> snapshot(const DeFogNet& m, ParamGroup g) {
  std::map<std::string, torch::Tensor> out;
  const auto groups = m->parameter_groups();
  for (const auto& [name, p] : groups.at(g)) out[name] = p.detach().clone();
  return out;
}

bool same(const std::map<std::string, torch::Tensor>& a, const DeFogNet& m, ParamGroup g) {
  const auto groups = m->parameter_groups();
  for (const auto& [name, p] : groups.at(g))
    if (!torch::equal(a.at(name), p)) return false;
  return true;
}

// True if every parameter of the group changed.
bool all_changed(const std::map<std::string, torch::Tensor>& a, const DeFogNet& m, ParamGroup g) {
  const auto groups = m->parameter_groups();
  for (const auto& [name, p] : groups.at(g))
    if (torch::equal(a.at(name), p)) return false;
  return !a.empty();
}

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("defog_tr_" + std::to_string(std::random_device{}()));
  TempDir() { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& n) const { return (path / n).string(); }
};

}  // namespace

TEST_CASE("train config defaults keep the stage ratios") {
  auto t = TrainConfig::continuous_defaults();
  t.scale_to(1000);
  CHECK(t.total_steps == 1000);
  CHECK(t.finetune_steps == 200);
  CHECK(t.warmup_steps == 100);
  CHECK_NOTHROW(t.validate());
  auto bad = t;
  bad.warmup_steps = 1000;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = t;
  bad.finetune_steps = 2000;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = t;
  bad.finetune_groups = {ParamGroup::Trunk};
  CHECK_THROWS_AS(bad.validate(), Error);
  const auto d = TrainConfig::discrete_defaults();
  CHECK(d.learning_rate == 6e-4);
  CHECK(d.batch_size == 128);
}

TEST_CASE("warmup schedule") {
  CHECK(warmup_lr(1.0, 0, 10) == doctest::Approx(0.1));
  CHECK(warmup_lr(1.0, 4, 10) == doctest::Approx(0.5));
  CHECK(warmup_lr(1.0, 9, 10) == 1.0);
  CHECK(warmup_lr(1.0, 500, 10) == 1.0);
  CHECK(warmup_lr(2e-4, 0, 0) == 2e-4);

  auto m = fixture::small_model();
  Trainer t(m, fixture::point_mass_data(), quick(40));
  t.run();
  for (const auto& r : t.log()) {
    const double s = static_cast<double>(r.step + 1);
    const double want = 1e-3 * std::min(1.0, s / 4.0);
    REQUIRE(r.lr == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("clipped gradient norms respect the bound") {
  auto m = fixture::small_model();
  auto cfg = quick(25);
  cfg.grad_clip_norm = 0.25;
  Trainer t(m, fixture::point_mass_data(), cfg);
  t.run();
  bool clipped_any = false;
  for (const auto& r : t.log()) {
    REQUIRE(r.grad_norm_clipped <= 0.25 + 1e-6);
    clipped_any |= r.grad_norm > 0.25;
  }
  CHECK(clipped_any);
}

TEST_CASE("mask schedule") {
  auto m = fixture::small_model();
  auto cfg = quick(30);
  Trainer t(m, fixture::point_mass_data(), cfg);
  t.run();
  int events = 0;
  for (const auto& r : t.log()) {
    CHECK(r.mask_resampled == (r.step % 7 == 0));
    events += r.mask_resampled;
  }
  CHECK(events == (30 + 6) / 7);

  auto fixed = cfg;
  fixed.fixed_mask = true;
  Trainer f(fixture::small_model(), fixture::point_mass_data(), fixed);
  f.step();
  const auto first = f.view().mask();
  f.run();
  CHECK(f.view().mask() == first);
  for (const auto& r : f.log()) CHECK(r.mask_resampled == (r.step == 0));
}

TEST_CASE("linear schedule reports its rate") {
  auto cfg = quick(20);
  cfg.train_drop = DropProcessConfig::linear(0.0, 0.8);
  Trainer t(fixture::small_model(), fixture::point_mass_data(), cfg);
  t.run();
  CHECK(t.log().front().p_d == 0.0);
  CHECK(t.log()[10].p_d == doctest::Approx(0.4));
}

TEST_CASE("identical seeds give identical checkpoints") {
  auto a = train(fixture::small_model(), fixture::point_mass_data(), quick(15));
  auto b = train(fixture::small_model(), fixture::point_mass_data(), quick(15));
  CHECK(model_checksum(a) == model_checksum(b));
  auto other = quick(15);
  other.seed = 4;
  auto c = train(fixture::small_model(), fixture::point_mass_data(), other);
  CHECK(model_checksum(a) != model_checksum(c));
}

TEST_CASE("checkpoint resume matches uninterrupted training") {
  TempDir tmp;
  const auto& d = fixture::point_mass_data();
  auto cfg = quick(24);
  Trainer full(fixture::small_model(), d, cfg);
  full.run();

  Trainer part(fixture::small_model(), d, cfg);
  part.run(10);
  part.save_checkpoint(tmp.file("ck.arc"));
  auto resumed = Trainer::restore(tmp.file("ck.arc"), d);
  CHECK(resumed->step_index() == 10);
  resumed->run();
  for (std::size_t i = 0; i < resumed->log().size(); ++i) {
    const auto& r = resumed->log()[i];
    REQUIRE(r.loss == doctest::Approx(full.log()[10 + i].loss).epsilon(1e-6));
  }
  CHECK(model_checksum(resumed->model()) == model_checksum(full.model()));
}

TEST_CASE("model persistence") {
  TempDir tmp;
  auto m = fixture::small_model();
  save_model(m, tmp.file("m.arc"));
  auto back = load_model(tmp.file("m.arc"));
  const auto a = m->named_parameters(true), b = back->named_parameters(true);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i].value(), b[i].value()));
  CHECK(torch::equal(m->obs_mean(), back->obs_mean()));
  CHECK(back->config() == m->config());

  auto wrong = m->config();
  wrong.state_dim = 7;
  try {
    load_model(tmp.file("m.arc"), wrong);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    CHECK(std::string(e.what()).find("state_dim") != std::string::npos);
  }
  CHECK_THROWS_AS(Trainer::restore(tmp.file("m.arc"), fixture::point_mass_data()), Error);
  CHECK_THROWS_AS(Trainer::restore(tmp.file("m.arc"), fixture::chain_data()), Error);
}

TEST_CASE("freeze-trunk finetune") {
  auto m = train(fixture::small_model(), fixture::point_mass_data(), quick(10));
  const auto trunk = snapshot(m, ParamGroup::Trunk);
  const auto psi = snapshot(m, ParamGroup::DropspanEncoder);
  const auto pi = snapshot(m, ParamGroup::ActionPredictor);

  SUBCASE("both groups") {
    auto f = freeze_trunk_finetune(m, fixture::point_mass_data(), quick(10));
    CHECK(same(trunk, f, ParamGroup::Trunk));
    CHECK(all_changed(pi, f, ParamGroup::ActionPredictor));
    CHECK_FALSE(same(psi, f, ParamGroup::DropspanEncoder));
    for (auto& p : f->parameters()) CHECK(p.requires_grad());
  }
  SUBCASE("action predictor only") {
    auto f = finetune_component_selection(m, fixture::point_mass_data(), quick(10),
                                          {ParamGroup::ActionPredictor});
    CHECK(same(trunk, f, ParamGroup::Trunk));
    CHECK(same(psi, f, ParamGroup::DropspanEncoder));
    CHECK(all_changed(pi, f, ParamGroup::ActionPredictor));
  }
  SUBCASE("drop-span encoder only") {
    auto f = finetune_component_selection(m, fixture::point_mass_data(), quick(10),
                                          {ParamGroup::DropspanEncoder});
    CHECK(same(trunk, f, ParamGroup::Trunk));
    CHECK(same(pi, f, ParamGroup::ActionPredictor));
    CHECK_FALSE(same(psi, f, ParamGroup::DropspanEncoder));
  }
  SUBCASE("trainable set") {
    Trainer t(m, fixture::point_mass_data(), quick(10), Stage::Finetune);
    for (const auto& n : t.trainable())
      CHECK((n.starts_with("dropspan_embed") || n.starts_with("action_")));
    CHECK(t.stage_steps() == 2);
  }
}

TEST_CASE("span-only finetune without a drop-span encoder is rejected") {
  auto c = fixture::small_config();
  c.dropspan_mode = DropspanMode::None;
  auto cfg = quick(10);
  cfg.finetune_groups = {ParamGroup::DropspanEncoder};
  CHECK_THROWS_AS(Trainer(fixture::small_model(c), fixture::point_mass_data(), cfg, Stage::Finetune), Error);
}

TEST_CASE("learnable mask placeholder needs a mask token") {
  auto cfg = quick(10);
  cfg.masking.placeholder = Placeholder::LearnableMask;
  CHECK_THROWS_AS(Trainer(fixture::small_model(), fixture::point_mass_data(), cfg), Error);
  auto c = fixture::small_config();
  c.mask_token = MaskTokenMode::Shared;
  Trainer t(fixture::small_model(c), fixture::point_mass_data(), cfg);
  CHECK_NOTHROW(t.run());
}

TEST_CASE("non-finite losses are skipped, then abort") {
  auto m = fixture::small_model();
  {
    torch::NoGradGuard ng;
    for (auto& p : m->named_parameters())
      if (p.key() == "action_mean.bias") p.value().fill_(std::numeric_limits<float>::quiet_NaN());
  }
  Trainer t(m, fixture::point_mass_data(), quick(10));
  CHECK(t.step().skipped);
  CHECK(t.step().skipped);
  try {
    t.step();
    FAIL("expected an abort");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numerical);
    CHECK(std::string(e.what()).find("consecutive") != std::string::npos);
  }
}

TEST_CASE("training log lines") {
  TempDir tmp;
  std::vector<LogRecord> seen;
  Trainer t(fixture::small_model(), fixture::point_mass_data(), quick(5));
  t.set_log_file(tmp.file("log.jsonl"));
  t.set_log_callback([&](const LogRecord& r) { seen.push_back(r); });
  t.run();
  CHECK(seen.size() == 5);
  std::ifstream f(tmp.file("log.jsonl"));
  int n = 0;
  for (std::string line; std::getline(f, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"].get<int>() == n);
    for (const auto* key : {"loss", "lr", "p_d", "grad_norm", "wall_time"}) CHECK(j.contains(key));
  }
  CHECK(n == 5);
  CHECK_THROWS_AS(t.step(), Error);
}

TEST_CASE("overfits a ten-transition dataset") {
  std::vector<float> states(10);
  for (int i = 0; i < 10; ++i) states[i] = static_cast<float>(i) * 0.1f;
  auto d = oracle::scalar_dataset(states, std::vector<float>(10, -1.0f), {0}, -10.0);
  auto c = fixture::small_config(4);
  c.rtg_scale = 10.0;
  auto cfg = quick(2000);
  cfg.train_drop = DropProcessConfig::bernoulli(0.0);
  cfg.batch_size = 16;
  Trainer t(make_model(c, d, 0), d, cfg);
  t.run();
  double tail = 0.0;
  for (std::size_t i = t.log().size() - 50; i < t.log().size(); ++i) tail += t.log()[i].nll_per_dim;
  CHECK(tail / 50.0 < -1.0);
}
