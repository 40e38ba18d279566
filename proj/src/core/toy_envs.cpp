#include "defog/toy_envs.hpp"

#include <algorithm>
#include <cmath>

#include "defog/dataset.hpp"
#include "defog/errors.hpp"
#include "defog/rng.hpp"

namespace defog {

ActionSpace ActionSpace::continuous(int dim, double low, double high) {
  ActionSpace a;
  a.kind = Kind::Continuous;
  a.dim = dim;
  a.low = low;
  a.high = high;
  return a;
}

ActionSpace ActionSpace::discrete_n(int n) {
  ActionSpace a;
  a.kind = Kind::Discrete;
  a.dim = 1;
  a.n_actions = n;
  a.low = 0;
  a.high = n - 1;
  return a;
}

void EnvSpec::validate() const {
  require(state_dim >= 1, ErrorKind::Config, "env state_dim must be >= 1");
  require(max_episode_steps >= 1, ErrorKind::Config, "max_episode_steps must be >= 1");
  if (action_space.discrete()) {
    require(action_space.n_actions >= 2, ErrorKind::Config, "discrete env needs >= 2 actions");
  } else {
    require(std::isfinite(action_space.low) && std::isfinite(action_space.high) &&
                action_space.low < action_space.high,
            ErrorKind::Config, "continuous action bounds must be finite and ordered");
  }
}

namespace point_mass {

Step step(const State& s, double ax, double ay) {
  ax = std::clamp(ax, -1.0, 1.0);
  ay = std::clamp(ay, -1.0, 1.0);
  Step out;
  out.state.vx = s.vx + ax * kDt;
  out.state.vy = s.vy + ay * kDt;
  out.state.x = s.x + out.state.vx * kDt;
  out.state.y = s.y + out.state.vy * kDt;
  if (!(std::isfinite(out.state.x) && std::isfinite(out.state.y) && std::isfinite(out.state.vx) &&
        std::isfinite(out.state.vy))) {
    fail(ErrorKind::Numerical, "point-mass state became non-finite");
  }
  out.reward = -std::hypot(out.state.x - kGoalX, out.state.y - kGoalY);
  return out;
}

double null_policy_return() {
  return -static_cast<double>(kMaxSteps) * std::hypot(kGoalX, kGoalY);
}

}  // namespace point_mass

namespace chain_walk {

Step step(int cell, int action) {
  require(action == kLeft || action == kRight, ErrorKind::InvalidInput,
          "chain-walk action must be 0 (left) or 1 (right), got " + std::to_string(action));
  require(cell >= 0 && cell < kCells, ErrorKind::InvalidInput, "chain-walk cell out of range");
  Step out;
  out.cell = std::clamp(cell + (action == kRight ? 1 : -1), 0, kCells - 1);
  out.at_goal = out.cell == kCells - 1;
  out.reward = out.at_goal ? 1.0 : 0.0;
  return out;
}

}  // namespace chain_walk

PointMassEnv::PointMassEnv() {
  spec_.name = "point-mass";
  spec_.state_dim = 4;
  spec_.action_space = ActionSpace::continuous(2, -1.0, 1.0);
  spec_.max_episode_steps = point_mass::kMaxSteps;
  spec_.default_target_return = -20.0;
}

StateVec PointMassEnv::reset() {
  state_ = {};
  t_ = 0;
  return {state_.x, state_.y, state_.vx, state_.vy};
}

StepResult PointMassEnv::step(const ActionVec& action) {
  require(action.size() == 2, ErrorKind::InvalidInput, "point-mass expects a 2-d action");
  const auto r = point_mass::step(state_, action[0], action[1]);
  state_ = r.state;
  ++t_;
  return {{state_.x, state_.y, state_.vx, state_.vy}, r.reward, t_ >= point_mass::kMaxSteps};
}

ChainWalkEnv::ChainWalkEnv() {
  spec_.name = "chain-walk";
  spec_.state_dim = chain_walk::kCells;
  spec_.action_space = ActionSpace::discrete_n(2);
  spec_.max_episode_steps = chain_walk::kMaxSteps;
  spec_.default_target_return = 1.0;
}

namespace {

StateVec one_hot(int cell) {
  StateVec s(chain_walk::kCells, 0.0);
  s[cell] = 1.0;
  return s;
}

}  // namespace

StateVec ChainWalkEnv::reset() {
  cell_ = 0;
  t_ = 0;
  return one_hot(cell_);
}

StepResult ChainWalkEnv::step(const ActionVec& action) {
  require(action.size() == 1 && std::isfinite(action[0]), ErrorKind::InvalidInput,
          "chain-walk expects a single action id");
  const auto r = chain_walk::step(cell_, static_cast<int>(std::lround(action[0])));
  cell_ = r.cell;
  ++t_;
  return {one_hot(cell_), r.reward, r.at_goal || t_ >= chain_walk::kMaxSteps};
}

std::unique_ptr<Environment> make_env(const std::string& name) {
  if (name == "point-mass") return std::make_unique<PointMassEnv>();
  if (name == "chain-walk") return std::make_unique<ChainWalkEnv>();
  fail(ErrorKind::Config, "unknown environment '" + name + "'");
}

EnvSpec env_spec(const std::string& name) { return make_env(name)->spec(); }

std::vector<std::string> env_names() { return {"point-mass", "chain-walk"}; }

const char* to_string(Tier tier) noexcept {
  switch (tier) {
    case Tier::Expert: return "expert";
    case Tier::Medium: return "medium";
    case Tier::MediumReplay: return "medium_replay";
  }
  return "?";
}

Tier tier_from_string(const std::string& name) {
  if (name == "expert") return Tier::Expert;
  if (name == "medium") return Tier::Medium;
  if (name == "medium_replay" || name == "medium-replay") return Tier::MediumReplay;
  fail(ErrorKind::Config, "unknown dataset tier '" + name + "'");
}

namespace {

// PD gains and action noise of the scripted point-mass controllers.
struct PdProfile {
  double kp;
  double kd;
  double noise;
};

constexpr PdProfile kPointMassExpert{50.0, 14.0, 0.1};
constexpr PdProfile kPointMassMedium{1.0, 1.5, 0.4};

constexpr double kChainExpertEps = 0.05;
constexpr double kChainMediumEps = 0.7;

class PointMassPolicy final : public BehaviorPolicy {
public:
  explicit PointMassPolicy(Tier tier) : tier_(tier) {}

  void begin_episode(std::mt19937_64& rng) override {
    switch (tier_) {
      case Tier::Expert: profile_ = kPointMassExpert; random_ = false; break;
      case Tier::Medium: profile_ = kPointMassMedium; random_ = false; break;
      case Tier::MediumReplay: {
        // Replay buffer of a learner: a quarter random episodes, the rest PD
        // controllers of uneven quality.
        std::uniform_real_distribution<double> u(0.0, 1.0);
        random_ = u(rng) < 0.25;
        profile_ = {0.2 + 1.3 * u(rng), 0.5 + 2.0 * u(rng), 0.4 + 0.6 * u(rng)};
        break;
      }
    }
  }

  ActionVec act(const StateVec& s, std::mt19937_64& rng) override {
    std::normal_distribution<double> n(0.0, profile_.noise);
    if (random_) {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      return {u(rng), u(rng)};
    }
    const double ax = profile_.kp * (point_mass::kGoalX - s[0]) - profile_.kd * s[2] + n(rng);
    const double ay = profile_.kp * (point_mass::kGoalY - s[1]) - profile_.kd * s[3] + n(rng);
    return {std::clamp(ax, -1.0, 1.0), std::clamp(ay, -1.0, 1.0)};
  }

private:
  Tier tier_;
  PdProfile profile_{kPointMassExpert};
  bool random_ = false;
};

class ChainWalkPolicy final : public BehaviorPolicy {
public:
  explicit ChainWalkPolicy(Tier tier) : tier_(tier) {}

  void begin_episode(std::mt19937_64& rng) override {
    switch (tier_) {
      case Tier::Expert: eps_ = kChainExpertEps; break;
      case Tier::Medium: eps_ = kChainMediumEps; break;
      case Tier::MediumReplay: {
        std::uniform_real_distribution<double> u(0.6, 1.0);
        eps_ = u(rng);
        break;
      }
    }
  }

  ActionVec act(const StateVec&, std::mt19937_64& rng) override {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < eps_) return {u(rng) < 0.5 ? 0.0 : 1.0};
    return {static_cast<double>(chain_walk::kRight)};
  }

private:
  Tier tier_;
  double eps_ = kChainExpertEps;
};

struct Rollouts {
  std::vector<StateVec> states;
  std::vector<ActionVec> actions;
  std::vector<double> rewards;
  std::vector<std::int64_t> starts;
  std::vector<double> returns;
};

Rollouts collect(const std::string& env_name, Tier tier, std::size_t n, std::mt19937_64& rng) {
  auto env = make_env(env_name);
  auto policy = make_behavior_policy(env_name, tier);
  Rollouts out;
  while (out.rewards.size() < n) {
    out.starts.push_back(static_cast<std::int64_t>(out.rewards.size()));
    policy->begin_episode(rng);
    auto s = env->reset();
    double ret = 0.0;
    bool done = false;
    while (!done && out.rewards.size() < n) {
      auto a = policy->act(s, rng);
      auto r = env->step(a);
      out.states.push_back(std::move(s));
      out.actions.push_back(std::move(a));
      out.rewards.push_back(r.reward);
      ret += r.reward;
      s = std::move(r.state);
      done = r.done;
    }
    if (done) out.returns.push_back(ret);  // a truncated tail episode is not a full return
  }
  return out;
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

DatasetTier dataset_tier(const std::string& env_name, Tier tier) {
  DatasetTier t;
  t.tier = tier;
  if (env_name == "point-mass") {
    switch (tier) {
      case Tier::Expert:
        t.behavior_noise = kPointMassExpert.noise;
        t.mixture_spec = "PD controller kp=50 kd=14";
        break;
      case Tier::Medium:
        t.behavior_noise = kPointMassMedium.noise;
        t.mixture_spec = "sluggish PD controller kp=1 kd=1.5";
        break;
      case Tier::MediumReplay:
        t.behavior_noise = 0.7;
        t.mixture_spec = "25% uniform-random episodes, 75% PD with kp~U[0.2,1.5], kd~U[0.5,2.5], noise~U[0.4,1.0]";
        break;
    }
  } else if (env_name == "chain-walk") {
    switch (tier) {
      case Tier::Expert:
        t.behavior_noise = kChainExpertEps;
        t.mixture_spec = "epsilon-greedy shortest path, eps=0.05";
        break;
      case Tier::Medium:
        t.behavior_noise = kChainMediumEps;
        t.mixture_spec = "epsilon-greedy shortest path, eps=0.7";
        break;
      case Tier::MediumReplay:
        t.behavior_noise = 0.8;
        t.mixture_spec = "epsilon-greedy with eps~U[0.6,1.0] per episode";
        break;
    }
  } else {
    fail(ErrorKind::Config, "unknown environment '" + env_name + "'");
  }
  return t;
}

std::unique_ptr<BehaviorPolicy> make_behavior_policy(const std::string& env_name, Tier tier) {
  if (env_name == "point-mass") return std::make_unique<PointMassPolicy>(tier);
  if (env_name == "chain-walk") return std::make_unique<ChainWalkPolicy>(tier);
  fail(ErrorKind::Config, "unknown environment '" + env_name + "'");
}

TrajectoryDataset generate_dataset(const std::string& env_name, Tier tier,
                                   std::size_t n_transitions, std::uint64_t seed) {
  const auto spec = env_spec(env_name);
  require(n_transitions >= static_cast<std::size_t>(spec.max_episode_steps), ErrorKind::Config,
          "n_transitions must cover at least one full episode (" +
              std::to_string(spec.max_episode_steps) + ")");
  const SeedTree seeds(seed);
  auto rng = seeds.engine("behavior");
  const auto roll = collect(env_name, tier, n_transitions, rng);

  TrajectoryDataset d;
  d.env_name = env_name;
  d.tier = to_string(tier);
  d.state_dim = spec.state_dim;
  d.discrete_actions = spec.action_space.discrete();
  d.action_dim = spec.action_space.dim;
  d.n_actions = spec.action_space.n_actions;
  d.trajectory_starts = roll.starts;
  for (std::size_t i = 0; i < roll.rewards.size(); ++i) {
    for (double v : roll.states[i]) d.states.push_back(static_cast<float>(v));
    for (double v : roll.actions[i]) d.actions.push_back(static_cast<float>(v));
    d.rewards.push_back(static_cast<float>(roll.rewards[i]));
  }

  if (env_name == "point-mass") {
    // Target: 95th percentile of expert returns. Non-expert tiers roll a
    // reference expert set so every tier of one env shares a target scale.
    std::vector<double> expert_returns;
    if (tier == Tier::Expert) {
      expert_returns = roll.returns;
    } else {
      auto ref_rng = seeds.engine("target-reference");
      expert_returns =
          collect(env_name, Tier::Expert, 50 * static_cast<std::size_t>(spec.max_episode_steps), ref_rng)
              .returns;
    }
    d.target_return = percentile(expert_returns, 0.95);
  } else {
    d.target_return = spec.default_target_return;
  }
  d.finalize();
  return d;
}

}  // namespace defog
