#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "defog/env.hpp"

namespace defog {

struct TrajectoryDataset;

// Point-mass: 2D double integrator driven towards a fixed goal.
namespace point_mass {

inline constexpr double kDt = 0.1;
inline constexpr int kMaxSteps = 100;
inline constexpr double kGoalX = 1.0;
inline constexpr double kGoalY = 1.0;

/// [x, y, vx, vy]
struct State {
  double x = 0, y = 0, vx = 0, vy = 0;
};

struct Step {
  State state;
  double reward = 0.0;
};

/// Pure dynamics. Actions are clipped to [-1, 1]^2.
Step step(const State& s, double ax, double ay);
/// Return of the policy that never accelerates; the floor used when scoring.
double null_policy_return();

}  // namespace point_mass

// Chain walk: N cells, move left/right, +1 on reaching the last cell.
namespace chain_walk {

inline constexpr int kCells = 20;
inline constexpr int kMaxSteps = 60;
inline constexpr int kLeft = 0;
inline constexpr int kRight = 1;

struct Step {
  int cell = 0;
  double reward = 0.0;
  bool at_goal = false;
};

Step step(int cell, int action);

}  // namespace chain_walk

class PointMassEnv final : public Environment {
public:
  PointMassEnv();
  const EnvSpec& spec() const override { return spec_; }
  StateVec reset() override;
  StepResult step(const ActionVec& action) override;

private:
  EnvSpec spec_;
  point_mass::State state_;
  int t_ = 0;
};

class ChainWalkEnv final : public Environment {
public:
  ChainWalkEnv();
  const EnvSpec& spec() const override { return spec_; }
  StateVec reset() override;
  StepResult step(const ActionVec& action) override;

private:
  EnvSpec spec_;
  int cell_ = 0;
  int t_ = 0;
};

std::unique_ptr<Environment> make_env(const std::string& name);
EnvSpec env_spec(const std::string& name);
std::vector<std::string> env_names();

enum class Tier { Expert, Medium, MediumReplay };

const char* to_string(Tier tier) noexcept;
Tier tier_from_string(const std::string& name);

struct DatasetTier {
  Tier tier = Tier::Expert;
  double behavior_noise = 0.0;
  std::string mixture_spec;
};

/// Behavior noise and mixture for a tier of a given environment.
DatasetTier dataset_tier(const std::string& env_name, Tier tier);

/// Scripted behavior policy; each call to `begin_episode` may switch quality
/// (medium-replay mixes several).
class BehaviorPolicy {
public:
  virtual ~BehaviorPolicy() = default;
  virtual void begin_episode(std::mt19937_64& rng) = 0;
  virtual ActionVec act(const StateVec& state, std::mt19937_64& rng) = 0;
};

std::unique_ptr<BehaviorPolicy> make_behavior_policy(const std::string& env_name, Tier tier);

/// Rolls out the tier's scripted policy until `n_transitions` are stored. No
/// frames are dropped here; masking happens at training time.
TrajectoryDataset generate_dataset(const std::string& env_name, Tier tier,
                                   std::size_t n_transitions, std::uint64_t seed);

}  // namespace defog
