#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace defog {

using StateVec = std::vector<double>;
/// Continuous actions hold one entry per dimension; discrete actions hold the
/// action id in element 0.
using ActionVec = std::vector<double>;

struct ActionSpace {
  enum class Kind { Continuous, Discrete };
  Kind kind = Kind::Continuous;
  int dim = 1;        // continuous dimension; 1 for discrete
  int n_actions = 0;  // discrete only
  double low = -1.0;
  double high = 1.0;

  bool discrete() const { return kind == Kind::Discrete; }
  static ActionSpace continuous(int dim, double low, double high);
  static ActionSpace discrete_n(int n);
};

struct EnvSpec {
  std::string name;
  int state_dim = 0;
  ActionSpace action_space;
  int max_episode_steps = 1;
  double default_target_return = 0.0;

  void validate() const;
};

struct StepResult {
  StateVec state;
  double reward = 0.0;
  bool done = false;
};

/// Adapter seam for anything that can be rolled out: the toy environments
/// implement it, and so can an external simulator.
class Environment {
public:
  virtual ~Environment() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual StateVec reset() = 0;
  virtual StepResult step(const ActionVec& action) = 0;
};


}  // namespace defog
