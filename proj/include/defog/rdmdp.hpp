#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "defog/env.hpp"

namespace defog {

enum class DropKind { Bernoulli, Markov, LinearSchedule };

const char* to_string(DropKind kind) noexcept;
DropKind drop_kind_from_string(const std::string& name);

/// Parameters of the frame-drop process.
///
/// Bernoulli drops every frame independently with `p_d`. Markov follows the
/// two-state chain with P(drop | previous observed) = `p1` and
/// P(drop | previous dropped) = `p2`. LinearSchedule is Bernoulli with a rate
/// interpolated from `p_start` to `p_end` over training progress; it has no
/// meaning at rollout time.
struct DropProcessConfig {
  DropKind kind = DropKind::Bernoulli;
  double p_d = 0.0;
  double p1 = 0.0;
  double p2 = 0.0;
  double p_start = 0.0;
  double p_end = 0.0;
  bool guarantee_first_frame = true;

  static DropProcessConfig bernoulli(double p);
  static DropProcessConfig markov(double p1, double p2);
  static DropProcessConfig linear(double p_start, double p_end);

  void validate() const;
  /// Bernoulli rate active at training progress in [0,1].
  double rate_at(double progress) const;
  /// Long-run drop fraction (steady state for Markov, end rate for a schedule).
  double effective_rate() const;

  bool operator==(const DropProcessConfig&) const = default;
};

/// Per-transition drop indicators and drop-spans over a dataset.
struct DropMask {
  std::vector<std::uint8_t> dropped;
  std::vector<std::int32_t> drop_spans;

  std::size_t size() const { return dropped.size(); }
  double drop_fraction() const;
  bool operator==(const DropMask&) const = default;
};

/// Stateful per-step drop indicator source shared by mask sampling and the
/// environment wrapper. `restart()` puts a Markov chain back in "observed".
class DropChannel {
public:
  DropChannel(const DropProcessConfig& config, double progress = 0.0);

  void restart() { prev_dropped_ = false; }
  bool next(std::mt19937_64& rng);

private:
  DropProcessConfig config_;
  double rate_;
  bool prev_dropped_ = false;
};

/// Repeat-or-pass-through observation emission.
StateVec emit_observation(std::span<const double> state, std::span<const double> prev_observed,
                          bool dropped);
double emit_cumulative_reward(double cum_reward, double prev_observed, bool dropped);
double observed_reward_to_go(double target_return, double observed_cum_reward);

/// Distance to the last delivered frame, resetting at trajectory starts.
/// Throws if a trajectory start is marked dropped.
std::vector<std::int32_t> compute_drop_spans(std::span<const std::uint8_t> dropped,
                                             std::span<const std::int64_t> trajectory_starts);

DropMask sample_drop_sequence(const DropProcessConfig& config, std::size_t length,
                              std::span<const std::int64_t> trajectory_starts,
                              std::mt19937_64& rng, double progress = 0.0);

double markov_steady_state(double p1, double p2);

struct RdmdpState {
  StateVec last_observed_state;
  double last_observed_cumreward = 0.0;
  int current_span = 0;
  double true_cumreward = 0.0;
  bool markov_prev_dropped = false;
};

struct RdmdpObservation {
  StateVec state;            // last delivered state
  double cum_reward = 0.0;   // last delivered cumulative reward
  int drop_span = 0;
  bool dropped = false;
  bool done = false;
};

/// Turns any base environment into a frame-dropping one. The first frame after
/// reset is always delivered, termination is never dropped, and only the
/// delivered cumulative reward is exposed to the agent.
class RdmdpEnv {
public:
  RdmdpEnv(std::unique_ptr<Environment> base, const DropProcessConfig& config,
           std::uint64_t seed);

  const EnvSpec& spec() const { return base_->spec(); }
  RdmdpObservation reset();
  RdmdpObservation step(const ActionVec& action);

  /// Remote-side ground truth; used for scoring and traces, never fed to the agent.
  const StateVec& true_state() const { return true_state_; }
  double true_cumreward() const { return state_.true_cumreward; }
  double last_reward() const { return last_reward_; }
  const RdmdpState& state() const { return state_; }

private:
  std::unique_ptr<Environment> base_;
  DropProcessConfig config_;
  DropChannel channel_;
  std::mt19937_64 rng_;
  RdmdpState state_;
  StateVec true_state_;
  double last_reward_ = 0.0;
  bool started_ = false;
  bool done_ = false;
};

std::unique_ptr<RdmdpEnv> wrap_env(std::unique_ptr<Environment> base,
                                   const DropProcessConfig& config, std::uint64_t seed);

}  // namespace defog
