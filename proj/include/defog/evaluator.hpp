#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "defog/model.hpp"
#include "defog/rdmdp.hpp"

namespace defog {

struct EvalConfig {
  std::vector<double> drop_rates = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  int trials_per_rate = 10;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  /// NaN means the environment's default target.
  double target_return = std::numeric_limits<double>::quiet_NaN();
  /// 0 means the environment's episode limit.
  int max_steps = 0;
  DropKind eval_process = DropKind::Bernoulli;
  /// Markov evaluation points; each is reported under its steady-state rate.
  std::vector<std::pair<double, double>> markov_pairs = {{0.2, 0.9}, {0.3, 0.9}};
  ActMode act_mode = ActMode::Mean;

  void validate() const;
  bool operator==(const EvalConfig& o) const;
};

struct TraceStep {
  std::int64_t t = 0;
  StateVec true_state;
  StateVec observed_state;
  ActionVec action;
  bool dropped = false;
  std::int64_t drop_span = 0;
  double rtg_observed = 0.0;
  double rtg_true = 0.0;
  double reward = 0.0;
};

struct RolloutResult {
  double ret = 0.0;  // true accumulated reward
  std::int64_t length = 0;
  std::vector<TraceStep> trace;
};

/// Runs one episode with the RDMDP-wrapped environment. The model sees the
/// delivered stream plus its own actions; the score uses true rewards.
RolloutResult rollout(DeFogNet& model, RdmdpEnv& env, double target_return, int max_steps,
                      std::mt19937_64& rng, ActMode mode = ActMode::Mean,
                      bool record_trace = true);

struct TrialResult {
  std::string label;
  std::uint64_t seed = 0;
  double drop_rate = 0.0;
  int trial = 0;
  double ret = 0.0;
  std::int64_t length = 0;
};

struct RateSummary {
  std::string label;
  double drop_rate = 0.0;
  int n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single trial
  double min = 0.0;
  double max = 0.0;
  double mean_length = 0.0;
};

struct EvalReport {
  std::vector<TrialResult> trials;

  std::vector<std::string> labels() const;
  /// Aggregate over seeds and trials, per (label, drop_rate), in first-seen order.
  std::vector<RateSummary> summary() const;
  /// Aggregate for one (label, seed).
  std::vector<RateSummary> seed_summary(std::uint64_t seed) const;
  std::optional<RateSummary> find(const std::string& label, double drop_rate) const;
  void merge(const EvalReport& other);
};

RateSummary summarize(const std::vector<double>& returns, const std::vector<std::int64_t>& lengths);

/// Every (seed, rate, trial) of `config` for one model, each on its own
/// wrapped env with streams derived from (seed, rate, trial).
EvalReport sweep(DeFogNet& model, const std::string& env_name, const EvalConfig& config,
                 const std::string& label = "model");

/// Writes <prefix>_trials.csv, <prefix>_summary.csv and optionally
/// <prefix>_curve.png. Returns the written paths.
std::vector<std::string> emit_report(const EvalReport& report, const std::string& prefix,
                                     bool plot = true);
EvalReport read_trials_csv(const std::string& path);

void write_trace_jsonl(const std::vector<TraceStep>& trace, const std::string& path);
/// Top-down plot of true vs observed positions with drop markers.
void visualize_trace(const std::vector<TraceStep>& trace, const std::string& path);

/// Stream seed for one rollout; independent of the other rates in the sweep.
std::uint64_t trial_seed(std::uint64_t seed, double drop_rate, int trial);

}  // namespace defog
