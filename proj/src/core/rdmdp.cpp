#include "defog/rdmdp.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "defog/errors.hpp"

namespace defog {

const char* to_string(DropKind kind) noexcept {
  switch (kind) {
    case DropKind::Bernoulli: return "bernoulli";
    case DropKind::Markov: return "markov";
    case DropKind::LinearSchedule: return "linear_schedule";
  }
  return "?";
}

DropKind drop_kind_from_string(const std::string& name) {
  if (name == "bernoulli") return DropKind::Bernoulli;
  if (name == "markov") return DropKind::Markov;
  if (name == "linear_schedule" || name == "linear") return DropKind::LinearSchedule;
  fail(ErrorKind::Config, "unknown drop process '" + name + "'");
}

DropProcessConfig DropProcessConfig::bernoulli(double p) {
  DropProcessConfig c;
  c.kind = DropKind::Bernoulli;
  c.p_d = p;
  return c;
}

DropProcessConfig DropProcessConfig::markov(double p1, double p2) {
  DropProcessConfig c;
  c.kind = DropKind::Markov;
  c.p1 = p1;
  c.p2 = p2;
  return c;
}

DropProcessConfig DropProcessConfig::linear(double p_start, double p_end) {
  DropProcessConfig c;
  c.kind = DropKind::LinearSchedule;
  c.p_start = p_start;
  c.p_end = p_end;
  return c;
}

namespace {

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    std::ostringstream os;
    os << "drop probability " << name << "=" << p << " outside [0,1]";
    fail(ErrorKind::Config, os.str());
  }
}

}  // namespace

void DropProcessConfig::validate() const {
  check_probability(p_d, "p_d");
  check_probability(p1, "p1");
  check_probability(p2, "p2");
  check_probability(p_start, "p_start");
  check_probability(p_end, "p_end");
  require(guarantee_first_frame, ErrorKind::Config,
          "the first frame of every trajectory must be delivered");
}

double DropProcessConfig::rate_at(double progress) const {
  switch (kind) {
    case DropKind::Bernoulli: return p_d;
    case DropKind::LinearSchedule: {
      const double f = std::clamp(progress, 0.0, 1.0);
      return p_start + (p_end - p_start) * f;
    }
    case DropKind::Markov: return markov_steady_state(p1, p2);
  }
  return p_d;
}

double DropProcessConfig::effective_rate() const {
  switch (kind) {
    case DropKind::Bernoulli: return p_d;
    case DropKind::LinearSchedule: return p_end;
    case DropKind::Markov: return markov_steady_state(p1, p2);
  }
  return p_d;
}

double DropMask::drop_fraction() const {
  if (dropped.empty()) return 0.0;
  std::size_t n = 0;
  for (auto d : dropped) n += d;
  return static_cast<double>(n) / static_cast<double>(dropped.size());
}

DropChannel::DropChannel(const DropProcessConfig& config, double progress)
    : config_(config), rate_(0.0) {
  config_.validate();
  if (config_.kind != DropKind::Markov) rate_ = config_.rate_at(progress);
}

bool DropChannel::next(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double p = rate_;
  if (config_.kind == DropKind::Markov) p = prev_dropped_ ? config_.p2 : config_.p1;
  const bool d = u(rng) < p;
  prev_dropped_ = d;
  return d;
}

StateVec emit_observation(std::span<const double> state, std::span<const double> prev_observed,
                          bool dropped) {
  require(state.size() == prev_observed.size(), ErrorKind::InvalidInput,
          "emit_observation: state and previous observation differ in dimension");
  const auto& src = dropped ? prev_observed : state;
  return StateVec(src.begin(), src.end());
}

double emit_cumulative_reward(double cum_reward, double prev_observed, bool dropped) {
  return dropped ? prev_observed : cum_reward;
}

double observed_reward_to_go(double target_return, double observed_cum_reward) {
  return target_return - observed_cum_reward;
}

std::vector<std::int32_t> compute_drop_spans(std::span<const std::uint8_t> dropped,
                                             std::span<const std::int64_t> trajectory_starts) {
  std::vector<std::int32_t> spans(dropped.size(), 0);
  auto next_start = trajectory_starts.begin();
  for (std::size_t i = 0; i < dropped.size(); ++i) {
    bool is_start = i == 0;
    while (next_start != trajectory_starts.end() && *next_start <= static_cast<std::int64_t>(i)) {
      if (*next_start == static_cast<std::int64_t>(i)) is_start = true;
      ++next_start;
    }
    if (is_start) {
      require(dropped[i] == 0, ErrorKind::InvalidInput,
              "trajectory start " + std::to_string(i) + " is marked dropped");
      spans[i] = 0;
    } else {
      spans[i] = dropped[i] ? spans[i - 1] + 1 : 0;
    }
  }
  return spans;
}

DropMask sample_drop_sequence(const DropProcessConfig& config, std::size_t length,
                              std::span<const std::int64_t> trajectory_starts,
                              std::mt19937_64& rng, double progress) {
  config.validate();
  require(length >= 1, ErrorKind::InvalidInput, "sample_drop_sequence: length must be >= 1");
  for (auto s : trajectory_starts) {
    require(s >= 0 && s < static_cast<std::int64_t>(length), ErrorKind::InvalidInput,
            "sample_drop_sequence: trajectory start out of range");
  }
  DropChannel channel(config, progress);
  DropMask mask;
  mask.dropped.assign(length, 0);
  auto next_start = trajectory_starts.begin();
  for (std::size_t i = 0; i < length; ++i) {
    bool is_start = i == 0;
    while (next_start != trajectory_starts.end() && *next_start <= static_cast<std::int64_t>(i)) {
      if (*next_start == static_cast<std::int64_t>(i)) is_start = true;
      ++next_start;
    }
    if (is_start) {
      channel.restart();
      continue;
    }
    mask.dropped[i] = channel.next(rng) ? 1 : 0;
  }
  mask.drop_spans = compute_drop_spans(mask.dropped, trajectory_starts);
  return mask;
}

double markov_steady_state(double p1, double p2) {
  check_probability(p1, "p1");
  check_probability(p2, "p2");
  const double denom = 1.0 + p1 - p2;
  if (denom == 0.0) {
    fail(ErrorKind::UndefinedSteadyState,
         "markov chain with p1=0, p2=1 is absorbing; no unique steady state");
  }
  return p1 / denom;
}

RdmdpEnv::RdmdpEnv(std::unique_ptr<Environment> base, const DropProcessConfig& config,
                   std::uint64_t seed)
    : base_(std::move(base)), config_(config), channel_(config), rng_(seed) {
  require(base_ != nullptr, ErrorKind::InvalidInput, "wrap_env: null base environment");
  require(config_.kind != DropKind::LinearSchedule, ErrorKind::Config,
          "linear drop schedules are training-only; use a fixed rate at rollout time");
}

RdmdpObservation RdmdpEnv::reset() {
  true_state_ = base_->reset();
  channel_.restart();
  state_ = RdmdpState{};
  state_.last_observed_state = true_state_;
  last_reward_ = 0.0;
  started_ = true;
  done_ = false;
  return RdmdpObservation{true_state_, 0.0, 0, false, false};
}

RdmdpObservation RdmdpEnv::step(const ActionVec& action) {
  require(started_, ErrorKind::Protocol, "step() called before reset()");
  require(!done_, ErrorKind::Protocol, "step() called after the episode ended");
  auto result = base_->step(action);
  true_state_ = std::move(result.state);
  last_reward_ = result.reward;
  state_.true_cumreward += result.reward;

  const bool d = channel_.next(rng_);
  state_.markov_prev_dropped = d;
  state_.last_observed_state = emit_observation(true_state_, state_.last_observed_state, d);
  state_.last_observed_cumreward =
      emit_cumulative_reward(state_.true_cumreward, state_.last_observed_cumreward, d);
  state_.current_span = d ? state_.current_span + 1 : 0;
  done_ = result.done;

  return RdmdpObservation{state_.last_observed_state, state_.last_observed_cumreward,
                          state_.current_span, d, result.done};
}

std::unique_ptr<RdmdpEnv> wrap_env(std::unique_ptr<Environment> base,
                                   const DropProcessConfig& config, std::uint64_t seed) {
  return std::make_unique<RdmdpEnv>(std::move(base), config, seed);
}

}  // namespace defog
