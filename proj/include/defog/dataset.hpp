#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "defog/rdmdp.hpp"

namespace defog {

inline constexpr int kDatasetSchemaVersion = 1;

/// Offline trajectories stored back to back. `rewards[i]` is the reward for
/// taking `actions[i]` in `states[i]`. Call `finalize()` after filling the raw
/// arrays to validate them and derive cumulative rewards and reward-to-gos.
struct TrajectoryDataset {
  std::string env_name;
  std::string tier;
  int state_dim = 0;
  int action_dim = 0;
  bool discrete_actions = false;
  int n_actions = 0;
  double target_return = 0.0;

  std::vector<float> states;   // [n x state_dim]
  std::vector<float> actions;  // [n x action_dim]; discrete ids stored as floats
  std::vector<float> rewards;  // [n]
  std::vector<std::int64_t> trajectory_starts;

  // Derived.
  std::vector<double> cum_rewards;    // R_t, inclusive prefix sums per trajectory
  std::vector<double> reward_to_gos;  // g_t = target - R_t
  std::vector<std::int32_t> trajectory_of;

  std::size_t size() const { return rewards.size(); }
  std::size_t n_trajectories() const { return trajectory_starts.size(); }
  std::int64_t trajectory_begin(std::size_t traj) const { return trajectory_starts[traj]; }
  std::int64_t trajectory_end(std::size_t traj) const;
  std::int64_t max_trajectory_length() const;
  std::vector<double> trajectory_returns() const;

  std::span<const float> state(std::size_t i) const {
    return {states.data() + i * state_dim, static_cast<std::size_t>(state_dim)};
  }
  std::span<const float> action(std::size_t i) const {
    return {actions.data() + i * action_dim, static_cast<std::size_t>(action_dim)};
  }
  /// Reward-to-go the agent holds when it acts at i: the target minus rewards
  /// delivered before i. Equals g_{i-1}, or the target at a trajectory start.
  double conditioning_rtg(std::size_t i) const;
  bool is_trajectory_start(std::size_t i) const;
  /// Timestep of transition i within its trajectory.
  std::int64_t timestep(std::size_t i) const;

  void set_target_return(double target);
  void finalize();
  bool operator==(const TrajectoryDataset& other) const;
};

std::vector<double> compute_reward_to_go(std::span<const float> rewards,
                                         std::span<const std::int64_t> trajectory_starts,
                                         double target_return);
std::vector<double> compute_reward_to_go(const TrajectoryDataset& dataset, double target_return);

void save_dataset(const TrajectoryDataset& dataset, const std::string& path);
TrajectoryDataset load_dataset(const std::string& path);

enum class Placeholder { RepeatLast, Zeros, GaussianNoise, LearnableMask };

const char* to_string(Placeholder p) noexcept;
Placeholder placeholder_from_string(const std::string& name);

struct MaskingOptions {
  Placeholder placeholder = Placeholder::RepeatLast;
  double noise_scale = 0.1;  // gaussian_noise only
  bool drop_actions = false;

  bool operator==(const MaskingOptions&) const = default;
};

/// Per-dimension statistics of s_{t+1} - s_t within trajectories.
struct NoiseStats {
  std::vector<double> mean;
  std::vector<double> std;
};

NoiseStats estimate_noise_stats(const TrajectoryDataset& dataset);

/// Masked content for one window of consecutive transitions.
struct WindowSlice {
  std::vector<float> rtg;            // [len]
  std::vector<float> obs;            // [len x state_dim]
  std::vector<float> act;            // [len x action_dim] (masked only with drop_actions)
  std::vector<std::int32_t> drop_spans;
  std::vector<std::int64_t> timesteps;
  std::vector<std::uint8_t> mask_flags;
};

/// A dataset seen through a drop-mask. The mask starts all-delivered; the
/// trainer replaces it at resample points.
class MaskedView {
public:
  MaskedView(const TrajectoryDataset& base, MaskingOptions options);

  const TrajectoryDataset& base() const { return *base_; }
  const MaskingOptions& options() const { return options_; }
  const DropMask& mask() const { return mask_; }
  const NoiseStats& noise_stats() const { return noise_; }
  void set_mask(DropMask mask);

  /// Masked content of [begin, end), which must lie inside one trajectory.
  /// `noise_rng` is only drawn from by the gaussian placeholder.
  WindowSlice apply_mask(std::int64_t begin, std::int64_t end, std::mt19937_64& noise_rng) const;

private:
  const TrajectoryDataset* base_;
  MaskingOptions options_;
  DropMask mask_;
  NoiseStats noise_;
};

/// Replaces the view's mask with a fresh draw. `progress` in [0,1] drives
/// linear schedules.
const DropMask& resample_mask(MaskedView& view, const DropProcessConfig& config,
                              std::mt19937_64& rng, double progress = 0.0);

/// Model-ready batch of K-step windows, left padded. Row-major, positions
/// within a row ordered oldest to newest.
struct TokenBatch {
  std::int64_t batch = 0;
  std::int64_t context = 0;
  int state_dim = 0;
  int action_dim = 0;
  bool discrete_actions = false;

  std::vector<float> rtg;         // [B x K]
  std::vector<float> obs;         // [B x K x state_dim]
  std::vector<float> act;         // [B x K x action_dim], action tokens fed to the model
  std::vector<float> act_target;  // [B x K x action_dim], always the raw dataset actions
  std::vector<std::int64_t> timesteps;
  std::vector<std::int64_t> drop_spans;
  std::vector<std::uint8_t> pad_mask;  // 1 = padding
  std::vector<std::uint8_t> mask_token_flags;

  // Unmasked next-step targets for the auxiliary heads.
  std::vector<float> next_obs;  // [B x K x state_dim]
  std::vector<float> next_rtg;  // [B x K]
  std::vector<std::uint8_t> next_valid;

  std::vector<std::int64_t> anchors;  // dataset index of each row's last position

  static TokenBatch empty(std::int64_t batch, std::int64_t context, int state_dim,
                          int action_dim, bool discrete);
  std::size_t pos(std::int64_t b, std::int64_t j) const {
    return static_cast<std::size_t>(b * context + j);
  }
};

/// Fills row `b` with the window ending at `anchor` (inclusive).
void fill_row(TokenBatch& batch, std::int64_t b, const MaskedView& view, std::int64_t anchor,
              std::mt19937_64& noise_rng);

TokenBatch sample_batch(const MaskedView& view, std::int64_t batch_size, std::int64_t context,
                        std::mt19937_64& rng, std::mt19937_64& noise_rng);

}  // namespace defog
