#include "defog/dataset.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>

#include "defog/archive.hpp"
#include "defog/errors.hpp"

namespace defog {

std::int64_t TrajectoryDataset::trajectory_end(std::size_t traj) const {
  return traj + 1 < trajectory_starts.size() ? trajectory_starts[traj + 1]
                                             : static_cast<std::int64_t>(size());
}

std::int64_t TrajectoryDataset::max_trajectory_length() const {
  std::int64_t best = 0;
  for (std::size_t t = 0; t < n_trajectories(); ++t) {
    best = std::max(best, trajectory_end(t) - trajectory_begin(t));
  }
  return best;
}

std::vector<double> TrajectoryDataset::trajectory_returns() const {
  std::vector<double> out;
  out.reserve(n_trajectories());
  for (std::size_t t = 0; t < n_trajectories(); ++t) {
    double r = 0.0;
    for (auto i = trajectory_begin(t); i < trajectory_end(t); ++i) r += rewards[i];
    out.push_back(r);
  }
  return out;
}

bool TrajectoryDataset::is_trajectory_start(std::size_t i) const {
  return trajectory_starts[trajectory_of[i]] == static_cast<std::int64_t>(i);
}

std::int64_t TrajectoryDataset::timestep(std::size_t i) const {
  return static_cast<std::int64_t>(i) - trajectory_starts[trajectory_of[i]];
}

double TrajectoryDataset::conditioning_rtg(std::size_t i) const {
  return is_trajectory_start(i) ? target_return : reward_to_gos[i - 1];
}

void TrajectoryDataset::set_target_return(double target) {
  target_return = target;
  reward_to_gos = compute_reward_to_go(rewards, trajectory_starts, target);
}

void TrajectoryDataset::finalize() {
  const std::size_t n = rewards.size();
  require(state_dim > 0 && action_dim > 0, ErrorKind::InvalidInput, "dataset dims must be positive");
  require(states.size() == n * static_cast<std::size_t>(state_dim), ErrorKind::InvalidInput,
          "states array does not match n_transitions x state_dim");
  require(actions.size() == n * static_cast<std::size_t>(action_dim), ErrorKind::InvalidInput,
          "actions array does not match n_transitions x action_dim");
  require(n == 0 || (!trajectory_starts.empty() && trajectory_starts.front() == 0),
          ErrorKind::InvalidInput, "trajectory_starts must begin at 0");
  for (std::size_t t = 1; t < trajectory_starts.size(); ++t) {
    require(trajectory_starts[t] > trajectory_starts[t - 1], ErrorKind::InvalidInput,
            "trajectory_starts must be strictly increasing");
  }
  require(trajectory_starts.empty() || trajectory_starts.back() < static_cast<std::int64_t>(n),
          ErrorKind::InvalidInput, "trajectory start beyond the data");

  trajectory_of.assign(n, 0);
  cum_rewards.assign(n, 0.0);
  for (std::size_t t = 0; t < n_trajectories(); ++t) {
    double acc = 0.0;
    for (auto i = trajectory_begin(t); i < trajectory_end(t); ++i) {
      trajectory_of[i] = static_cast<std::int32_t>(t);
      acc += rewards[i];
      cum_rewards[i] = acc;
    }
  }
  reward_to_gos = compute_reward_to_go(rewards, trajectory_starts, target_return);
}

bool TrajectoryDataset::operator==(const TrajectoryDataset& o) const {
  return env_name == o.env_name && tier == o.tier && state_dim == o.state_dim &&
         action_dim == o.action_dim && discrete_actions == o.discrete_actions &&
         n_actions == o.n_actions && target_return == o.target_return && states == o.states &&
         actions == o.actions && rewards == o.rewards && trajectory_starts == o.trajectory_starts;
}

std::vector<double> compute_reward_to_go(std::span<const float> rewards,
                                         std::span<const std::int64_t> trajectory_starts,
                                         double target_return) {
  std::vector<double> g(rewards.size(), target_return);
  auto next = trajectory_starts.begin();
  double acc = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    if (next != trajectory_starts.end() && *next == static_cast<std::int64_t>(i)) {
      acc = 0.0;
      ++next;
    }
    acc += rewards[i];
    g[i] = target_return - acc;
  }
  return g;
}

std::vector<double> compute_reward_to_go(const TrajectoryDataset& dataset, double target_return) {
  return compute_reward_to_go(dataset.rewards, dataset.trajectory_starts, target_return);
}

void save_dataset(const TrajectoryDataset& d, const std::string& path) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << "defog-dataset";
  out << YAML::Key << "schema_version" << YAML::Value << kDatasetSchemaVersion;
  out << YAML::Key << "env" << YAML::Value << d.env_name;
  out << YAML::Key << "tier" << YAML::Value << d.tier;
  out << YAML::Key << "state_dim" << YAML::Value << d.state_dim;
  out << YAML::Key << "action_dim" << YAML::Value << d.action_dim;
  out << YAML::Key << "discrete_actions" << YAML::Value << d.discrete_actions;
  out << YAML::Key << "n_actions" << YAML::Value << d.n_actions;
  out << YAML::Key << "n_transitions" << YAML::Value << d.size();
  out << YAML::Key << "target_return" << YAML::Value << d.target_return;
  out << YAML::Key << "trajectory_starts" << YAML::Value << YAML::Flow << d.trajectory_starts;
  out << YAML::EndMap;

  Archive a;
  a.manifest = std::string(out.c_str()) + "\n";
  a.put_f32("states", d.states);
  a.put_f32("rewards", d.rewards);
  if (d.discrete_actions) {
    std::vector<std::int32_t> ids(d.actions.size());
    std::transform(d.actions.begin(), d.actions.end(), ids.begin(),
                   [](float v) { return static_cast<std::int32_t>(std::lround(v)); });
    a.put_i32("actions", ids);
  } else {
    a.put_f32("actions", d.actions);
  }
  a.save(path);
}

TrajectoryDataset load_dataset(const std::string& path) {
  const Archive a = Archive::load(path);
  YAML::Node m;
  try {
    m = YAML::Load(a.manifest);
  } catch (const YAML::Exception& e) {
    fail(ErrorKind::Format, std::string("dataset manifest is not valid YAML: ") + e.what());
  }
  try {
    require(m["kind"] && m["kind"].as<std::string>() == "defog-dataset", ErrorKind::Format,
            "'" + path + "' is not a dataset archive");
    const int version = m["schema_version"].as<int>();
    require(version == kDatasetSchemaVersion, ErrorKind::Format,
            "dataset schema_version " + std::to_string(version) + " is incompatible with " +
                std::to_string(kDatasetSchemaVersion));
    TrajectoryDataset d;
    d.env_name = m["env"].as<std::string>();
    d.tier = m["tier"].as<std::string>();
    d.state_dim = m["state_dim"].as<int>();
    d.action_dim = m["action_dim"].as<int>();
    d.discrete_actions = m["discrete_actions"].as<bool>();
    d.n_actions = m["n_actions"].as<int>();
    d.target_return = m["target_return"].as<double>();
    d.trajectory_starts = m["trajectory_starts"].as<std::vector<std::int64_t>>();
    const auto n = m["n_transitions"].as<std::size_t>();
    d.states = a.get_f32("states");
    d.rewards = a.get_f32("rewards");
    if (d.discrete_actions) {
      const auto ids = a.get_i32("actions");
      d.actions.assign(ids.begin(), ids.end());
    } else {
      d.actions = a.get_f32("actions");
    }
    require(d.rewards.size() == n, ErrorKind::Format, "rewards length disagrees with manifest");
    try {
      d.finalize();
    } catch (const Error& e) {
      fail(ErrorKind::Format, std::string("inconsistent dataset: ") + e.what());
    }
    return d;
  } catch (const YAML::Exception& e) {
    fail(ErrorKind::Format, std::string("dataset manifest missing or malformed field: ") + e.what());
  }
}

const char* to_string(Placeholder p) noexcept {
  switch (p) {
    case Placeholder::RepeatLast: return "repeat_last";
    case Placeholder::Zeros: return "zeros";
    case Placeholder::GaussianNoise: return "gaussian_noise";
    case Placeholder::LearnableMask: return "learnable_mask";
  }
  return "?";
}

Placeholder placeholder_from_string(const std::string& name) {
  if (name == "repeat_last" || name == "repeat") return Placeholder::RepeatLast;
  if (name == "zeros" || name == "zero") return Placeholder::Zeros;
  if (name == "gaussian_noise" || name == "noise") return Placeholder::GaussianNoise;
  if (name == "learnable_mask" || name == "mask") return Placeholder::LearnableMask;
  fail(ErrorKind::Config, "unknown placeholder '" + name + "'");
}

NoiseStats estimate_noise_stats(const TrajectoryDataset& d) {
  const auto sd = static_cast<std::size_t>(d.state_dim);
  std::vector<double> sum(sd, 0.0), sumsq(sd, 0.0);
  std::size_t count = 0;
  for (std::size_t t = 0; t < d.n_trajectories(); ++t) {
    for (auto i = d.trajectory_begin(t) + 1; i < d.trajectory_end(t); ++i) {
      const auto a = d.state(i - 1);
      const auto b = d.state(i);
      for (std::size_t k = 0; k < sd; ++k) {
        const double delta = static_cast<double>(b[k]) - static_cast<double>(a[k]);
        sum[k] += delta;
        sumsq[k] += delta * delta;
      }
      ++count;
    }
  }
  require(count > 0, ErrorKind::InsufficientData,
          "noise statistics need at least one trajectory with two or more transitions");
  NoiseStats s;
  s.mean.resize(sd);
  s.std.resize(sd);
  for (std::size_t k = 0; k < sd; ++k) {
    s.mean[k] = sum[k] / static_cast<double>(count);
    const double var = sumsq[k] / static_cast<double>(count) - s.mean[k] * s.mean[k];
    s.std[k] = std::sqrt(std::max(0.0, var));
  }
  return s;
}

MaskedView::MaskedView(const TrajectoryDataset& base, MaskingOptions options)
    : base_(&base), options_(options) {
  require(base.size() > 0, ErrorKind::InvalidInput, "masked view over an empty dataset");
  mask_.dropped.assign(base.size(), 0);
  mask_.drop_spans.assign(base.size(), 0);
  if (options_.placeholder == Placeholder::GaussianNoise) noise_ = estimate_noise_stats(base);
}

void MaskedView::set_mask(DropMask mask) {
  require(mask.size() == base_->size() && mask.drop_spans.size() == base_->size(),
          ErrorKind::InvalidInput, "drop-mask length differs from the dataset");
  mask_ = std::move(mask);
}

WindowSlice MaskedView::apply_mask(std::int64_t begin, std::int64_t end,
                                   std::mt19937_64& noise_rng) const {
  const auto& d = *base_;
  require(begin >= 0 && begin < end && end <= static_cast<std::int64_t>(d.size()),
          ErrorKind::InvalidWindow, "window out of range");
  require(d.trajectory_of[begin] == d.trajectory_of[end - 1], ErrorKind::InvalidWindow,
          "window [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") crosses a trajectory boundary");

  const auto len = static_cast<std::size_t>(end - begin);
  const auto sd = static_cast<std::size_t>(d.state_dim);
  const auto ad = static_cast<std::size_t>(d.action_dim);
  WindowSlice w;
  w.rtg.resize(len);
  w.obs.resize(len * sd);
  w.act.resize(len * ad);
  w.drop_spans.resize(len);
  w.timesteps.resize(len);
  w.mask_flags.assign(len, 0);

  const auto placeholder = options_.placeholder;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> acc(sd, 0.0);
  auto draw_into = [&](std::vector<double>& v) {
    for (std::size_t k = 0; k < sd; ++k) {
      v[k] += options_.noise_scale * (noise_.mean[k] + noise_.std[k] * gauss(noise_rng));
    }
  };

  for (std::size_t j = 0; j < len; ++j) {
    const auto i = static_cast<std::size_t>(begin) + j;
    const int k = mask_.drop_spans[i];
    const std::size_t src = i - static_cast<std::size_t>(k);
    w.drop_spans[j] = k;
    w.timesteps[j] = d.timestep(i);

    float* obs = w.obs.data() + j * sd;
    float* act = w.act.data() + j * ad;
    const bool zero_out = k > 0 && placeholder == Placeholder::Zeros;

    w.rtg[j] = zero_out ? 0.0f : static_cast<float>(d.conditioning_rtg(src));
    const auto s = d.state(src);
    if (zero_out) {
      std::fill(obs, obs + sd, 0.0f);
    } else if (k > 0 && placeholder == Placeholder::GaussianNoise) {
      // A span continuing from the previous position extends that random walk;
      // a span whose start lies outside the window gets all k draws at once.
      if (j > 0 && k > 1) {
        draw_into(acc);
      } else {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int n = 0; n < k; ++n) draw_into(acc);
      }
      for (std::size_t c = 0; c < sd; ++c) obs[c] = static_cast<float>(s[c] + acc[c]);
    } else {
      std::copy(s.begin(), s.end(), obs);
    }

    if (options_.drop_actions && k > 0) {
      if (zero_out) {
        std::fill(act, act + ad, 0.0f);
      } else {
        const auto a = d.action(src);
        std::copy(a.begin(), a.end(), act);
      }
    } else {
      const auto a = d.action(i);
      std::copy(a.begin(), a.end(), act);
    }
    w.mask_flags[j] = (k > 0 && placeholder == Placeholder::LearnableMask) ? 1 : 0;
  }
  return w;
}

const DropMask& resample_mask(MaskedView& view, const DropProcessConfig& config,
                              std::mt19937_64& rng, double progress) {
  view.set_mask(sample_drop_sequence(config, view.base().size(), view.base().trajectory_starts,
                                     rng, progress));
  return view.mask();
}

TokenBatch TokenBatch::empty(std::int64_t batch, std::int64_t context, int state_dim,
                             int action_dim, bool discrete) {
  TokenBatch t;
  t.batch = batch;
  t.context = context;
  t.state_dim = state_dim;
  t.action_dim = action_dim;
  t.discrete_actions = discrete;
  const auto n = static_cast<std::size_t>(batch * context);
  t.rtg.assign(n, 0.0f);
  t.obs.assign(n * state_dim, 0.0f);
  t.act.assign(n * action_dim, 0.0f);
  t.act_target.assign(n * action_dim, 0.0f);
  t.timesteps.assign(n, 0);
  t.drop_spans.assign(n, 0);
  t.pad_mask.assign(n, 1);
  t.mask_token_flags.assign(n, 0);
  t.next_obs.assign(n * state_dim, 0.0f);
  t.next_rtg.assign(n, 0.0f);
  t.next_valid.assign(n, 0);
  t.anchors.assign(static_cast<std::size_t>(batch), 0);
  return t;
}

void fill_row(TokenBatch& batch, std::int64_t b, const MaskedView& view, std::int64_t anchor,
              std::mt19937_64& noise_rng) {
  const auto& d = view.base();
  const auto traj = static_cast<std::size_t>(d.trajectory_of[anchor]);
  const std::int64_t begin = std::max(d.trajectory_begin(traj), anchor - batch.context + 1);
  const std::int64_t end = anchor + 1;
  const std::int64_t pad = batch.context - (end - begin);
  const auto w = view.apply_mask(begin, end, noise_rng);
  const auto sd = static_cast<std::size_t>(d.state_dim);
  const auto ad = static_cast<std::size_t>(d.action_dim);
  const auto traj_end = d.trajectory_end(traj);

  batch.anchors[b] = anchor;
  for (std::int64_t j = 0; j < end - begin; ++j) {
    const auto p = batch.pos(b, pad + j);
    const auto i = static_cast<std::size_t>(begin + j);
    batch.rtg[p] = w.rtg[j];
    std::copy_n(w.obs.begin() + j * sd, sd, batch.obs.begin() + p * sd);
    std::copy_n(w.act.begin() + j * ad, ad, batch.act.begin() + p * ad);
    const auto raw = d.action(i);
    std::copy(raw.begin(), raw.end(), batch.act_target.begin() + p * ad);
    batch.timesteps[p] = w.timesteps[j];
    batch.drop_spans[p] = w.drop_spans[j];
    batch.pad_mask[p] = 0;
    batch.mask_token_flags[p] = w.mask_flags[j];
    if (static_cast<std::int64_t>(i) + 1 < traj_end) {
      const auto ns = d.state(i + 1);
      std::copy(ns.begin(), ns.end(), batch.next_obs.begin() + p * sd);
      batch.next_rtg[p] = static_cast<float>(d.conditioning_rtg(i + 1));
      batch.next_valid[p] = 1;
    }
  }
}

TokenBatch sample_batch(const MaskedView& view, std::int64_t batch_size, std::int64_t context,
                        std::mt19937_64& rng, std::mt19937_64& noise_rng) {
  const auto& d = view.base();
  require(batch_size >= 1 && context >= 1, ErrorKind::Config, "batch size and context must be >= 1");
  require(context <= d.max_trajectory_length(), ErrorKind::Config,
          "context length " + std::to_string(context) + " exceeds every trajectory (longest is " +
              std::to_string(d.max_trajectory_length()) + ")");
  auto batch = TokenBatch::empty(batch_size, context, d.state_dim, d.action_dim, d.discrete_actions);
  std::uniform_int_distribution<std::int64_t> pick(0, static_cast<std::int64_t>(d.size()) - 1);
  for (std::int64_t b = 0; b < batch_size; ++b) {
    fill_row(batch, b, view, pick(rng), noise_rng);
  }
  return batch;
}

}  // namespace defog
