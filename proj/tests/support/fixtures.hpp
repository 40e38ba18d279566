#pragma once

#include <random>

#include "defog/dataset.hpp"
#include "defog/model.hpp"
#include "defog/rdmdp.hpp"
#include "defog/toy_envs.hpp"
#include "defog/trainer.hpp"

namespace fixture {

inline const defog::TrajectoryDataset& point_mass_data() {
  static const auto d = defog::generate_dataset("point-mass", defog::Tier::Expert, 5000, 1);
  return d;
}

inline const defog::TrajectoryDataset& chain_data() {
  static const auto d = defog::generate_dataset("chain-walk", defog::Tier::Medium, 3000, 1);
  return d;
}

inline defog::ModelConfig small_config(int context = 8) {
  defog::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.embed_dim = 32;
  c.context = context;
  c.max_timestep = 128;
  c.max_dropspan = 16;
  c.rtg_scale = 100.0;
  return c;
}

inline defog::DeFogNet small_model(defog::ModelConfig c = small_config(),
                                   const defog::TrajectoryDataset& d = point_mass_data(),
                                   std::uint64_t seed = 0) {
  return defog::make_model(c, d, seed);
}

// A batch drawn from a masked view with the given drop rate.
inline defog::TokenBatch random_batch(const defog::TrajectoryDataset& d, std::int64_t B,
                                      std::int64_t K, double p_d, std::uint64_t seed,
                                      defog::MaskingOptions opts = {}) {
  defog::MaskedView v(d, opts);
  std::mt19937_64 mrng(seed), brng(seed + 1), nrng(seed + 2);
  defog::resample_mask(v, defog::DropProcessConfig::bernoulli(p_d), mrng);
  return defog::sample_batch(v, B, K, brng, nrng);
}

}  // namespace fixture
