#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "defog/dataset.hpp"
#include "defog/env.hpp"

namespace defog {

enum class DropspanMode { Explicit, Implicit, None };
enum class MaskTokenMode { Off, Shared, Separate };
enum class ActionHead { Gaussian, Categorical };

const char* to_string(DropspanMode m) noexcept;
const char* to_string(MaskTokenMode m) noexcept;
const char* to_string(ActionHead h) noexcept;
DropspanMode dropspan_mode_from_string(const std::string& s);
MaskTokenMode mask_token_from_string(const std::string& s);
ActionHead action_head_from_string(const std::string& s);

struct ModelConfig {
  int state_dim = 0;
  int action_dim = 0;
  int n_actions = 0;  // categorical head only
  ActionHead action_head = ActionHead::Gaussian;

  int n_layers = 2;
  int n_heads = 2;
  int embed_dim = 64;
  int context = 20;
  double dropout = 0.1;
  std::string activation = "relu";
  int max_timestep = 1024;
  int max_dropspan = 64;

  bool use_timestep_embedding = false;
  DropspanMode dropspan_mode = DropspanMode::Explicit;
  bool predict_state = false;
  bool predict_rtg = false;
  MaskTokenMode mask_token = MaskTokenMode::Off;
  double log_std_min = -5.0;
  double log_std_max = 2.0;

  /// Reward-to-go tokens are divided by this before embedding.
  double rtg_scale = 1.0;
  double aux_loss_weight = 1.0;
  std::uint64_t init_seed = 0;

  /// Implicit drop-span mode requires use_timestep_embedding.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// TokenBatch moved onto tensors of the model's dtype.
struct BatchTensors {
  torch::Tensor rtg;         // [B, K, 1]
  torch::Tensor obs;         // [B, K, state_dim]
  torch::Tensor act;         // [B, K, action_dim] float, or [B, K] long ids
  torch::Tensor act_target;  // same layout as act
  torch::Tensor timesteps;   // [B, K] long
  torch::Tensor drop_spans;  // [B, K] long
  torch::Tensor pad;         // [B, K] bool, true = padding
  torch::Tensor mask_flags;  // [B, K] bool
  torch::Tensor next_obs;    // [B, K, state_dim]
  torch::Tensor next_rtg;    // [B, K, 1]
  torch::Tensor next_valid;  // [B, K] bool
};

struct ForwardOutput {
  torch::Tensor mean;     // gaussian [B, K, action_dim]
  torch::Tensor log_std;  // gaussian [B, K, action_dim], clamped
  torch::Tensor logits;   // categorical [B, K, n_actions]
  torch::Tensor state_pred;
  torch::Tensor rtg_pred;
  torch::Tensor hidden;   // final hidden states [B, 3K, d]
};

struct LossBreakdown {
  torch::Tensor total;
  double action_nll = 0.0;   // per position, summed over action dims
  double nll_per_dim = 0.0;
  double state_mse = 0.0;
  double rtg_mse = 0.0;
};

/// Diagonal Gaussian negative log-likelihood summed over the last dim.
torch::Tensor gaussian_nll(const torch::Tensor& action, const torch::Tensor& mean,
                           const torch::Tensor& log_std);

enum class ParamGroup { Trunk, DropspanEncoder, ActionPredictor, OtherHeads };
const char* to_string(ParamGroup g) noexcept;
ParamGroup param_group_from_string(const std::string& s);

using NamedParams = std::vector<std::pair<std::string, torch::Tensor>>;

class CausalBlockImpl : public torch::nn::Module {
public:
  CausalBlockImpl(int embed_dim, int n_heads);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& allowed,
                        const std::function<torch::Tensor(const torch::Tensor&)>& drop);
  void set_gelu(bool gelu);

private:
  int n_heads_;
  bool is_gelu_ = false;
  torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(CausalBlock);

/// Return-conditioned causal transformer over interleaved (rtg, state, action)
/// tokens, with drop-span and timestep embeddings and a stochastic action head.
class DeFogNetImpl : public torch::nn::Module {
public:
  explicit DeFogNetImpl(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Per-dimension state normalization taken from the training dataset.
  void set_normalizer(const std::vector<double>& mean, const std::vector<double>& std);
  torch::Tensor obs_mean() const { return obs_mean_; }
  torch::Tensor obs_std() const { return obs_std_; }

  BatchTensors to_tensors(const TokenBatch& batch) const;

  torch::Tensor encode_tokens(const BatchTensors& batch);
  ForwardOutput forward(const BatchTensors& batch);
  LossBreakdown loss(const BatchTensors& batch, const ForwardOutput& out) const;

  std::map<ParamGroup, NamedParams> parameter_groups() const;

  /// Stream that seeds each dropout mask in training mode.
  void seed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }
  std::mt19937_64& dropout_rng() { return dropout_rng_; }
  const std::mt19937_64& dropout_rng() const { return dropout_rng_; }

  std::int64_t clamped_span_count() const { return clamped_spans_; }
  torch::ScalarType dtype() const;

private:
  torch::Tensor dropout(const torch::Tensor& x);

  ModelConfig config_;
  torch::nn::Linear embed_state_{nullptr}, embed_rtg_{nullptr}, embed_action_{nullptr};
  torch::nn::Embedding embed_action_ids_{nullptr};
  torch::nn::Embedding embed_timestep_{nullptr};
  torch::Tensor mask_state_, mask_rtg_;
  torch::nn::LayerNorm embed_ln_{nullptr}, ln_f_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::Linear action_mean_{nullptr}, action_log_std_{nullptr}, action_logits_{nullptr};
  torch::nn::Linear state_head_{nullptr}, rtg_head_{nullptr};
  torch::nn::Embedding dropspan_embed_{nullptr};
  torch::Tensor obs_mean_, obs_std_;
  std::mt19937_64 dropout_rng_{0};
  std::int64_t clamped_spans_ = 0;
};
TORCH_MODULE(DeFogNet);

/// One step of rollout history.
struct ContextEntry {
  float rtg = 0.0f;
  std::vector<float> obs;
  std::vector<float> act;  // zeros until the action is chosen
  std::int64_t timestep = 0;
  std::int64_t drop_span = 0;
};

enum class ActMode { Mean, Sample };

/// Left-padded size-1 batch from the newest `context` entries of `history`.
TokenBatch context_batch(const std::deque<ContextEntry>& history, const ModelConfig& config);

/// Chooses the action for the newest entry of `history`. Continuous actions
/// are clipped to the action space bounds; categorical mean mode is argmax.
ActionVec act(DeFogNet& model, const std::deque<ContextEntry>& history, ActMode mode,
              std::mt19937_64& rng, const ActionSpace& space);

}  // namespace defog
