#include "defog/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "defog/errors.hpp"
#include "defog/rng.hpp"

namespace defog {

const char* to_string(DropspanMode m) noexcept {
  switch (m) {
    case DropspanMode::Explicit: return "explicit";
    case DropspanMode::Implicit: return "implicit";
    case DropspanMode::None: return "none";
  }
  return "?";
}

const char* to_string(MaskTokenMode m) noexcept {
  switch (m) {
    case MaskTokenMode::Off: return "off";
    case MaskTokenMode::Shared: return "shared";
    case MaskTokenMode::Separate: return "separate";
  }
  return "?";
}

const char* to_string(ActionHead h) noexcept {
  return h == ActionHead::Gaussian ? "gaussian" : "categorical";
}

DropspanMode dropspan_mode_from_string(const std::string& s) {
  if (s == "explicit") return DropspanMode::Explicit;
  if (s == "implicit") return DropspanMode::Implicit;
  if (s == "none") return DropspanMode::None;
  fail(ErrorKind::Config, "unknown dropspan_mode '" + s + "'");
}

MaskTokenMode mask_token_from_string(const std::string& s) {
  if (s == "off") return MaskTokenMode::Off;
  if (s == "shared") return MaskTokenMode::Shared;
  if (s == "separate") return MaskTokenMode::Separate;
  fail(ErrorKind::Config, "unknown mask_token mode '" + s + "'");
}

ActionHead action_head_from_string(const std::string& s) {
  if (s == "gaussian") return ActionHead::Gaussian;
  if (s == "categorical") return ActionHead::Categorical;
  fail(ErrorKind::Config, "unknown action_head '" + s + "'");
}

const char* to_string(ParamGroup g) noexcept {
  switch (g) {
    case ParamGroup::Trunk: return "trunk";
    case ParamGroup::DropspanEncoder: return "dropspan_encoder";
    case ParamGroup::ActionPredictor: return "action_predictor";
    case ParamGroup::OtherHeads: return "other_heads";
  }
  return "?";
}

ParamGroup param_group_from_string(const std::string& s) {
  if (s == "trunk") return ParamGroup::Trunk;
  if (s == "dropspan_encoder" || s == "span") return ParamGroup::DropspanEncoder;
  if (s == "action_predictor" || s == "action") return ParamGroup::ActionPredictor;
  if (s == "other_heads") return ParamGroup::OtherHeads;
  fail(ErrorKind::Config, "unknown parameter group '" + s + "'");
}

void ModelConfig::validate() const {
  require(state_dim >= 1, ErrorKind::Config, "model state_dim must be >= 1");
  require(action_dim >= 1, ErrorKind::Config, "model action_dim must be >= 1");
  require(context >= 1, ErrorKind::Config, "context length K must be >= 1");
  require(n_layers >= 1, ErrorKind::Config, "n_layers must be >= 1");
  require(n_heads >= 1 && embed_dim % n_heads == 0, ErrorKind::Config,
          "embed_dim must be divisible by n_heads");
  require(max_dropspan >= 1, ErrorKind::Config, "max_dropspan must be >= 1");
  require(max_timestep >= 1, ErrorKind::Config, "max_timestep must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, ErrorKind::Config, "dropout must be in [0,1)");
  require(activation == "relu" || activation == "gelu", ErrorKind::Config,
          "activation must be relu or gelu");
  require(log_std_min < log_std_max, ErrorKind::Config, "log_std bounds must be ordered");
  require(rtg_scale > 0.0, ErrorKind::Config, "rtg_scale must be positive");
  if (action_head == ActionHead::Categorical) {
    require(n_actions >= 2 && action_dim == 1, ErrorKind::Config,
            "categorical head needs n_actions >= 2 and action_dim = 1");
  }
  require(dropspan_mode != DropspanMode::Implicit || use_timestep_embedding, ErrorKind::Config,
          "implicit drop-span mode carries the span through the timestep embedding; "
          "enable use_timestep_embedding");
}

torch::Tensor gaussian_nll(const torch::Tensor& action, const torch::Tensor& mean,
                           const torch::Tensor& log_std) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const auto z = (action - mean) * torch::exp(-log_std);
  return (0.5 * z * z + log_std + half_log_2pi).sum(-1);
}

CausalBlockImpl::CausalBlockImpl(int embed_dim, int n_heads) : n_heads_(n_heads) {
  ln1_ = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed_dim})));
  qkv_ = register_module("qkv", torch::nn::Linear(embed_dim, 3 * embed_dim));
  proj_ = register_module("proj", torch::nn::Linear(embed_dim, embed_dim));
  ln2_ = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed_dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(embed_dim, 4 * embed_dim));
  fc2_ = register_module("fc2", torch::nn::Linear(4 * embed_dim, embed_dim));
}

torch::Tensor CausalBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& allowed,
                                       const std::function<torch::Tensor(const torch::Tensor&)>& drop) {
  const auto B = x.size(0);
  const auto T = x.size(1);
  const auto D = x.size(2);
  const auto hd = D / n_heads_;

  auto qkv = qkv_(ln1_(x)).chunk(3, -1);
  auto heads = [&](const torch::Tensor& t) { return t.view({B, T, n_heads_, hd}).transpose(1, 2); };
  auto q = heads(qkv[0]);
  auto k = heads(qkv[1]);
  auto v = heads(qkv[2]);

  auto att = torch::matmul(q, k.transpose(-2, -1)) * (1.0 / std::sqrt(static_cast<double>(hd)));
  att = att.masked_fill(allowed.logical_not(), -1e9);
  att = drop(torch::softmax(att, -1));
  auto y = torch::matmul(att, v).transpose(1, 2).contiguous().view({B, T, D});
  auto h = x + drop(proj_(y));

  auto m = fc1_(ln2_(h));
  m = is_gelu_ ? torch::gelu(m) : torch::relu(m);
  return h + drop(fc2_(m));
}

DeFogNetImpl::DeFogNetImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int d = config_.embed_dim;
  using torch::nn::Embedding;
  using torch::nn::LayerNorm;
  using torch::nn::LayerNormOptions;
  using torch::nn::Linear;

  embed_state_ = register_module("embed_state", Linear(config_.state_dim, d));
  embed_rtg_ = register_module("embed_rtg", Linear(1, d));
  if (config_.action_head == ActionHead::Categorical) {
    embed_action_ids_ = register_module("embed_action", Embedding(config_.n_actions, d));
  } else {
    embed_action_ = register_module("embed_action", Linear(config_.action_dim, d));
  }
  if (config_.use_timestep_embedding) {
    embed_timestep_ = register_module("embed_timestep", Embedding(config_.max_timestep, d));
  }
  if (config_.mask_token == MaskTokenMode::Shared) {
    mask_state_ = register_parameter("mask_token", torch::zeros({d}));
    mask_rtg_ = mask_state_;
  } else if (config_.mask_token == MaskTokenMode::Separate) {
    mask_state_ = register_parameter("mask_state", torch::zeros({d}));
    mask_rtg_ = register_parameter("mask_rtg", torch::zeros({d}));
  }
  embed_ln_ = register_module("embed_ln", LayerNorm(LayerNormOptions({d})));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < config_.n_layers; ++i) {
    auto block = CausalBlock(d, config_.n_heads);
    block->set_gelu(config_.activation == "gelu");
    blocks_->push_back(block);
  }
  ln_f_ = register_module("ln_f", LayerNorm(LayerNormOptions({d})));
  if (config_.action_head == ActionHead::Gaussian) {
    action_mean_ = register_module("action_mean", Linear(d, config_.action_dim));
    action_log_std_ = register_module("action_log_std", Linear(d, config_.action_dim));
  } else {
    action_logits_ = register_module("action_logits", Linear(d, config_.n_actions));
  }
  if (config_.predict_state) state_head_ = register_module("state_head", Linear(d, config_.state_dim));
  if (config_.predict_rtg) rtg_head_ = register_module("rtg_head", Linear(d, 1));
  // Registered last so that toggling the drop-span encoder leaves every other
  // parameter's initialization unchanged for a given seed.
  if (config_.dropspan_mode == DropspanMode::Explicit) {
    dropspan_embed_ = register_module("dropspan_embed", Embedding(config_.max_dropspan + 1, d));
  }

  obs_mean_ = register_buffer("obs_mean", torch::zeros({config_.state_dim}));
  obs_std_ = register_buffer("obs_std", torch::ones({config_.state_dim}));

  auto gen = at::make_generator<at::CPUGeneratorImpl>(config_.init_seed);
  torch::NoGradGuard no_grad;
  for (auto& p : named_parameters(true)) {
    const auto& name = p.key();
    auto& t = p.value();
    const bool is_ln = name.find("ln") != std::string::npos && t.dim() == 1;
    if (is_ln) {
      if (name.ends_with("weight")) t.fill_(1.0);
      else t.zero_();
    } else if (name.ends_with("bias")) {
      t.zero_();
    } else {
      t.normal_(0.0, 0.02, gen);
    }
  }
}

void CausalBlockImpl::set_gelu(bool gelu) { is_gelu_ = gelu; }

torch::ScalarType DeFogNetImpl::dtype() const {
  return embed_state_->weight.scalar_type();
}

void DeFogNetImpl::set_normalizer(const std::vector<double>& mean, const std::vector<double>& std) {
  require(mean.size() == static_cast<std::size_t>(config_.state_dim) && std.size() == mean.size(),
          ErrorKind::InvalidInput, "normalizer dims differ from state_dim");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    obs_mean_[static_cast<std::int64_t>(i)] = mean[i];
    obs_std_[static_cast<std::int64_t>(i)] = std[i] > 1e-6 ? std[i] : 1.0;
  }
}

namespace {

torch::Tensor float_tensor(const std::vector<float>& v, std::vector<std::int64_t> shape,
                           torch::ScalarType dtype) {
  return torch::from_blob(const_cast<float*>(v.data()), shape, torch::kFloat32).to(dtype, false, true);
}

torch::Tensor long_tensor(const std::vector<std::int64_t>& v, std::vector<std::int64_t> shape) {
  return torch::from_blob(const_cast<std::int64_t*>(v.data()), shape, torch::kInt64).clone();
}

torch::Tensor bool_tensor(const std::vector<std::uint8_t>& v, std::vector<std::int64_t> shape) {
  return torch::from_blob(const_cast<std::uint8_t*>(v.data()), shape, torch::kUInt8).to(torch::kBool);
}

}  // namespace

BatchTensors DeFogNetImpl::to_tensors(const TokenBatch& b) const {
  require(b.state_dim == config_.state_dim && b.action_dim == config_.action_dim,
          ErrorKind::Config, "batch dims differ from the model's");
  require(b.discrete_actions == (config_.action_head == ActionHead::Categorical), ErrorKind::Config,
          "batch action type does not match the model's action head");
  const auto dt = dtype();
  const std::int64_t B = b.batch, K = b.context, sd = b.state_dim, ad = b.action_dim;
  BatchTensors t;
  t.rtg = float_tensor(b.rtg, {B, K, 1}, dt);
  t.obs = float_tensor(b.obs, {B, K, sd}, dt);
  if (b.discrete_actions) {
    t.act = float_tensor(b.act, {B, K}, torch::kFloat32).round().to(torch::kInt64);
    t.act_target = float_tensor(b.act_target, {B, K}, torch::kFloat32).round().to(torch::kInt64);
  } else {
    t.act = float_tensor(b.act, {B, K, ad}, dt);
    t.act_target = float_tensor(b.act_target, {B, K, ad}, dt);
  }
  t.timesteps = long_tensor(b.timesteps, {B, K});
  t.drop_spans = long_tensor(b.drop_spans, {B, K});
  t.pad = bool_tensor(b.pad_mask, {B, K});
  t.mask_flags = bool_tensor(b.mask_token_flags, {B, K});
  t.next_obs = float_tensor(b.next_obs, {B, K, sd}, dt);
  t.next_rtg = float_tensor(b.next_rtg, {B, K, 1}, dt);
  t.next_valid = bool_tensor(b.next_valid, {B, K});
  return t;
}

torch::Tensor DeFogNetImpl::encode_tokens(const BatchTensors& b) {
  const auto B = b.obs.size(0);
  const auto K = b.obs.size(1);
  const auto d = config_.embed_dim;

  auto s_tok = embed_state_((b.obs - obs_mean_) / obs_std_);
  auto g_tok = embed_rtg_(b.rtg / config_.rtg_scale);
  auto a_tok = config_.action_head == ActionHead::Categorical ? embed_action_ids_(b.act)
                                                              : embed_action_(b.act);

  if (config_.mask_token != MaskTokenMode::Off) {
    auto flags = b.mask_flags.unsqueeze(-1);
    s_tok = torch::where(flags, mask_state_.expand({B, K, d}), s_tok);
    g_tok = torch::where(flags, mask_rtg_.expand({B, K, d}), g_tok);
  }

  if (config_.use_timestep_embedding) {
    const auto t = b.timesteps.clamp(0, config_.max_timestep - 1);
    const auto omega = embed_timestep_(t);
    a_tok = a_tok + omega;
    if (config_.dropspan_mode == DropspanMode::Implicit) {
      const auto omega_seen = embed_timestep_((b.timesteps - b.drop_spans).clamp(0, config_.max_timestep - 1));
      s_tok = s_tok + omega_seen;
      g_tok = g_tok + omega_seen;
    } else {
      s_tok = s_tok + omega;
      g_tok = g_tok + omega;
    }
  }

  if (config_.dropspan_mode == DropspanMode::Explicit) {
    const auto over = (b.drop_spans > config_.max_dropspan).sum().item<std::int64_t>();
    if (over > 0) clamped_spans_ += over;
    const auto psi = dropspan_embed_(b.drop_spans.clamp(0, config_.max_dropspan));
    s_tok = s_tok + psi;
    g_tok = g_tok + psi;
  }

  return torch::stack({g_tok, s_tok, a_tok}, 2).reshape({B, 3 * K, d});
}

torch::Tensor DeFogNetImpl::dropout(const torch::Tensor& x) {
  if (!is_training() || config_.dropout <= 0.0) return x;
  const double keep = 1.0 - config_.dropout;
  // xoshiro256** seeded per call from the dropout stream; far cheaper than
  // the per-element generator path of bernoulli_.
  std::uint64_t s[4];
  std::uint64_t z = dropout_rng_();
  for (auto& w : s) w = z = splitmix64(z);
  auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
  auto mask = torch::empty(x.sizes(), torch::TensorOptions().dtype(x.scalar_type()));
  const auto threshold = static_cast<std::uint64_t>(keep * 18446744073709551616.0);
  const float scale = static_cast<float>(1.0 / keep);
  auto* m = mask.data_ptr<float>();
  const auto n = mask.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint64_t r = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    m[i] = r < threshold ? scale : 0.0f;
  }
  return x * mask;
}

ForwardOutput DeFogNetImpl::forward(const BatchTensors& b) {
  const auto B = b.obs.size(0);
  const auto K = b.obs.size(1);
  const auto T = 3 * K;
  require(K <= config_.context, ErrorKind::InvalidInput, "batch context exceeds the model's K");

  auto x = dropout(embed_ln_(encode_tokens(b)));

  const auto causal = torch::ones({T, T}, torch::kBool).tril();
  const auto eye = torch::eye(T, torch::kBool);
  const auto pad_keys = b.pad.repeat_interleave(3, 1);  // [B, T]
  const auto allowed =
      causal.view({1, 1, T, T}) & (pad_keys.logical_not().view({B, 1, 1, T}) | eye.view({1, 1, T, T}));

  auto drop = [this](const torch::Tensor& t) { return dropout(t); };
  for (const auto& m : *blocks_) {
    x = m->as<CausalBlock>()->forward(x, allowed, drop);
  }
  x = ln_f_(x);

  ForwardOutput out;
  out.hidden = x;
  const auto h = x.view({B, K, 3, config_.embed_dim});
  const auto v_state = h.select(2, 1);
  const auto v_action = h.select(2, 2);
  if (config_.action_head == ActionHead::Gaussian) {
    out.mean = action_mean_(v_state);
    out.log_std = action_log_std_(v_state).clamp(config_.log_std_min, config_.log_std_max);
  } else {
    out.logits = action_logits_(v_state);
  }
  if (config_.predict_state) out.state_pred = state_head_(v_action);
  if (config_.predict_rtg) out.rtg_pred = rtg_head_(v_action);
  return out;
}

LossBreakdown DeFogNetImpl::loss(const BatchTensors& b, const ForwardOutput& out) const {
  const auto valid = b.pad.logical_not().to(dtype());
  const auto n_valid = valid.sum().clamp_min(1.0);

  torch::Tensor nll;
  if (config_.action_head == ActionHead::Gaussian) {
    nll = gaussian_nll(b.act_target, out.mean, out.log_std);
  } else {
    nll = -torch::log_softmax(out.logits, -1).gather(-1, b.act_target.unsqueeze(-1)).squeeze(-1);
  }
  const auto action_loss = (nll * valid).sum() / n_valid;

  LossBreakdown r;
  r.total = action_loss;
  r.action_nll = action_loss.item<double>();
  r.nll_per_dim = config_.action_head == ActionHead::Gaussian ? r.action_nll / config_.action_dim
                                                              : r.action_nll;

  const auto aux_mask = valid * b.next_valid.to(dtype());
  const auto n_aux = aux_mask.sum().clamp_min(1.0);
  if (config_.predict_state) {
    const auto target = (b.next_obs - obs_mean_) / obs_std_;
    const auto mse = ((out.state_pred - target).pow(2).mean(-1) * aux_mask).sum() / n_aux;
    r.state_mse = mse.item<double>();
    r.total = r.total + config_.aux_loss_weight * mse;
  }
  if (config_.predict_rtg) {
    const auto target = b.next_rtg / config_.rtg_scale;
    const auto mse = ((out.rtg_pred - target).pow(2).mean(-1) * aux_mask).sum() / n_aux;
    r.rtg_mse = mse.item<double>();
    r.total = r.total + config_.aux_loss_weight * mse;
  }

  const double total = r.total.item<double>();
  if (!std::isfinite(total)) {
    std::ostringstream os;
    os << "non-finite loss: total=" << total << " action_nll=" << r.action_nll
       << " state_mse=" << r.state_mse << " rtg_mse=" << r.rtg_mse;
    fail(ErrorKind::Numerical, os.str());
  }
  return r;
}

std::map<ParamGroup, NamedParams> DeFogNetImpl::parameter_groups() const {
  std::map<ParamGroup, NamedParams> groups{{ParamGroup::Trunk, {}},
                                           {ParamGroup::DropspanEncoder, {}},
                                           {ParamGroup::ActionPredictor, {}},
                                           {ParamGroup::OtherHeads, {}}};
  for (const auto& p : named_parameters(true)) {
    const auto& name = p.key();
    ParamGroup g = ParamGroup::Trunk;
    if (name.starts_with("dropspan_embed")) g = ParamGroup::DropspanEncoder;
    else if (name.starts_with("action_mean") || name.starts_with("action_log_std") ||
             name.starts_with("action_logits"))
      g = ParamGroup::ActionPredictor;
    else if (name.starts_with("state_head") || name.starts_with("rtg_head"))
      g = ParamGroup::OtherHeads;
    groups[g].emplace_back(name, p.value());
  }
  return groups;
}

TokenBatch context_batch(const std::deque<ContextEntry>& history, const ModelConfig& config) {
  require(!history.empty(), ErrorKind::InvalidInput, "act() needs a non-empty context");
  const std::int64_t K = config.context;
  const auto n = std::min<std::int64_t>(K, static_cast<std::int64_t>(history.size()));
  const auto first = history.size() - static_cast<std::size_t>(n);
  auto b = TokenBatch::empty(1, K, config.state_dim, config.action_dim,
                             config.action_head == ActionHead::Categorical);
  const auto pad = K - n;
  for (std::int64_t j = 0; j < n; ++j) {
    const auto& e = history[first + static_cast<std::size_t>(j)];
    require(e.obs.size() == static_cast<std::size_t>(config.state_dim) &&
                e.act.size() == static_cast<std::size_t>(config.action_dim),
            ErrorKind::InvalidInput, "context entry dims differ from the model's");
    const auto p = b.pos(0, pad + j);
    b.rtg[p] = e.rtg;
    std::copy(e.obs.begin(), e.obs.end(), b.obs.begin() + p * config.state_dim);
    std::copy(e.act.begin(), e.act.end(), b.act.begin() + p * config.action_dim);
    b.timesteps[p] = e.timestep;
    b.drop_spans[p] = e.drop_span;
    b.pad_mask[p] = 0;
  }
  b.act_target = b.act;
  return b;
}

ActionVec act(DeFogNet& model, const std::deque<ContextEntry>& history, ActMode mode,
              std::mt19937_64& rng, const ActionSpace& space) {
  const auto& cfg = model->config();
  const auto batch = context_batch(history, cfg);
  const bool was_training = model->is_training();
  model->eval();
  ForwardOutput out;
  {
    torch::NoGradGuard no_grad;
    out = model->forward(model->to_tensors(batch));
  }
  if (was_training) model->train();

  const auto last = batch.context - 1;
  if (cfg.action_head == ActionHead::Categorical) {
    auto logits = out.logits[0][last].to(torch::kFloat64).contiguous();
    std::vector<double> l(logits.data_ptr<double>(), logits.data_ptr<double>() + logits.numel());
    if (mode == ActMode::Mean) {
      return {static_cast<double>(std::max_element(l.begin(), l.end()) - l.begin())};
    }
    const double mx = *std::max_element(l.begin(), l.end());
    std::vector<double> w(l.size());
    std::transform(l.begin(), l.end(), w.begin(), [mx](double v) { return std::exp(v - mx); });
    std::discrete_distribution<int> pick(w.begin(), w.end());
    return {static_cast<double>(pick(rng))};
  }

  auto mean = out.mean[0][last].to(torch::kFloat64).contiguous();
  auto log_std = out.log_std[0][last].to(torch::kFloat64).contiguous();
  ActionVec a(static_cast<std::size_t>(cfg.action_dim));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    double v = mean.data_ptr<double>()[i];
    if (mode == ActMode::Sample) v += std::exp(log_std.data_ptr<double>()[i]) * gauss(rng);
    a[i] = std::clamp(v, space.low, space.high);
  }
  return a;
}

}  // namespace defog
