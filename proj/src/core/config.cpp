#include "defog/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "defog/errors.hpp"
#include "defog/toy_envs.hpp"

namespace defog {

namespace {

void check_keys(const YAML::Node& node, const std::set<std::string>& known, const std::string& where) {
  if (!node) return;
  require(node.IsMap(), ErrorKind::Config, where + " must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    require(known.count(key) != 0, ErrorKind::Config, "unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& out, const std::string& where) {
  if (!node[key]) return;
  try {
    out = node[key].as<T>();
  } catch (const YAML::Exception&) {
    fail(ErrorKind::Config, std::string("bad value for ") + where + "." + key);
  }
}

std::string read_str(const YAML::Node& node, const char* key, const std::string& fallback) {
  return node[key] ? node[key].as<std::string>() : fallback;
}

}  // namespace

YAML::Node to_yaml(const ModelConfig& c) {
  YAML::Node n;
  n["state_dim"] = c.state_dim;
  n["action_dim"] = c.action_dim;
  n["n_actions"] = c.n_actions;
  n["action_head"] = to_string(c.action_head);
  n["n_layers"] = c.n_layers;
  n["n_heads"] = c.n_heads;
  n["embed_dim"] = c.embed_dim;
  n["context"] = c.context;
  n["dropout"] = c.dropout;
  n["activation"] = c.activation;
  n["max_timestep"] = c.max_timestep;
  n["max_dropspan"] = c.max_dropspan;
  n["use_timestep_embedding"] = c.use_timestep_embedding;
  n["dropspan_mode"] = to_string(c.dropspan_mode);
  n["predict_state"] = c.predict_state;
  n["predict_rtg"] = c.predict_rtg;
  n["mask_token"] = to_string(c.mask_token);
  n["log_std_min"] = c.log_std_min;
  n["log_std_max"] = c.log_std_max;
  n["rtg_scale"] = c.rtg_scale;
  n["aux_loss_weight"] = c.aux_loss_weight;
  n["init_seed"] = c.init_seed;
  return n;
}

ModelConfig model_config_from_yaml(const YAML::Node& n, ModelConfig c) {
  check_keys(n,
             {"state_dim", "action_dim", "n_actions", "action_head", "n_layers", "n_heads",
              "embed_dim", "context", "dropout", "activation", "max_timestep", "max_dropspan",
              "use_timestep_embedding", "dropspan_mode", "predict_state", "predict_rtg",
              "mask_token", "log_std_min", "log_std_max", "rtg_scale", "aux_loss_weight",
              "init_seed"},
             "model");
  if (!n) return c;
  const std::string w = "model";
  read(n, "state_dim", c.state_dim, w);
  read(n, "action_dim", c.action_dim, w);
  read(n, "n_actions", c.n_actions, w);
  c.action_head = action_head_from_string(read_str(n, "action_head", to_string(c.action_head)));
  read(n, "n_layers", c.n_layers, w);
  read(n, "n_heads", c.n_heads, w);
  read(n, "embed_dim", c.embed_dim, w);
  read(n, "context", c.context, w);
  read(n, "dropout", c.dropout, w);
  read(n, "activation", c.activation, w);
  read(n, "max_timestep", c.max_timestep, w);
  read(n, "max_dropspan", c.max_dropspan, w);
  read(n, "use_timestep_embedding", c.use_timestep_embedding, w);
  c.dropspan_mode = dropspan_mode_from_string(read_str(n, "dropspan_mode", to_string(c.dropspan_mode)));
  read(n, "predict_state", c.predict_state, w);
  read(n, "predict_rtg", c.predict_rtg, w);
  c.mask_token = mask_token_from_string(read_str(n, "mask_token", to_string(c.mask_token)));
  read(n, "log_std_min", c.log_std_min, w);
  read(n, "log_std_max", c.log_std_max, w);
  read(n, "rtg_scale", c.rtg_scale, w);
  read(n, "aux_loss_weight", c.aux_loss_weight, w);
  read(n, "init_seed", c.init_seed, w);
  return c;
}

YAML::Node to_yaml(const DropProcessConfig& c) {
  YAML::Node n;
  n["kind"] = to_string(c.kind);
  switch (c.kind) {
    case DropKind::Bernoulli: n["p_d"] = c.p_d; break;
    case DropKind::Markov:
      n["p1"] = c.p1;
      n["p2"] = c.p2;
      break;
    case DropKind::LinearSchedule:
      n["p_start"] = c.p_start;
      n["p_end"] = c.p_end;
      break;
  }
  return n;
}

DropProcessConfig drop_config_from_yaml(const YAML::Node& n, DropProcessConfig c) {
  if (!n) return c;
  if (n.IsScalar()) {
    // Shorthand: a bare number is a bernoulli rate.
    double p = 0.0;
    try {
      p = n.as<double>();
    } catch (const YAML::Exception&) {
      fail(ErrorKind::Config, "drop config must be a rate or a mapping");
    }
    return DropProcessConfig::bernoulli(p);
  }
  check_keys(n, {"kind", "p_d", "p1", "p2", "p_start", "p_end"}, "drop config");
  if (n["kind"]) {
    const auto kind = drop_kind_from_string(n["kind"].as<std::string>());
    if (kind != c.kind) c = DropProcessConfig{};
    c.kind = kind;
  }
  read(n, "p_d", c.p_d, "drop");
  read(n, "p1", c.p1, "drop");
  read(n, "p2", c.p2, "drop");
  read(n, "p_start", c.p_start, "drop");
  read(n, "p_end", c.p_end, "drop");
  return c;
}

YAML::Node to_yaml(const TrainConfig& c) {
  YAML::Node n;
  n["learning_rate"] = c.learning_rate;
  n["weight_decay"] = c.weight_decay;
  n["batch_size"] = c.batch_size;
  n["total_steps"] = c.total_steps;
  n["finetune_steps"] = c.finetune_steps;
  n["warmup_steps"] = c.warmup_steps;
  n["grad_clip_norm"] = c.grad_clip_norm;
  n["update_interval"] = c.update_interval;
  n["train_drop"] = to_yaml(c.train_drop);
  n["finetune_drop"] = to_yaml(c.finetune_drop);
  n["placeholder"] = to_string(c.masking.placeholder);
  n["noise_scale"] = c.masking.noise_scale;
  n["drop_actions"] = c.masking.drop_actions;
  n["fixed_mask"] = c.fixed_mask;
  n["short_finetune_interval"] = c.short_finetune_interval;
  YAML::Node groups(YAML::NodeType::Sequence);
  for (auto g : c.finetune_groups) groups.push_back(to_string(g));
  n["finetune_groups"] = groups;
  n["seed"] = c.seed;
  return n;
}

TrainConfig train_config_from_yaml(const YAML::Node& n, TrainConfig c) {
  check_keys(n,
             {"learning_rate", "weight_decay", "batch_size", "total_steps", "finetune_steps",
              "warmup_steps", "grad_clip_norm", "update_interval", "train_drop", "finetune_drop",
              "placeholder", "noise_scale", "drop_actions", "fixed_mask",
              "short_finetune_interval", "finetune_groups", "seed"},
             "train");
  if (!n) return c;
  const std::string w = "train";
  read(n, "learning_rate", c.learning_rate, w);
  read(n, "weight_decay", c.weight_decay, w);
  read(n, "batch_size", c.batch_size, w);
  read(n, "total_steps", c.total_steps, w);
  read(n, "finetune_steps", c.finetune_steps, w);
  read(n, "warmup_steps", c.warmup_steps, w);
  read(n, "grad_clip_norm", c.grad_clip_norm, w);
  read(n, "update_interval", c.update_interval, w);
  c.train_drop = drop_config_from_yaml(n["train_drop"], c.train_drop);
  c.finetune_drop = drop_config_from_yaml(n["finetune_drop"], c.finetune_drop);
  c.masking.placeholder = placeholder_from_string(read_str(n, "placeholder", to_string(c.masking.placeholder)));
  read(n, "noise_scale", c.masking.noise_scale, w);
  read(n, "drop_actions", c.masking.drop_actions, w);
  read(n, "fixed_mask", c.fixed_mask, w);
  read(n, "short_finetune_interval", c.short_finetune_interval, w);
  if (n["finetune_groups"]) {
    c.finetune_groups.clear();
    for (const auto& g : n["finetune_groups"]) c.finetune_groups.push_back(param_group_from_string(g.as<std::string>()));
  }
  read(n, "seed", c.seed, w);
  return c;
}

void EvalConfig::validate() const {
  if (eval_process == DropKind::Markov) {
    require(!markov_pairs.empty(), ErrorKind::Config, "markov evaluation needs at least one (p1, p2) pair");
    for (auto [p1, p2] : markov_pairs) {
      DropProcessConfig::markov(p1, p2).validate();
      markov_steady_state(p1, p2);
    }
  } else {
    require(eval_process == DropKind::Bernoulli, ErrorKind::Config,
            "evaluation process must be bernoulli or markov");
    require(!drop_rates.empty(), ErrorKind::Config, "drop_rates is empty");
    for (double r : drop_rates)
      require(r >= 0.0 && r <= 1.0, ErrorKind::Config, "drop rates must lie in [0, 1]");
  }
  require(trials_per_rate >= 1, ErrorKind::Config, "trials_per_rate must be >= 1");
  require(!seeds.empty(), ErrorKind::Config, "seeds is empty");
  require(max_steps >= 0, ErrorKind::Config, "max_steps must be >= 0");
}

bool EvalConfig::operator==(const EvalConfig& o) const {
  const bool same_target = (std::isnan(target_return) && std::isnan(o.target_return)) ||
                           target_return == o.target_return;
  return drop_rates == o.drop_rates && trials_per_rate == o.trials_per_rate && seeds == o.seeds &&
         same_target && max_steps == o.max_steps && eval_process == o.eval_process &&
         markov_pairs == o.markov_pairs && act_mode == o.act_mode;
}

YAML::Node to_yaml(const EvalConfig& c) {
  YAML::Node n;
  n["drop_rates"] = c.drop_rates;
  n["drop_rates"].SetStyle(YAML::EmitterStyle::Flow);
  n["trials_per_rate"] = c.trials_per_rate;
  n["seeds"] = c.seeds;
  n["seeds"].SetStyle(YAML::EmitterStyle::Flow);
  if (std::isnan(c.target_return)) n["target_return"] = "env_default";
  else n["target_return"] = c.target_return;
  n["max_steps"] = c.max_steps;
  n["eval_process"] = to_string(c.eval_process);
  YAML::Node pairs(YAML::NodeType::Sequence);
  for (auto [p1, p2] : c.markov_pairs) {
    YAML::Node p(YAML::NodeType::Sequence);
    p.push_back(p1);
    p.push_back(p2);
    p.SetStyle(YAML::EmitterStyle::Flow);
    pairs.push_back(p);
  }
  n["markov_pairs"] = pairs;
  n["act_mode"] = c.act_mode == ActMode::Mean ? "mean" : "sample";
  return n;
}

EvalConfig eval_config_from_yaml(const YAML::Node& n, EvalConfig c) {
  check_keys(n,
             {"drop_rates", "trials_per_rate", "seeds", "target_return", "max_steps",
              "eval_process", "markov_pairs", "act_mode"},
             "eval");
  if (!n) return c;
  const std::string w = "eval";
  read(n, "drop_rates", c.drop_rates, w);
  read(n, "trials_per_rate", c.trials_per_rate, w);
  read(n, "seeds", c.seeds, w);
  if (n["target_return"]) {
    if (n["target_return"].as<std::string>() == "env_default") c.target_return = std::nan("");
    else read(n, "target_return", c.target_return, w);
  }
  read(n, "max_steps", c.max_steps, w);
  if (n["eval_process"]) c.eval_process = drop_kind_from_string(n["eval_process"].as<std::string>());
  if (n["markov_pairs"]) {
    c.markov_pairs.clear();
    for (const auto& p : n["markov_pairs"]) {
      require(p.IsSequence() && p.size() == 2, ErrorKind::Config, "markov_pairs entries must be [p1, p2]");
      c.markov_pairs.emplace_back(p[0].as<double>(), p[1].as<double>());
    }
  }
  if (n["act_mode"]) {
    const auto m = n["act_mode"].as<std::string>();
    require(m == "mean" || m == "sample", ErrorKind::Config, "act_mode must be mean or sample");
    c.act_mode = m == "mean" ? ActMode::Mean : ActMode::Sample;
  }
  return c;
}

void RunConfig::validate() const {
  const auto spec = env_spec(env);
  tier_from_string(tier);
  require(dataset.empty() ? n_transitions >= 1 : true, ErrorKind::Config, "n_transitions must be >= 1");
  model.validate();
  train.validate();
  eval.validate();
  require(model.state_dim == spec.state_dim, ErrorKind::Config,
          "model.state_dim does not match env " + env);
  const bool learnable = train.masking.placeholder == Placeholder::LearnableMask;
  const bool masked = model.mask_token != MaskTokenMode::Off;
  require(learnable == masked, ErrorKind::Config,
          "conflicting flags: placeholder=learnable_mask and model.mask_token must be enabled together "
          "(placeholder=" + std::string(to_string(train.masking.placeholder)) +
              ", mask_token=" + to_string(model.mask_token) + ")");
  if (finetune) {
    const bool only_span = train.finetune_groups.size() == 1 &&
                           train.finetune_groups[0] == ParamGroup::DropspanEncoder;
    require(!(only_span && model.dropspan_mode != DropspanMode::Explicit), ErrorKind::Config,
            "conflicting flags: finetune of dropspan_encoder alone needs dropspan_mode=explicit");
  }
}

YAML::Node to_yaml(const RunConfig& c) {
  YAML::Node n;
  n["env"] = c.env;
  n["tier"] = c.tier;
  n["dataset"] = c.dataset;
  n["n_transitions"] = c.n_transitions;
  n["output_dir"] = c.output_dir;
  n["label"] = c.label;
  n["seed"] = c.seed;
  n["finetune"] = c.finetune;
  n["model"] = to_yaml(c.model);
  n["train"] = to_yaml(c.train);
  n["eval"] = to_yaml(c.eval);
  return n;
}

RunConfig run_config_from_yaml(const YAML::Node& n) {
  check_keys(n,
             {"env", "tier", "dataset", "n_transitions", "output_dir", "label", "seed", "finetune",
              "model", "train", "eval"},
             "run config");
  const auto env = n && n["env"] ? n["env"].as<std::string>() : std::string("point-mass");
  RunConfig c = default_run_config(env);
  if (!n) return c;
  const std::string w = "run";
  read(n, "tier", c.tier, w);
  read(n, "dataset", c.dataset, w);
  read(n, "n_transitions", c.n_transitions, w);
  read(n, "output_dir", c.output_dir, w);
  read(n, "label", c.label, w);
  read(n, "seed", c.seed, w);
  read(n, "finetune", c.finetune, w);
  c.model = model_config_from_yaml(n["model"], c.model);
  c.train = train_config_from_yaml(n["train"], c.train);
  c.eval = eval_config_from_yaml(n["eval"], c.eval);
  return c;
}

RunConfig default_run_config(const std::string& env) {
  const auto spec = env_spec(env);
  RunConfig c;
  c.env = env;
  c.model.state_dim = spec.state_dim;
  c.model.action_dim = spec.action_space.dim;
  c.model.n_actions = spec.action_space.n_actions;
  c.model.action_head = spec.action_space.discrete() ? ActionHead::Categorical : ActionHead::Gaussian;
  c.model.max_timestep = std::max(spec.max_episode_steps + 1, 16);
  if (spec.action_space.discrete()) {
    c.train = TrainConfig::discrete_defaults();
    c.model.use_timestep_embedding = true;
    c.model.context = 20;
    c.model.rtg_scale = 1.0;
  } else {
    c.train = TrainConfig::continuous_defaults();
    c.model.rtg_scale = 100.0;
  }
  c.train.scale_to(20000);
  c.train.train_drop = DropProcessConfig::bernoulli(0.5);
  c.train.finetune_drop = DropProcessConfig::bernoulli(0.8);
  return c;
}

void make_vanilla_dt(RunConfig& c) {
  c.model.dropspan_mode = DropspanMode::None;
  c.model.mask_token = MaskTokenMode::Off;
  c.model.predict_state = false;
  c.model.predict_rtg = false;
  c.train.train_drop = DropProcessConfig::bernoulli(0.0);
  c.train.masking = MaskingOptions{};
  c.finetune = false;
  c.label = "dt";
}

RunConfig load_run_config(const std::string& path) {
  YAML::Node n;
  try {
    n = YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    fail(ErrorKind::Io, "cannot read config file " + path);
  } catch (const YAML::Exception& e) {
    fail(ErrorKind::Config, "config file " + path + " is not valid YAML: " + e.what());
  }
  return run_config_from_yaml(n);
}

std::string dump_yaml(const YAML::Node& node) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << node;
  return std::string(out.c_str()) + "\n";
}

void save_run_config(const RunConfig& config, const std::string& path) {
  std::ofstream f(path);
  require(f.good(), ErrorKind::Io, "cannot write " + path);
  f << dump_yaml(to_yaml(config));
  require(f.good(), ErrorKind::Io, "failed writing " + path);
}

void apply_override(RunConfig& config, const std::string& key, const std::string& value) {
  auto root = to_yaml(config);
  YAML::Node parsed;
  try {
    parsed = YAML::Load(value);
  } catch (const YAML::Exception&) {
    fail(ErrorKind::Config, "cannot parse value for " + key + ": " + value);
  }
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  require(!parts.empty(), ErrorKind::Config, "empty override key");

  // yaml-cpp nodes alias into `root`, so assigning through the chain edits it.
  std::vector<YAML::Node> chain{root};
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    YAML::Node next = chain.back()[parts[i]];
    require(next.IsDefined() && next.IsMap(), ErrorKind::Config, "unknown config section in " + key);
    chain.push_back(next);
  }
  require(chain.back()[parts.back()].IsDefined(), ErrorKind::Config, "unknown config key " + key);
  chain.back()[parts.back()] = parsed;
  const auto env_changed = parts.size() == 1 && parts[0] == "env";
  if (env_changed) {
    auto fresh = default_run_config(parsed.as<std::string>());
    fresh.seed = config.seed;
    fresh.output_dir = config.output_dir;
    config = fresh;
    return;
  }
  config = run_config_from_yaml(root);
}

namespace {

std::vector<AblationPreset> build_presets() {
  std::vector<AblationPreset> p;
  // Every drop-span variant carries timestep embeddings so only the span
  // mechanism differs between arms (implicit mode needs them).
  p.push_back({"dropspan",
               "drop-span encoding: explicit psi(k), implicit omega(t-k), none",
               {{"explicit", [](RunConfig& c) {
                   c.model.dropspan_mode = DropspanMode::Explicit;
                   c.model.use_timestep_embedding = true;
                 }},
                {"implicit", [](RunConfig& c) {
                   c.model.dropspan_mode = DropspanMode::Implicit;
                   c.model.use_timestep_embedding = true;
                 }},
                {"none", [](RunConfig& c) {
                   c.model.dropspan_mode = DropspanMode::None;
                   c.model.use_timestep_embedding = true;
                 }}}});
  auto placeholder = [](Placeholder ph, double scale, MaskTokenMode mt) {
    return [=](RunConfig& c) {
      c.train.masking.placeholder = ph;
      c.train.masking.noise_scale = scale;
      c.model.mask_token = mt;
    };
  };
  p.push_back({"placeholder",
               "value substituted at dropped positions during training",
               {{"repeat", placeholder(Placeholder::RepeatLast, 0.1, MaskTokenMode::Off)},
                {"zero", placeholder(Placeholder::Zeros, 0.1, MaskTokenMode::Off)},
                {"noise0.1", placeholder(Placeholder::GaussianNoise, 0.1, MaskTokenMode::Off)},
                {"noise0.5", placeholder(Placeholder::GaussianNoise, 0.5, MaskTokenMode::Off)},
                {"mask-shared", placeholder(Placeholder::LearnableMask, 0.1, MaskTokenMode::Shared)},
                {"mask-separate", placeholder(Placeholder::LearnableMask, 0.1, MaskTokenMode::Separate)}}});
  p.push_back({"mask",
               "drop-mask resampled every update_interval steps vs drawn once",
               {{"resample", [](RunConfig& c) { c.train.fixed_mask = false; }},
                {"fixed", [](RunConfig& c) { c.train.fixed_mask = true; }}}});
  p.push_back({"process",
               "bernoulli vs markov (bursty) drops in training and evaluation",
               {{"bernoulli", [](RunConfig& c) { c.eval.eval_process = DropKind::Bernoulli; }},
                {"markov", [](RunConfig& c) {
                   // Same steady-state rate as the bernoulli default of 0.5.
                   c.train.train_drop = DropProcessConfig::markov(0.1, 0.9);
                   c.eval.eval_process = DropKind::Markov;
                 }}}});
  auto heads = [](bool s, bool r) {
    return [=](RunConfig& c) {
      c.model.predict_state = s;
      c.model.predict_rtg = r;
    };
  };
  p.push_back({"heads",
               "auxiliary next-state / next-rtg prediction heads",
               {{"action", heads(false, false)},
                {"+state", heads(true, false)},
                {"+rtg", heads(false, true)},
                {"+both", heads(true, true)}}});
  auto ft = [](bool on, std::vector<ParamGroup> groups) {
    return [=](RunConfig& c) {
      c.finetune = on;
      if (on) c.train.finetune_groups = groups;
    };
  };
  p.push_back({"finetune",
               "which components the freeze-trunk stage updates",
               {{"none", ft(false, {})},
                {"span", ft(true, {ParamGroup::DropspanEncoder})},
                {"action", ft(true, {ParamGroup::ActionPredictor})},
                {"both", ft(true, {ParamGroup::DropspanEncoder, ParamGroup::ActionPredictor})}}});
  return p;
}

}  // namespace

const std::vector<AblationPreset>& ablation_presets() {
  static const auto presets = build_presets();
  return presets;
}

const AblationPreset& find_ablation(const std::string& family) {
  for (const auto& p : ablation_presets())
    if (p.family == family) return p;
  fail(ErrorKind::Config, "unknown ablation preset '" + family + "'");
}

void apply_ablation(RunConfig& config, const std::string& family, const std::string& variant) {
  for (const auto& v : find_ablation(family).variants) {
    if (v.name == variant) {
      v.apply(config);
      config.label = family + "/" + variant;
      return;
    }
  }
  fail(ErrorKind::Config, "unknown variant '" + variant + "' in ablation preset " + family);
}

}  // namespace defog
