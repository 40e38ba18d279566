#include "defog/trainer.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>
#include <unordered_set>

#include "defog/archive.hpp"
#include "defog/config.hpp"
#include "defog/errors.hpp"
#include "defog/rng.hpp"

namespace defog {

namespace {

constexpr int kCheckpointSchemaVersion = 1;

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<float> to_f32(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  return {c.data_ptr<float>(), c.data_ptr<float>() + c.numel()};
}

void copy_into(torch::Tensor& dst, const std::vector<float>& src, const std::string& name) {
  require(static_cast<std::int64_t>(src.size()) == dst.numel(), ErrorKind::Config,
          "checkpoint array '" + name + "' has " + std::to_string(src.size()) +
              " values, model expects " + std::to_string(dst.numel()));
  torch::NoGradGuard no_grad;
  auto t = torch::from_blob(const_cast<float*>(src.data()), dst.sizes(), torch::kFloat32);
  dst.copy_(t);
}

std::vector<std::uint8_t> string_bytes(const std::string& s) { return {s.begin(), s.end()}; }
std::string bytes_string(const std::vector<std::uint8_t>& b) { return {b.begin(), b.end()}; }

void put_model(Archive& a, const DeFogNet& model) {
  for (const auto& p : model->named_parameters(true)) a.put_f32("param/" + p.key(), to_f32(p.value()));
  for (const auto& b : model->named_buffers(true)) a.put_f32("buffer/" + b.key(), to_f32(b.value()));
}

void get_model(const Archive& a, DeFogNet& model) {
  for (auto& p : model->named_parameters(true)) {
    const auto name = "param/" + p.key();
    require(a.has(name), ErrorKind::Format, "checkpoint is missing parameter " + p.key());
    copy_into(p.value(), a.get_f32(name), name);
  }
  for (auto& b : model->named_buffers(true)) {
    const auto name = "buffer/" + b.key();
    require(a.has(name), ErrorKind::Format, "checkpoint is missing buffer " + b.key());
    copy_into(b.value(), a.get_f32(name), name);
  }
}

YAML::Node read_manifest(const Archive& a) {
  YAML::Node m;
  try {
    m = YAML::Load(a.manifest);
  } catch (const YAML::Exception& e) {
    fail(ErrorKind::Format, std::string("checkpoint manifest is not valid YAML: ") + e.what());
  }
  require(m["kind"] && m["kind"].as<std::string>() == "defog_checkpoint", ErrorKind::Format,
          "not a checkpoint file");
  const int version = m["schema_version"].as<int>();
  require(version == kCheckpointSchemaVersion, ErrorKind::Format,
          "checkpoint schema_version " + std::to_string(version) + " is not supported (expected " +
              std::to_string(kCheckpointSchemaVersion) + ")");
  return m;
}

void describe_mismatch(const ModelConfig& stored, const ModelConfig& expected) {
  if (stored == expected) return;
  std::ostringstream os;
  os << "checkpoint model config differs from the requested one:";
  auto field = [&](const char* name, auto a, auto b) {
    if (a != b) os << ' ' << name << " (" << a << " vs " << b << ')';
  };
  field("state_dim", stored.state_dim, expected.state_dim);
  field("action_dim", stored.action_dim, expected.action_dim);
  field("n_actions", stored.n_actions, expected.n_actions);
  field("n_layers", stored.n_layers, expected.n_layers);
  field("n_heads", stored.n_heads, expected.n_heads);
  field("embed_dim", stored.embed_dim, expected.embed_dim);
  field("context", stored.context, expected.context);
  field("dropspan_mode", to_string(stored.dropspan_mode), to_string(expected.dropspan_mode));
  field("mask_token", to_string(stored.mask_token), to_string(expected.mask_token));
  field("use_timestep_embedding", stored.use_timestep_embedding, expected.use_timestep_embedding);
  field("predict_state", stored.predict_state, expected.predict_state);
  field("predict_rtg", stored.predict_rtg, expected.predict_rtg);
  fail(ErrorKind::Config, os.str());
}

void check_dims(const ModelConfig& m, const TrajectoryDataset& d) {
  require(m.state_dim == d.state_dim, ErrorKind::Config,
          "model state_dim " + std::to_string(m.state_dim) + " does not match dataset state_dim " +
              std::to_string(d.state_dim));
  require(m.action_dim == d.action_dim, ErrorKind::Config,
          "model action_dim " + std::to_string(m.action_dim) +
              " does not match dataset action_dim " + std::to_string(d.action_dim));
  require((m.action_head == ActionHead::Categorical) == d.discrete_actions, ErrorKind::Config,
          "model action head does not match the dataset's action type");
}

}  // namespace

TrainConfig TrainConfig::continuous_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::discrete_defaults() {
  TrainConfig c;
  c.learning_rate = 6e-4;
  c.weight_decay = 0.1;
  c.batch_size = 128;
  c.grad_clip_norm = 1.0;
  c.update_interval = 1000;
  return c;
}

void TrainConfig::scale_to(std::int64_t total) {
  total_steps = total;
  finetune_steps = total / 5;
  warmup_steps = total / 10;
}

void TrainConfig::validate() const {
  require(learning_rate > 0.0, ErrorKind::Config, "learning_rate must be positive");
  require(weight_decay >= 0.0, ErrorKind::Config, "weight_decay must be >= 0");
  require(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
  require(total_steps >= 1, ErrorKind::Config, "total_steps must be >= 1");
  require(finetune_steps >= 0 && finetune_steps <= total_steps, ErrorKind::Config,
          "finetune_steps must be in [0, total_steps]");
  require(warmup_steps >= 0 && warmup_steps < total_steps, ErrorKind::Config,
          "warmup_steps must be in [0, total_steps)");
  require(grad_clip_norm > 0.0, ErrorKind::Config, "grad_clip_norm must be positive");
  require(update_interval >= 1, ErrorKind::Config, "update_interval must be >= 1");
  train_drop.validate();
  finetune_drop.validate();
  std::set<ParamGroup> seen;
  for (auto g : finetune_groups) {
    require(g == ParamGroup::DropspanEncoder || g == ParamGroup::ActionPredictor, ErrorKind::Config,
            std::string("finetune group '") + to_string(g) +
                "' is not tunable; choose from dropspan_encoder, action_predictor");
    require(seen.insert(g).second, ErrorKind::Config, "duplicate finetune group");
  }
}

const char* to_string(Stage s) noexcept { return s == Stage::Main ? "main" : "finetune"; }

Stage stage_from_string(const std::string& s) {
  if (s == "main") return Stage::Main;
  if (s == "finetune") return Stage::Finetune;
  fail(ErrorKind::Format, "unknown stage '" + s + "'");
}

std::string to_json_line(const LogRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["stage"] = to_string(r.stage);
  j["loss"] = std::isfinite(r.loss) ? nlohmann::json(r.loss) : nlohmann::json(nullptr);
  j["action_nll"] = std::isfinite(r.action_nll) ? nlohmann::json(r.action_nll) : nlohmann::json(nullptr);
  j["lr"] = r.lr;
  j["p_d"] = r.p_d;
  j["grad_norm"] = std::isfinite(r.grad_norm) ? nlohmann::json(r.grad_norm) : nlohmann::json(nullptr);
  j["grad_norm_clipped"] = r.grad_norm_clipped;
  j["wall_time"] = r.wall_time;
  j["mask_resampled"] = r.mask_resampled;
  if (r.mask_resampled) j["mask_drop_fraction"] = r.mask_drop_fraction;
  if (r.skipped) j["skipped"] = true;
  return j.dump();
}

double warmup_lr(double lr, std::int64_t step, std::int64_t warmup) {
  if (warmup <= 0) return lr;
  return lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

std::pair<std::vector<double>, std::vector<double>> state_moments(const TrajectoryDataset& data) {
  const auto n = data.size();
  const auto sd = static_cast<std::size_t>(data.state_dim);
  std::vector<double> mean(sd, 0.0), var(sd, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < sd; ++j) mean[j] += data.states[i * sd + j];
  for (auto& m : mean) m /= static_cast<double>(std::max<std::size_t>(n, 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < sd; ++j) {
      const double d = data.states[i * sd + j] - mean[j];
      var[j] += d * d;
    }
  for (auto& v : var) v = std::sqrt(v / static_cast<double>(std::max<std::size_t>(n, 1)));
  return {mean, var};
}

DeFogNet make_model(ModelConfig config, const TrajectoryDataset& dataset, std::uint64_t seed) {
  config.state_dim = dataset.state_dim;
  config.action_dim = dataset.action_dim;
  config.n_actions = dataset.n_actions;
  config.action_head = dataset.discrete_actions ? ActionHead::Categorical : ActionHead::Gaussian;
  config.init_seed = SeedTree(seed).derive("init");
  DeFogNet model(config);
  auto [mean, std] = state_moments(dataset);
  model->set_normalizer(mean, std);
  return model;
}

Trainer::Trainer(DeFogNet model, const TrajectoryDataset& dataset, TrainConfig config, Stage stage)
    : model_(std::move(model)),
      data_(&dataset),
      config_(std::move(config)),
      stage_(stage),
      view_(dataset, config_.masking) {
  config_.validate();
  check_dims(model_->config(), dataset);
  require(config_.masking.placeholder != Placeholder::LearnableMask ||
              model_->config().mask_token != MaskTokenMode::Off,
          ErrorKind::Config, "learnable_mask placeholder needs a model with mask_token enabled");
  require(model_->config().context <= dataset.max_trajectory_length(), ErrorKind::Config,
          "context length exceeds the longest trajectory in the dataset");
  torch::set_num_threads(1);

  if (stage_ == Stage::Main) {
    steps_ = config_.total_steps;
    warmup_ = config_.warmup_steps;
    interval_ = config_.update_interval;
  } else {
    require(!config_.finetune_groups.empty(), ErrorKind::Config,
            "finetune needs at least one of dropspan_encoder, action_predictor");
    steps_ = config_.finetune_steps;
    warmup_ = config_.finetune_steps / 10;
    interval_ = config_.short_finetune_interval
                    ? std::max<std::int64_t>(1, config_.update_interval / 5)
                    : config_.update_interval;
  }
  init_streams();
  build_optimizer();
  started_ = std::chrono::steady_clock::now();
}

void Trainer::init_streams() {
  const auto tree = SeedTree(config_.seed).child(to_string(stage_));
  mask_rng_ = tree.engine("mask");
  batch_rng_ = tree.engine("batch");
  noise_rng_ = tree.engine("noise");
  model_->seed_dropout(tree.derive("dropout"));
}

void Trainer::build_optimizer() {
  std::unordered_set<const void*> decay;
  for (const auto& m : model_->modules(false)) {
    if (auto* lin = m->as<torch::nn::LinearImpl>()) decay.insert(lin->weight.unsafeGetTensorImpl());
  }

  std::set<ParamGroup> selected;
  if (stage_ == Stage::Main) {
    selected = {ParamGroup::Trunk, ParamGroup::DropspanEncoder, ParamGroup::ActionPredictor,
                ParamGroup::OtherHeads};
  } else {
    selected.insert(config_.finetune_groups.begin(), config_.finetune_groups.end());
  }

  std::vector<torch::Tensor> with_decay, without_decay;
  trainable_.clear();
  for (auto& [group, params] : model_->parameter_groups()) {
    const bool on = selected.count(group) != 0;
    for (auto& [name, p] : params) {
      p.set_requires_grad(on);
      if (!on) continue;
      trainable_.push_back(name);
      (decay.count(p.unsafeGetTensorImpl()) ? with_decay : without_decay).push_back(p);
    }
  }
  if (stage_ == Stage::Finetune) {
    require(!trainable_.empty(), ErrorKind::Config,
            "finetune selection has no parameters to tune (drop-span encoder absent and no "
            "action head parameters selected)");
  }

  std::vector<torch::optim::OptimizerParamGroup> groups;
  auto opts = [&](double wd) {
    auto o = std::make_unique<torch::optim::AdamWOptions>(config_.learning_rate);
    o->weight_decay(wd);
    return o;
  };
  groups.emplace_back(with_decay, opts(config_.weight_decay));
  groups.emplace_back(without_decay, opts(0.0));
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      groups, torch::optim::AdamWOptions(config_.learning_rate).weight_decay(config_.weight_decay));
}

void Trainer::set_log_file(const std::string& path) {
  log_path_ = path;
  std::ofstream f(path, std::ios::app);
  require(f.good(), ErrorKind::Io, "cannot open training log " + path);
}

LogRecord Trainer::step() {
  require(!done(), ErrorKind::Protocol, "training stage already finished");
  LogRecord rec;
  rec.step = step_;
  rec.stage = stage_;
  const double progress = steps_ > 0 ? static_cast<double>(step_) / static_cast<double>(steps_) : 0.0;
  rec.p_d = drop_config().rate_at(progress);

  const bool resample = config_.fixed_mask ? step_ == 0 : step_ % interval_ == 0;
  if (resample) {
    const auto& m = resample_mask(view_, drop_config(), mask_rng_, progress);
    rec.mask_resampled = true;
    rec.mask_drop_fraction = m.drop_fraction();
  }

  rec.lr = warmup_lr(config_.learning_rate, step_, warmup_);
  for (auto& g : optimizer_->param_groups()) {
    static_cast<torch::optim::AdamWOptions&>(g.options()).lr(rec.lr);
  }

  const auto batch = sample_batch(view_, config_.batch_size, model_->config().context, batch_rng_,
                                  noise_rng_);
  model_->train();
  const auto tensors = model_->to_tensors(batch);
  optimizer_->zero_grad();
  try {
    const auto out = model_->forward(tensors);
    auto loss = model_->loss(tensors, out);
    rec.loss = loss.total.item<double>();
    rec.action_nll = loss.action_nll;
    rec.nll_per_dim = loss.nll_per_dim;
    loss.total.backward();

    std::vector<torch::Tensor> params;
    for (auto& g : optimizer_->param_groups())
      for (auto& p : g.params()) params.push_back(p);
    rec.grad_norm = torch::nn::utils::clip_grad_norm_(params, config_.grad_clip_norm);
    if (!std::isfinite(rec.grad_norm)) {
      fail(ErrorKind::Numerical, "non-finite gradient norm at step " + std::to_string(step_));
    }
    double sq = 0.0;
    for (auto& p : params) {
      if (p.grad().defined()) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
    }
    rec.grad_norm_clipped = std::sqrt(sq);
    optimizer_->step();
    nonfinite_run_ = 0;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Numerical) throw;
    optimizer_->zero_grad();
    rec.skipped = true;
    rec.loss = std::numeric_limits<double>::quiet_NaN();
    if (++nonfinite_run_ >= 3) {
      fail(ErrorKind::Numerical, std::string("aborting: 3 consecutive non-finite steps (stage ") +
                                     to_string(stage_) + ", step " + std::to_string(step_) +
                                     ", lr " + std::to_string(rec.lr) + "); last: " + e.what());
    }
  }

  rec.wall_time = wall_offset_ + std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  ++step_;
  log_.push_back(rec);
  if (!log_path_.empty()) {
    std::ofstream f(log_path_, std::ios::app);
    f << to_json_line(rec) << '\n';
  }
  if (callback_) callback_(rec);
  return rec;
}

void Trainer::run(std::int64_t until) {
  const auto end = until < 0 ? steps_ : std::min(until, steps_);
  while (step_ < end) step();
}

void Trainer::save_checkpoint(const std::string& path) const {
  Archive a;
  YAML::Emitter out;
  YAML::Node m;
  m["kind"] = "defog_checkpoint";
  m["schema_version"] = kCheckpointSchemaVersion;
  m["stage"] = to_string(stage_);
  m["step"] = step_;
  m["nonfinite_run"] = nonfinite_run_;
  m["wall_time"] = log_.empty() ? wall_offset_ : log_.back().wall_time;
  m["model"] = to_yaml(model_->config());
  m["train"] = to_yaml(config_);
  YAML::Node ds;
  ds["env"] = data_->env_name;
  ds["tier"] = data_->tier;
  ds["n_transitions"] = static_cast<std::int64_t>(data_->size());
  m["dataset"] = ds;
  m["rng_streams"] = std::vector<std::string>{"mask", "batch", "noise", "dropout"};
  a.manifest = dump_yaml(m);

  put_model(a, model_);
  for (const auto& p : model_->named_parameters(true)) {
    auto it = optimizer_->state().find(p.value().unsafeGetTensorImpl());
    if (it == optimizer_->state().end()) continue;
    const auto& st = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    a.put_f32("adam/" + p.key() + "/exp_avg", to_f32(st.exp_avg()));
    a.put_f32("adam/" + p.key() + "/exp_avg_sq", to_f32(st.exp_avg_sq()));
    const std::int64_t s = st.step();
    a.put_i64("adam/" + p.key() + "/step", std::span<const std::int64_t>(&s, 1));
  }
  a.put_u8("rng/mask", string_bytes(engine_state(mask_rng_)));
  a.put_u8("rng/batch", string_bytes(engine_state(batch_rng_)));
  a.put_u8("rng/noise", string_bytes(engine_state(noise_rng_)));
  a.put_u8("rng/dropout", string_bytes(engine_state(model_->dropout_rng())));
  a.put_u8("mask/dropped", view_.mask().dropped);
  a.put_i32("mask/drop_spans", view_.mask().drop_spans);
  a.save(path);
}

std::unique_ptr<Trainer> Trainer::restore(const std::string& path, const TrajectoryDataset& dataset) {
  const auto a = Archive::load(path);
  const auto m = read_manifest(a);
  require(m["train"].IsDefined() && m["step"].IsDefined(), ErrorKind::Format,
          "checkpoint has no trainer state; it can only be loaded as a model");
  const auto mc = model_config_from_yaml(m["model"]);
  const auto tc = train_config_from_yaml(m["train"]);
  check_dims(mc, dataset);
  require(m["dataset"]["n_transitions"].as<std::int64_t>() == static_cast<std::int64_t>(dataset.size()),
          ErrorKind::Config, "checkpoint was trained on a dataset of a different size");

  DeFogNet model(mc);
  get_model(a, model);
  auto t = std::make_unique<Trainer>(model, dataset, tc, stage_from_string(m["stage"].as<std::string>()));
  t->step_ = m["step"].as<std::int64_t>();
  t->nonfinite_run_ = m["nonfinite_run"].as<int>();
  t->wall_offset_ = m["wall_time"].as<double>();

  for (const auto& p : t->model_->named_parameters(true)) {
    const auto key = "adam/" + p.key();
    if (!a.has(key + "/step")) continue;
    auto st = std::make_unique<torch::optim::AdamWParamState>();
    st->step(a.get_i64(key + "/step").at(0));
    auto ea = torch::zeros_like(p.value());
    auto eq = torch::zeros_like(p.value());
    copy_into(ea, a.get_f32(key + "/exp_avg"), key);
    copy_into(eq, a.get_f32(key + "/exp_avg_sq"), key);
    st->exp_avg(ea);
    st->exp_avg_sq(eq);
    t->optimizer_->state()[p.value().unsafeGetTensorImpl()] = std::move(st);
  }
  restore_engine_state(t->mask_rng_, bytes_string(a.get_u8("rng/mask")));
  restore_engine_state(t->batch_rng_, bytes_string(a.get_u8("rng/batch")));
  restore_engine_state(t->noise_rng_, bytes_string(a.get_u8("rng/noise")));
  restore_engine_state(t->model_->dropout_rng(), bytes_string(a.get_u8("rng/dropout")));
  DropMask mask;
  mask.dropped = a.get_u8("mask/dropped");
  mask.drop_spans = a.get_i32("mask/drop_spans");
  t->view_.set_mask(std::move(mask));
  t->started_ = std::chrono::steady_clock::now();
  return t;
}

DeFogNet train(DeFogNet model, const TrajectoryDataset& dataset, const TrainConfig& config,
               std::vector<LogRecord>* log, const std::string& log_path) {
  Trainer t(std::move(model), dataset, config, Stage::Main);
  if (!log_path.empty()) t.set_log_file(log_path);
  t.run();
  if (log) *log = t.log();
  return t.model();
}

DeFogNet freeze_trunk_finetune(DeFogNet model, const TrajectoryDataset& dataset,
                               const TrainConfig& config, std::vector<LogRecord>* log,
                               const std::string& log_path) {
  Trainer t(std::move(model), dataset, config, Stage::Finetune);
  if (!log_path.empty()) t.set_log_file(log_path);
  t.run();
  if (log) *log = t.log();
  auto out = t.model();
  for (auto& p : out->parameters(true)) p.set_requires_grad(true);
  return out;
}

DeFogNet finetune_component_selection(DeFogNet model, const TrajectoryDataset& dataset,
                                      TrainConfig config, const std::vector<ParamGroup>& groups,
                                      std::vector<LogRecord>* log) {
  require(!groups.empty(), ErrorKind::Config, "finetune component selection is empty");
  config.finetune_groups = groups;
  return freeze_trunk_finetune(std::move(model), dataset, config, log);
}

void save_model(const DeFogNet& model, const std::string& path) {
  Archive a;
  YAML::Node m;
  m["kind"] = "defog_checkpoint";
  m["schema_version"] = kCheckpointSchemaVersion;
  m["model"] = to_yaml(model->config());
  a.manifest = dump_yaml(m);
  put_model(a, model);
  a.save(path);
}

DeFogNet load_model(const std::string& path) {
  const auto a = Archive::load(path);
  const auto m = read_manifest(a);
  DeFogNet model(model_config_from_yaml(m["model"]));
  get_model(a, model);
  model->eval();
  return model;
}

DeFogNet load_model(const std::string& path, const ModelConfig& expected) {
  const auto a = Archive::load(path);
  const auto m = read_manifest(a);
  const auto stored = model_config_from_yaml(m["model"]);
  describe_mismatch(stored, expected);
  DeFogNet model(stored);
  get_model(a, model);
  model->eval();
  return model;
}

std::uint64_t params_checksum(const NamedParams& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, p] : params) {
    h = fnv1a(name.data(), name.size(), h);
    auto c = p.detach().contiguous();
    h = fnv1a(c.data_ptr(), static_cast<std::size_t>(c.numel()) * c.element_size(), h);
  }
  return h;
}

std::uint64_t model_checksum(const DeFogNet& model) {
  NamedParams all;
  for (const auto& p : model->named_parameters(true)) all.emplace_back(p.key(), p.value());
  for (const auto& b : model->named_buffers(true)) all.emplace_back(b.key(), b.value());
  return params_checksum(all);
}

}  // namespace defog
