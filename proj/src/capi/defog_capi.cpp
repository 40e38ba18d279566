#include "defog/defog.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <functional>
#include <memory>
#include <sstream>
#include <string>

#include "defog/config.hpp"
#include "defog/errors.hpp"
#include "defog/evaluator.hpp"
#include "defog/plot.hpp"
#include "defog/rng.hpp"
#include "defog/toy_envs.hpp"
#include "defog/trainer.hpp"

struct defog_config {
  defog::RunConfig cfg;
};

struct defog_dataset {
  defog::TrajectoryDataset data;
};

struct defog_agent {
  defog::DeFogNet model{nullptr};
  std::unique_ptr<defog::Trainer> trainer;  // set after defog_train, for checkpoints
};

struct defog_report {
  defog::EvalReport report;
  std::vector<defog::RateSummary> groups;
};

namespace {

thread_local std::string g_last_error;

defog_status status_of(defog::ErrorKind k) {
  using defog::ErrorKind;
  switch (k) {
    case ErrorKind::InvalidInput: return DEFOG_ERR_INVALID_INPUT;
    case ErrorKind::Config: return DEFOG_ERR_CONFIG;
    case ErrorKind::Format: return DEFOG_ERR_FORMAT;
    case ErrorKind::Io: return DEFOG_ERR_IO;
    case ErrorKind::Numerical: return DEFOG_ERR_NUMERICAL;
    case ErrorKind::Protocol: return DEFOG_ERR_PROTOCOL;
    case ErrorKind::InvalidWindow: return DEFOG_ERR_INVALID_WINDOW;
    case ErrorKind::InsufficientData: return DEFOG_ERR_INSUFFICIENT_DATA;
    case ErrorKind::UndefinedSteadyState: return DEFOG_ERR_UNDEFINED_STEADY_STATE;
  }
  return DEFOG_ERR_INTERNAL;
}

template <typename F>
defog_status guard(F&& f) {
  try {
    g_last_error.clear();
    f();
    return DEFOG_OK;
  } catch (const defog::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DEFOG_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown exception";
    return DEFOG_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  defog::require(p != nullptr, defog::ErrorKind::InvalidInput, std::string(what) + " is NULL");
}

std::string str(const char* s) { return s ? std::string(s) : std::string(); }

std::function<void(const defog::LogRecord&)> forward_log(defog_log_fn fn, void* user) {
  if (!fn) return {};
  return [fn, user](const defog::LogRecord& r) { fn(defog::to_json_line(r).c_str(), user); };
}

}  // namespace

extern "C" {

const char* defog_last_error(void) { return g_last_error.c_str(); }

const char* defog_status_name(defog_status s) {
  switch (s) {
    case DEFOG_OK: return "ok";
    case DEFOG_ERR_INVALID_INPUT: return "invalid_input";
    case DEFOG_ERR_CONFIG: return "config";
    case DEFOG_ERR_FORMAT: return "format";
    case DEFOG_ERR_IO: return "io";
    case DEFOG_ERR_NUMERICAL: return "numerical";
    case DEFOG_ERR_PROTOCOL: return "protocol";
    case DEFOG_ERR_INVALID_WINDOW: return "invalid_window";
    case DEFOG_ERR_INSUFFICIENT_DATA: return "insufficient_data";
    case DEFOG_ERR_UNDEFINED_STEADY_STATE: return "undefined_steady_state";
    case DEFOG_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* defog_version(void) { return "0.1.0"; }

defog_status defog_config_default(const char* env, defog_config** out) {
  return guard([&] {
    need(out, "out");
    *out = new defog_config{defog::default_run_config(env ? env : "point-mass")};
  });
}

defog_status defog_config_load(const char* path, defog_config** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new defog_config{defog::load_run_config(path)};
  });
}

defog_status defog_config_save(const defog_config* cfg, const char* path) {
  return guard([&] {
    need(cfg, "cfg");
    need(path, "path");
    defog::save_run_config(cfg->cfg, path);
  });
}

defog_status defog_config_set(defog_config* cfg, const char* key, const char* value) {
  return guard([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    defog::apply_override(cfg->cfg, key, value);
  });
}

defog_status defog_config_get(const defog_config* cfg, const char* key, char* buf, size_t size,
                              size_t* needed) {
  return guard([&] {
    need(cfg, "cfg");
    YAML::Node node = defog::to_yaml(cfg->cfg);
    const auto k = str(key);
    if (!k.empty()) {
      std::stringstream ss(k);
      for (std::string part; std::getline(ss, part, '.');) {
        defog::require(node.IsMap() && node[part], defog::ErrorKind::Config, "unknown config key " + k);
        node = node[part];
      }
    }
    std::string text;
    if (node.IsScalar()) {
      text = node.as<std::string>();
    } else {
      text = defog::dump_yaml(node);
    }
    if (needed) *needed = text.size() + 1;
    if (buf && size > 0) {
      const auto n = std::min(size - 1, text.size());
      std::memcpy(buf, text.data(), n);
      buf[n] = '\0';
    }
  });
}

defog_status defog_config_validate(const defog_config* cfg) {
  return guard([&] {
    need(cfg, "cfg");
    cfg->cfg.validate();
  });
}

defog_status defog_config_make_vanilla_dt(defog_config* cfg) {
  return guard([&] {
    need(cfg, "cfg");
    defog::make_vanilla_dt(cfg->cfg);
  });
}

defog_status defog_config_clone(const defog_config* cfg, defog_config** out) {
  return guard([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = new defog_config{cfg->cfg};
  });
}

void defog_config_free(defog_config* cfg) { delete cfg; }

size_t defog_ablation_family_count(void) { return defog::ablation_presets().size(); }

const char* defog_ablation_family(size_t index) {
  const auto& p = defog::ablation_presets();
  return index < p.size() ? p[index].family.c_str() : nullptr;
}

const char* defog_ablation_description(const char* family) {
  for (const auto& p : defog::ablation_presets())
    if (family && p.family == family) return p.description.c_str();
  return nullptr;
}

size_t defog_ablation_variant_count(const char* family) {
  for (const auto& p : defog::ablation_presets())
    if (family && p.family == family) return p.variants.size();
  return 0;
}

const char* defog_ablation_variant(const char* family, size_t index) {
  for (const auto& p : defog::ablation_presets())
    if (family && p.family == family && index < p.variants.size()) return p.variants[index].name.c_str();
  return nullptr;
}

defog_status defog_config_apply_ablation(defog_config* cfg, const char* family, const char* variant) {
  return guard([&] {
    need(cfg, "cfg");
    need(family, "family");
    need(variant, "variant");
    defog::apply_ablation(cfg->cfg, family, variant);
  });
}

defog_status defog_dataset_generate(const char* env, const char* tier, int64_t n, uint64_t seed,
                                    defog_dataset** out) {
  return guard([&] {
    need(env, "env");
    need(tier, "tier");
    need(out, "out");
    defog::require(n >= 1, defog::ErrorKind::InvalidInput, "n_transitions must be >= 1");
    *out = new defog_dataset{
        defog::generate_dataset(env, defog::tier_from_string(tier), static_cast<std::size_t>(n), seed)};
  });
}

defog_status defog_dataset_load(const char* path, defog_dataset** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new defog_dataset{defog::load_dataset(path)};
  });
}

defog_status defog_dataset_save(const defog_dataset* ds, const char* path) {
  return guard([&] {
    need(ds, "ds");
    need(path, "path");
    defog::save_dataset(ds->data, path);
  });
}

defog_status defog_dataset_stats_get(const defog_dataset* ds, defog_dataset_stats* out) {
  return guard([&] {
    need(ds, "ds");
    need(out, "out");
    const auto& d = ds->data;
    const auto rets = d.trajectory_returns();
    *out = {};
    out->n_transitions = static_cast<int64_t>(d.size());
    out->n_trajectories = static_cast<int64_t>(d.n_trajectories());
    out->state_dim = d.state_dim;
    out->action_dim = d.action_dim;
    out->discrete_actions = d.discrete_actions ? 1 : 0;
    out->target_return = d.target_return;
    if (!rets.empty()) {
      double sum = 0.0;
      out->min_return = rets.front();
      out->max_return = rets.front();
      for (double r : rets) {
        sum += r;
        out->min_return = std::min(out->min_return, r);
        out->max_return = std::max(out->max_return, r);
      }
      out->mean_return = sum / static_cast<double>(rets.size());
    }
  });
}

void defog_dataset_free(defog_dataset* ds) { delete ds; }

defog_status defog_train(const defog_config* cfg, const defog_dataset* ds, const char* log_path,
                         const char* checkpoint_path, defog_log_fn log_fn, void* user,
                         defog_agent** out) {
  return guard([&] {
    need(cfg, "cfg");
    need(ds, "ds");
    need(out, "out");
    cfg->cfg.validate();
    auto tc = cfg->cfg.train;
    tc.seed = cfg->cfg.seed;
    auto model = defog::make_model(cfg->cfg.model, ds->data, cfg->cfg.seed);
    auto agent = std::make_unique<defog_agent>();
    agent->trainer = std::make_unique<defog::Trainer>(model, ds->data, tc, defog::Stage::Main);
    if (log_path && *log_path) agent->trainer->set_log_file(log_path);
    agent->trainer->set_log_callback(forward_log(log_fn, user));
    agent->trainer->run();
    if (checkpoint_path && *checkpoint_path) agent->trainer->save_checkpoint(checkpoint_path);
    agent->model = agent->trainer->model();
    agent->trainer.reset();
    *out = agent.release();
  });
}

defog_status defog_finetune(defog_agent* agent, const defog_config* cfg, const defog_dataset* ds,
                            const char* log_path, defog_log_fn log_fn, void* user) {
  return guard([&] {
    need(agent, "agent");
    need(cfg, "cfg");
    need(ds, "ds");
    auto tc = cfg->cfg.train;
    tc.seed = cfg->cfg.seed;
    defog::Trainer t(agent->model, ds->data, tc, defog::Stage::Finetune);
    if (log_path && *log_path) t.set_log_file(log_path);
    t.set_log_callback(forward_log(log_fn, user));
    t.run();
    for (auto& p : agent->model->parameters(true)) p.set_requires_grad(true);
  });
}

defog_status defog_agent_save(const defog_agent* agent, const char* path) {
  return guard([&] {
    need(agent, "agent");
    need(path, "path");
    defog::save_model(agent->model, path);
  });
}

defog_status defog_agent_load(const char* path, defog_agent** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    auto agent = std::make_unique<defog_agent>();
    agent->model = defog::load_model(path);
    *out = agent.release();
  });
}

defog_status defog_agent_checksum(const defog_agent* agent, uint64_t* out) {
  return guard([&] {
    need(agent, "agent");
    need(out, "out");
    *out = defog::model_checksum(agent->model);
  });
}

void defog_agent_free(defog_agent* agent) { delete agent; }

defog_status defog_sweep(defog_agent* agent, const defog_config* cfg, const char* label,
                         defog_report** out) {
  return guard([&] {
    need(agent, "agent");
    need(cfg, "cfg");
    need(out, "out");
    auto r = std::make_unique<defog_report>();
    r->report = defog::sweep(agent->model, cfg->cfg.env, cfg->cfg.eval,
                             label ? label : cfg->cfg.label);
    r->groups = r->report.summary();
    *out = r.release();
  });
}

defog_status defog_report_merge(defog_report* into, const defog_report* other) {
  return guard([&] {
    need(into, "into");
    need(other, "other");
    into->report.merge(other->report);
    into->groups = into->report.summary();
  });
}

defog_status defog_report_emit(const defog_report* report, const char* prefix, int plot) {
  return guard([&] {
    need(report, "report");
    need(prefix, "prefix");
    defog::emit_report(report->report, prefix, plot != 0);
  });
}

defog_status defog_report_load(const char* path, defog_report** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    auto r = std::make_unique<defog_report>();
    r->report = defog::read_trials_csv(path);
    r->groups = r->report.summary();
    *out = r.release();
  });
}

size_t defog_report_group_count(const defog_report* report) {
  return report ? report->groups.size() : 0;
}

defog_status defog_report_group(const defog_report* report, size_t index, const char** label,
                                defog_rate_summary* out) {
  return guard([&] {
    need(report, "report");
    need(out, "out");
    defog::require(index < report->groups.size(), defog::ErrorKind::InvalidInput,
                   "report group index out of range");
    const auto& g = report->groups[index];
    if (label) *label = g.label.c_str();
    *out = {g.drop_rate, g.n, g.mean, g.std, g.min, g.max, g.mean_length};
  });
}

void defog_report_free(defog_report* report) { delete report; }

defog_status defog_plot_reports(const char* const* trials_csvs, size_t count, const char* out_png,
                                const char* title) {
  return guard([&] {
    need(trials_csvs, "trials_csvs");
    need(out_png, "out_png");
    defog::require(count >= 1, defog::ErrorKind::InvalidInput, "plot needs at least one report");
    defog::EvalReport all;
    for (size_t i = 0; i < count; ++i) {
      need(trials_csvs[i], "trials_csvs[i]");
      all.merge(defog::read_trials_csv(trials_csvs[i]));
    }
    defog::PlotSpec spec;
    spec.title = title ? title : "mean return vs test-time drop rate";
    spec.xlabel = "drop rate";
    spec.ylabel = "return";
    const auto summary = all.summary();
    for (const auto& label : all.labels()) {
      defog::Series s;
      s.label = label;
      s.points = true;
      for (const auto& g : summary) {
        if (g.label != label) continue;
        s.x.push_back(g.drop_rate);
        s.y.push_back(g.mean);
        s.band.push_back(g.std);
      }
      spec.series.push_back(std::move(s));
    }
    defog::render_plot(spec, out_png);
  });
}

defog_status defog_rollout(defog_agent* agent, const defog_config* cfg, double drop_rate,
                           uint64_t seed, const char* trace_jsonl, const char* trace_png, double* ret,
                           int64_t* length) {
  return guard([&] {
    need(agent, "agent");
    need(cfg, "cfg");
    const auto& c = cfg->cfg;
    const auto spec = defog::env_spec(c.env);
    const double target = std::isnan(c.eval.target_return) ? spec.default_target_return : c.eval.target_return;
    const int max_steps = c.eval.max_steps > 0 ? c.eval.max_steps : spec.max_episode_steps;
    const auto ts = defog::trial_seed(seed, drop_rate, 0);
    auto env = defog::wrap_env(defog::make_env(c.env), defog::DropProcessConfig::bernoulli(drop_rate), ts);
    std::mt19937_64 rng(defog::splitmix64(ts));
    agent->model->eval();
    const auto r = defog::rollout(agent->model, *env, target, max_steps, rng, c.eval.act_mode, true);
    if (trace_jsonl && *trace_jsonl) defog::write_trace_jsonl(r.trace, trace_jsonl);
    if (trace_png && *trace_png) defog::visualize_trace(r.trace, trace_png);
    if (ret) *ret = r.ret;
    if (length) *length = r.length;
  });
}

}  // extern "C"
