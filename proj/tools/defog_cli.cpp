// Command-line driver over the defog C API.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "defog/defog.h"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kRuntime = 2, kNumerical = 3 };

struct Failure {
  defog_status status;
  std::string message;
};

void check(defog_status s) {
  if (s != DEFOG_OK) throw Failure{s, defog_last_error()};
}

int exit_code(defog_status s) {
  switch (s) {
    case DEFOG_ERR_INVALID_INPUT:
    case DEFOG_ERR_CONFIG:
      return kUsage;
    case DEFOG_ERR_NUMERICAL:
      return kNumerical;
    default:
      return kRuntime;
  }
}

struct ConfigDeleter {
  void operator()(defog_config* p) const { defog_config_free(p); }
};
struct DatasetDeleter {
  void operator()(defog_dataset* p) const { defog_dataset_free(p); }
};
struct AgentDeleter {
  void operator()(defog_agent* p) const { defog_agent_free(p); }
};
struct ReportDeleter {
  void operator()(defog_report* p) const { defog_report_free(p); }
};
using ConfigPtr = std::unique_ptr<defog_config, ConfigDeleter>;
using DatasetPtr = std::unique_ptr<defog_dataset, DatasetDeleter>;
using AgentPtr = std::unique_ptr<defog_agent, AgentDeleter>;
using ReportPtr = std::unique_ptr<defog_report, ReportDeleter>;

struct Globals {
  std::string workdir = ".";
  bool quiet = false;
  int log_every = 100;
};
Globals g;

std::string resolve(const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(g.workdir) / p).lexically_normal().string();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{DEFOG_ERR_IO, "cannot create directory " + dir + ": " + ec.message()};
}

std::string get(const defog_config* cfg, const std::string& key) {
  size_t needed = 0;
  check(defog_config_get(cfg, key.c_str(), nullptr, 0, &needed));
  std::string out(needed, '\0');
  check(defog_config_get(cfg, key.c_str(), out.data(), out.size(), &needed));
  out.resize(needed - 1);
  return out;
}

void set(defog_config* cfg, const std::string& key, const std::string& value) {
  check(defog_config_set(cfg, key.c_str(), value.c_str()));
}

// Options shared by every config-driven command.
struct ConfigArgs {
  std::string config_path;
  std::string env;
  std::vector<std::string> overrides;
  std::string seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "YAML run config");
    cmd->add_option("--env", env, "environment (resets to its defaults)");
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("-s,--set", overrides, "override, key=value (dotted key)")->take_all();
  }

  // File (or fallback) first, then --env, --seed and --set in that order.
  ConfigPtr build(const std::string& fallback = "") const {
    defog_config* raw = nullptr;
    const auto path = !config_path.empty() ? resolve(config_path) : fallback;
    if (!path.empty()) {
      check(defog_config_load(path.c_str(), &raw));
    } else {
      check(defog_config_default(env.empty() ? "point-mass" : env.c_str(), &raw));
    }
    ConfigPtr cfg(raw);
    if (!env.empty() && !path.empty()) set(cfg.get(), "env", env);
    if (!seed.empty()) set(cfg.get(), "seed", seed);
    apply_overrides(cfg.get());
    return cfg;
  }

  void apply_overrides(defog_config* cfg) const {
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0)
        throw Failure{DEFOG_ERR_CONFIG, "override '" + kv + "' is not key=value"};
      set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
  }
};

// Trainer seeds follow the top-level seed so the frozen file has one truth.
void finalize(defog_config* cfg) {
  set(cfg, "train.seed", get(cfg, "seed"));
  check(defog_config_validate(cfg));
}

void freeze(const defog_config* cfg, const std::string& path) {
  check(defog_config_save(cfg, path.c_str()));
  if (!g.quiet) std::cerr << "config: " << path << "\n";
}

// "0,0.5,0.9" -> "[0,0.5,0.9]" for a YAML override.
std::string yaml_list(const std::string& csv) {
  std::string out = "[";
  std::stringstream ss(csv);
  bool first = true;
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    out += (first ? "" : ",") + item;
    first = false;
  }
  if (first) throw Failure{DEFOG_ERR_CONFIG, "empty list '" + csv + "'"};
  return out + "]";
}

void print_stats(const defog_dataset* ds) {
  defog_dataset_stats st{};
  check(defog_dataset_stats_get(ds, &st));
  std::printf("transitions %lld  trajectories %lld  state_dim %d  action_dim %d%s\n",
              static_cast<long long>(st.n_transitions), static_cast<long long>(st.n_trajectories),
              st.state_dim, st.action_dim, st.discrete_actions ? " (discrete)" : "");
  std::printf("return mean %.4f  min %.4f  max %.4f  target %.4f\n", st.mean_return, st.min_return,
              st.max_return, st.target_return);
}

DatasetPtr dataset_for(const defog_config* cfg, const std::string& data_path) {
  defog_dataset* raw = nullptr;
  auto path = data_path.empty() ? get(cfg, "dataset") : data_path;
  if (!path.empty()) {
    path = resolve(path);
    if (!fs::exists(path)) throw Failure{DEFOG_ERR_IO, "dataset not found: " + path};
    check(defog_dataset_load(path.c_str(), &raw));
  } else {
    const auto env = get(cfg, "env");
    const auto tier = get(cfg, "tier");
    const auto n = std::stoll(get(cfg, "n_transitions"));
    const auto seed = std::stoull(get(cfg, "seed"));
    if (!g.quiet) std::cerr << "generating " << n << " " << tier << " transitions for " << env << "\n";
    check(defog_dataset_generate(env.c_str(), tier.c_str(), n, seed, &raw));
  }
  return DatasetPtr(raw);
}

void on_log(const char* line, void* user) {
  auto* count = static_cast<long*>(user);
  if (!g.quiet && g.log_every > 0 && (*count)++ % g.log_every == 0) std::cerr << line << "\n";
}

AgentPtr load_agent(const std::string& path) {
  if (!fs::exists(path)) throw Failure{DEFOG_ERR_IO, "checkpoint not found: " + path};
  defog_agent* raw = nullptr;
  check(defog_agent_load(path.c_str(), &raw));
  return AgentPtr(raw);
}

void print_checksum(const defog_agent* agent, const std::string& path) {
  uint64_t sum = 0;
  check(defog_agent_checksum(agent, &sum));
  std::printf("model %s  checksum %016llx\n", path.c_str(), static_cast<unsigned long long>(sum));
}

void print_report(const defog_report* report) {
  const auto n = defog_report_group_count(report);
  std::printf("%-20s %8s %4s %12s %12s\n", "label", "p_d", "n", "mean", "std");
  for (size_t i = 0; i < n; ++i) {
    const char* label = nullptr;
    defog_rate_summary s{};
    check(defog_report_group(report, i, &label, &s));
    std::printf("%-20s %8.4f %4d %12.4f %12.4f\n", label, s.drop_rate, s.n, s.mean, s.std);
  }
}

void print_emitted(const std::string& prefix, bool plot) {
  std::printf("wrote %s_trials.csv %s_summary.csv%s\n", prefix.c_str(), prefix.c_str(),
              plot ? (" " + prefix + "_curve.png").c_str() : "");
}

// Runs one main stage (and the finetune stage if enabled) into `out`.
AgentPtr train_into(defog_config* cfg, const defog_dataset* ds, const std::string& out,
                    bool finetune) {
  ensure_dir(out);
  freeze(cfg, out + "/config.yaml");
  long count = 0;
  defog_agent* raw = nullptr;
  check(defog_train(cfg, ds, (out + "/train_log.jsonl").c_str(), (out + "/checkpoint.arc").c_str(),
                    on_log, &count, &raw));
  AgentPtr agent(raw);
  check(defog_agent_save(agent.get(), (out + "/model_main.arc").c_str()));
  if (finetune) {
    count = 0;
    check(defog_finetune(agent.get(), cfg, ds, (out + "/finetune_log.jsonl").c_str(), on_log, &count));
  }
  const auto model_path = out + "/model.arc";
  check(defog_agent_save(agent.get(), model_path.c_str()));
  print_checksum(agent.get(), model_path);
  return agent;
}

bool truthy(const std::string& v) { return v == "true" || v == "1" || v == "yes"; }

// Frozen config next to a checkpoint, if any.
std::string sibling_config(const std::string& model_path) {
  const auto p = fs::path(model_path).parent_path() / "config.yaml";
  return fs::exists(p) ? p.string() : std::string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"defog: offline transformer agents for stale observation streams"};
  app.require_subcommand(1);
  app.add_option("--workdir", g.workdir, "root for relative paths");
  app.add_flag("-q,--quiet", g.quiet, "suppress progress output");
  app.add_option("--log-every", g.log_every, "print every n-th training record");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate an offline dataset");
  std::string gen_env = "point-mass", gen_tier = "expert", gen_out;
  long long gen_n = 50000;
  unsigned long long gen_seed = 0;
  gen->add_option("--env", gen_env, "environment")->capture_default_str();
  gen->add_option("--tier", gen_tier, "expert | medium | medium_replay")->capture_default_str();
  gen->add_option("-n,--n", gen_n, "transitions")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "seed")->capture_default_str();
  gen->add_option("-o,--out", gen_out, "output file")->required();

  // config
  auto* show = app.add_subcommand("config", "print (or write) a resolved config");
  ConfigArgs show_args;
  show_args.attach(show);
  std::string show_key, show_out;
  bool show_dt = false;
  show->add_option("--get", show_key, "print one dotted key");
  show->add_flag("--vanilla-dt", show_dt, "vanilla decision transformer baseline");
  show->add_option("-o,--out", show_out, "write instead of printing");

  // train
  auto* train = app.add_subcommand("train", "train a model (main stage, then finetune if enabled)");
  ConfigArgs train_args;
  train_args.attach(train);
  std::string train_data, train_out;
  long long train_steps = 0;
  bool train_no_ft = false, train_dt = false;
  train->add_option("--data", train_data, "dataset file (default: config dataset or generate)");
  train->add_option("-o,--out", train_out, "output directory (default: config output_dir)");
  train->add_option("--steps", train_steps, "main-stage steps; warmup becomes steps/10")
      ->check(CLI::PositiveNumber);
  train->add_flag("--no-finetune", train_no_ft, "skip the finetune stage");
  train->add_flag("--vanilla-dt", train_dt, "train the vanilla decision transformer baseline");

  // finetune
  auto* ft = app.add_subcommand("finetune", "freeze-trunk finetune of a trained model");
  ConfigArgs ft_args;
  ft_args.attach(ft);
  std::string ft_model, ft_data, ft_out;
  long long ft_steps = 0;
  ft->add_option("-m,--model", ft_model, "model checkpoint")->required();
  ft->add_option("--data", ft_data, "dataset file");
  ft->add_option("-o,--out", ft_out, "output directory (default: model's directory)");
  ft->add_option("--steps", ft_steps, "finetune steps")->check(CLI::PositiveNumber);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate at one drop rate and record a trace");
  ConfigArgs ev_args;
  ev_args.attach(ev);
  std::string ev_model, ev_out;
  double ev_rate = 0.0;
  ev->add_option("-m,--model", ev_model, "model checkpoint")->required();
  ev->add_option("--drop-rate", ev_rate, "bernoulli drop rate")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  ev->add_option("-o,--out", ev_out, "output prefix (default: <model dir>/eval)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "return vs drop rate over seeds and trials");
  ConfigArgs sw_args;
  sw_args.attach(sw);
  std::string sw_model, sw_out, sw_rates, sw_seeds, sw_label;
  int sw_trials = 0;
  bool sw_no_plot = false;
  sw->add_option("-m,--model", sw_model, "model checkpoint")->required();
  sw->add_option("--rates", sw_rates, "comma-separated drop rates");
  sw->add_option("--seeds", sw_seeds, "comma-separated eval seeds");
  sw->add_option("--trials", sw_trials, "trials per rate")->check(CLI::PositiveNumber);
  sw->add_option("--label", sw_label, "curve label (default: config label)");
  sw->add_option("-o,--out", sw_out, "output prefix (default: <model dir>/sweep)");
  sw->add_flag("--no-plot", sw_no_plot, "skip the curve image");

  // plot
  auto* pl = app.add_subcommand("plot", "overlay curves from trials tables");
  std::vector<std::string> pl_inputs;
  std::string pl_out = "comparison.png", pl_title;
  pl->add_option("reports", pl_inputs, "<prefix>_trials.csv files")->required();
  pl->add_option("-o,--out", pl_out, "output image")->capture_default_str();
  pl->add_option("--title", pl_title, "plot title");

  // ablate
  auto* ab = app.add_subcommand("ablate", "run an ablation family and compare its variants");
  ConfigArgs ab_args;
  ab_args.attach(ab);
  std::string ab_family, ab_out, ab_data, ab_rates, ab_seeds;
  std::vector<std::string> ab_only;
  bool ab_list = false;
  long long ab_steps = 0;
  int ab_trials = 0;
  ab->add_option("family", ab_family, "preset family");
  ab->add_flag("--list", ab_list, "list preset families and variants");
  ab->add_option("--only", ab_only, "subset of variants")->take_all();
  ab->add_option("--data", ab_data, "dataset file shared by every variant");
  ab->add_option("-o,--out", ab_out, "output directory (default: ablate_<family>)");
  ab->add_option("--steps", ab_steps, "main-stage steps per variant")->check(CLI::PositiveNumber);
  ab->add_option("--rates", ab_rates, "comma-separated drop rates");
  ab->add_option("--seeds", ab_seeds, "comma-separated eval seeds");
  ab->add_option("--trials", ab_trials, "trials per rate")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  auto apply_steps = [](defog_config* cfg, long long steps) {
    if (steps <= 0) return;
    set(cfg, "train.total_steps", std::to_string(steps));
    set(cfg, "train.warmup_steps", std::to_string(steps / 10));
    const auto ft_steps = std::stoll(get(cfg, "train.finetune_steps"));
    if (ft_steps > steps) set(cfg, "train.finetune_steps", std::to_string(steps / 5));
  };
  auto apply_eval = [](defog_config* cfg, const std::string& rates, const std::string& seeds,
                       int trials) {
    if (!rates.empty()) set(cfg, "eval.drop_rates", yaml_list(rates));
    if (!seeds.empty()) set(cfg, "eval.seeds", yaml_list(seeds));
    if (trials > 0) set(cfg, "eval.trials_per_rate", std::to_string(trials));
  };

  try {
    if (*gen) {
      defog_dataset* raw = nullptr;
      check(defog_dataset_generate(gen_env.c_str(), gen_tier.c_str(), gen_n, gen_seed, &raw));
      DatasetPtr ds(raw);
      const auto out = resolve(gen_out);
      if (fs::path(out).has_parent_path()) ensure_dir(fs::path(out).parent_path().string());
      check(defog_dataset_save(ds.get(), out.c_str()));
      print_stats(ds.get());
      std::printf("wrote %s\n", out.c_str());
    } else if (*show) {
      auto cfg = show_args.build();
      if (show_dt) check(defog_config_make_vanilla_dt(cfg.get()));
      finalize(cfg.get());
      if (!show_out.empty()) {
        freeze(cfg.get(), resolve(show_out));
      } else {
        std::cout << get(cfg.get(), show_key) << "\n";
      }
    } else if (*train) {
      auto cfg = train_args.build();
      if (train_dt) check(defog_config_make_vanilla_dt(cfg.get()));
      apply_steps(cfg.get(), train_steps);
      train_args.apply_overrides(cfg.get());  // explicit --set wins over --steps
      if (train_no_ft) set(cfg.get(), "finetune", "false");
      finalize(cfg.get());
      auto ds = dataset_for(cfg.get(), train_data);
      const auto out = resolve(train_out.empty() ? get(cfg.get(), "output_dir") : train_out);
      train_into(cfg.get(), ds.get(), out, truthy(get(cfg.get(), "finetune")));
    } else if (*ft) {
      const auto model_path = resolve(ft_model);
      auto agent = load_agent(model_path);
      auto cfg = ft_args.build(sibling_config(model_path));
      if (ft_steps > 0) {
        if (std::stoll(get(cfg.get(), "train.total_steps")) < ft_steps)
          set(cfg.get(), "train.total_steps", std::to_string(ft_steps));
        set(cfg.get(), "train.finetune_steps", std::to_string(ft_steps));
      }
      ft_args.apply_overrides(cfg.get());
      finalize(cfg.get());
      auto ds = dataset_for(cfg.get(), ft_data);
      const auto out = ft_out.empty() ? fs::path(model_path).parent_path().string() : resolve(ft_out);
      ensure_dir(out.empty() ? "." : out);
      const auto dir = out.empty() ? std::string(".") : out;
      freeze(cfg.get(), dir + "/finetune_config.yaml");
      long count = 0;
      check(defog_finetune(agent.get(), cfg.get(), ds.get(), (dir + "/finetune_log.jsonl").c_str(),
                           on_log, &count));
      const auto saved = dir + "/model_finetuned.arc";
      check(defog_agent_save(agent.get(), saved.c_str()));
      print_checksum(agent.get(), saved);
    } else if (*ev) {
      const auto model_path = resolve(ev_model);
      auto agent = load_agent(model_path);
      auto cfg = ev_args.build(sibling_config(model_path));
      set(cfg.get(), "eval.drop_rates", "[" + std::to_string(ev_rate) + "]");
      set(cfg.get(), "eval.eval_process", "bernoulli");
      ev_args.apply_overrides(cfg.get());
      finalize(cfg.get());
      const auto prefix = resolve(ev_out.empty()
                                      ? (fs::path(model_path).parent_path() / "eval").string()
                                      : ev_out);
      if (fs::path(prefix).has_parent_path()) ensure_dir(fs::path(prefix).parent_path().string());
      freeze(cfg.get(), prefix + "_config.yaml");
      defog_report* raw = nullptr;
      check(defog_sweep(agent.get(), cfg.get(), nullptr, &raw));
      ReportPtr report(raw);
      check(defog_report_emit(report.get(), prefix.c_str(), 0));
      print_report(report.get());
      double ret = 0.0;
      int64_t len = 0;
      const auto seed = std::stoull(get(cfg.get(), "seed"));
      check(defog_rollout(agent.get(), cfg.get(), ev_rate, seed, (prefix + "_trace.jsonl").c_str(),
                          (prefix + "_trace.png").c_str(), &ret, &len));
      print_emitted(prefix, false);
      std::printf("trace return %.4f length %lld -> %s_trace.jsonl %s_trace.png\n", ret,
                  static_cast<long long>(len), prefix.c_str(), prefix.c_str());
    } else if (*sw) {
      const auto model_path = resolve(sw_model);
      auto agent = load_agent(model_path);
      auto cfg = sw_args.build(sibling_config(model_path));
      apply_eval(cfg.get(), sw_rates, sw_seeds, sw_trials);
      sw_args.apply_overrides(cfg.get());
      finalize(cfg.get());
      const auto prefix = resolve(sw_out.empty()
                                      ? (fs::path(model_path).parent_path() / "sweep").string()
                                      : sw_out);
      if (fs::path(prefix).has_parent_path()) ensure_dir(fs::path(prefix).parent_path().string());
      freeze(cfg.get(), prefix + "_config.yaml");
      defog_report* raw = nullptr;
      check(defog_sweep(agent.get(), cfg.get(), sw_label.empty() ? nullptr : sw_label.c_str(), &raw));
      ReportPtr report(raw);
      check(defog_report_emit(report.get(), prefix.c_str(), sw_no_plot ? 0 : 1));
      print_report(report.get());
      print_emitted(prefix, !sw_no_plot);
    } else if (*pl) {
      std::vector<std::string> paths;
      for (const auto& p : pl_inputs) {
        paths.push_back(resolve(p));
        if (!fs::exists(paths.back())) throw Failure{DEFOG_ERR_IO, "report not found: " + paths.back()};
      }
      std::vector<const char*> ptrs;
      for (const auto& p : paths) ptrs.push_back(p.c_str());
      const auto out = resolve(pl_out);
      if (fs::path(out).has_parent_path()) ensure_dir(fs::path(out).parent_path().string());
      check(defog_plot_reports(ptrs.data(), ptrs.size(), out.c_str(),
                               pl_title.empty() ? nullptr : pl_title.c_str()));
      std::printf("wrote %s\n", out.c_str());
    } else if (*ab) {
      if (ab_list) {
        for (size_t i = 0; i < defog_ablation_family_count(); ++i) {
          const char* fam = defog_ablation_family(i);
          std::printf("%s: %s\n ", fam, defog_ablation_description(fam));
          for (size_t j = 0; j < defog_ablation_variant_count(fam); ++j)
            std::printf(" %s", defog_ablation_variant(fam, j));
          std::printf("\n");
        }
        return kOk;
      }
      if (ab_family.empty()) throw Failure{DEFOG_ERR_CONFIG, "ablate needs a family (see --list)"};
      const auto n_variants = defog_ablation_variant_count(ab_family.c_str());
      if (n_variants == 0) throw Failure{DEFOG_ERR_CONFIG, "unknown ablation family '" + ab_family + "'"};
      std::vector<std::string> variants;
      for (size_t j = 0; j < n_variants; ++j) variants.push_back(defog_ablation_variant(ab_family.c_str(), j));
      if (!ab_only.empty()) {
        for (const auto& v : ab_only) {
          if (std::find(variants.begin(), variants.end(), v) == variants.end())
            throw Failure{DEFOG_ERR_CONFIG, "unknown variant '" + v + "' in family " + ab_family};
        }
        variants = ab_only;
      }

      auto base = ab_args.build();
      const auto out = resolve(ab_out.empty() ? "ablate_" + ab_family : ab_out);
      ensure_dir(out);
      // One dataset for every arm so only the flags differ.
      auto ds = dataset_for(base.get(), ab_data);
      ReportPtr combined;
      for (const auto& v : variants) {
        defog_config* raw = nullptr;
        check(defog_config_clone(base.get(), &raw));
        ConfigPtr cfg(raw);
        check(defog_config_apply_ablation(cfg.get(), ab_family.c_str(), v.c_str()));
        apply_steps(cfg.get(), ab_steps);
        apply_eval(cfg.get(), ab_rates, ab_seeds, ab_trials);
        ab_args.apply_overrides(cfg.get());
        finalize(cfg.get());
        if (!g.quiet) std::cerr << "== " << ab_family << "/" << v << "\n";
        const auto dir = out + "/" + v;
        auto agent = train_into(cfg.get(), ds.get(), dir, truthy(get(cfg.get(), "finetune")));
        defog_report* rep = nullptr;
        check(defog_sweep(agent.get(), cfg.get(), v.c_str(), &rep));
        ReportPtr report(rep);
        check(defog_report_emit(report.get(), (dir + "/sweep").c_str(), 0));
        if (!combined) {
          combined = std::move(report);
        } else {
          check(defog_report_merge(combined.get(), report.get()));
        }
      }
      const auto prefix = out + "/" + ab_family;
      check(defog_report_emit(combined.get(), prefix.c_str(), 1));
      print_report(combined.get());
      print_emitted(prefix, true);
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error (%s): %s\n", defog_status_name(f.status), f.message.c_str());
    return exit_code(f.status);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kOk;
}
