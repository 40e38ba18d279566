#include "defog/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <sstream>

#include "defog/errors.hpp"
#include "defog/plot.hpp"
#include "defog/rng.hpp"
#include "defog/toy_envs.hpp"

namespace defog {

namespace {

std::vector<float> to_float(const StateVec& v) { return {v.begin(), v.end()}; }

std::string rate_key(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", rate);
  return buf;
}

bool same_rate(double a, double b) { return std::abs(a - b) < 1e-9; }

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

RolloutResult rollout(DeFogNet& model, RdmdpEnv& env, double target_return, int max_steps,
                      std::mt19937_64& rng, ActMode mode, bool record_trace) {
  const auto& cfg = model->config();
  const auto& spec = env.spec();
  require(cfg.state_dim == spec.state_dim, ErrorKind::Config,
          "model state_dim " + std::to_string(cfg.state_dim) + " does not match env " + spec.name +
              " (" + std::to_string(spec.state_dim) + ")");
  require(cfg.action_dim == spec.action_space.dim &&
              (cfg.action_head == ActionHead::Categorical) == spec.action_space.discrete(),
          ErrorKind::Config, "model action head does not match env " + spec.name);
  require(max_steps >= 1, ErrorKind::InvalidInput, "max_steps must be >= 1");

  RolloutResult res;
  std::deque<ContextEntry> history;
  auto obs = env.reset();
  for (int t = 0; t < max_steps; ++t) {
    ContextEntry e;
    e.rtg = static_cast<float>(observed_reward_to_go(target_return, obs.cum_reward));
    e.obs = to_float(obs.state);
    e.act.assign(static_cast<std::size_t>(cfg.action_dim), 0.0f);
    e.timestep = t;
    e.drop_span = obs.drop_span;
    history.push_back(std::move(e));
    while (history.size() > static_cast<std::size_t>(cfg.context)) history.pop_front();

    const auto a = act(model, history, mode, rng, spec.action_space);
    history.back().act.assign(a.begin(), a.end());

    if (record_trace) {
      TraceStep s;
      s.t = t;
      s.true_state = env.true_state();
      s.observed_state = obs.state;
      s.action = a;
      s.dropped = obs.dropped;
      s.drop_span = obs.drop_span;
      s.rtg_observed = history.back().rtg;
      s.rtg_true = target_return - env.true_cumreward();
      res.trace.push_back(std::move(s));
    }

    const auto next = env.step(a);
    ++res.length;
    if (record_trace) res.trace.back().reward = env.last_reward();
    if (next.done) break;
    obs = next;
  }
  res.ret = env.true_cumreward();
  return res;
}

std::vector<std::string> EvalReport::labels() const {
  std::vector<std::string> out;
  for (const auto& t : trials)
    if (std::find(out.begin(), out.end(), t.label) == out.end()) out.push_back(t.label);
  return out;
}

RateSummary summarize(const std::vector<double>& returns, const std::vector<std::int64_t>& lengths) {
  RateSummary s;
  s.n = static_cast<int>(returns.size());
  if (returns.empty()) return s;
  double sum = 0.0, len = 0.0;
  s.min = returns.front();
  s.max = returns.front();
  for (double r : returns) {
    sum += r;
    s.min = std::min(s.min, r);
    s.max = std::max(s.max, r);
  }
  for (auto l : lengths) len += static_cast<double>(l);
  s.mean = sum / s.n;
  s.mean_length = lengths.empty() ? 0.0 : len / static_cast<double>(lengths.size());
  if (s.n > 1) {
    double ss = 0.0;
    for (double r : returns) ss += (r - s.mean) * (r - s.mean);
    s.std = std::sqrt(ss / (s.n - 1));
  }
  // Guard against rounding pushing the mean outside [min, max].
  s.mean = std::clamp(s.mean, s.min, s.max);
  return s;
}

namespace {

std::vector<RateSummary> group(const std::vector<TrialResult>& trials,
                               const std::function<bool(const TrialResult&)>& keep) {
  std::vector<std::pair<std::string, double>> order;
  std::map<std::pair<std::string, std::string>, std::pair<std::vector<double>, std::vector<std::int64_t>>> acc;
  for (const auto& t : trials) {
    if (!keep(t)) continue;
    auto key = std::make_pair(t.label, rate_key(t.drop_rate));
    if (!acc.count(key)) order.emplace_back(t.label, t.drop_rate);
    acc[key].first.push_back(t.ret);
    acc[key].second.push_back(t.length);
  }
  std::vector<RateSummary> out;
  for (const auto& [label, rate] : order) {
    const auto& [rets, lens] = acc[{label, rate_key(rate)}];
    auto s = summarize(rets, lens);
    s.label = label;
    s.drop_rate = rate;
    out.push_back(s);
  }
  return out;
}

}  // namespace

std::vector<RateSummary> EvalReport::summary() const {
  return group(trials, [](const TrialResult&) { return true; });
}

std::vector<RateSummary> EvalReport::seed_summary(std::uint64_t seed) const {
  return group(trials, [seed](const TrialResult& t) { return t.seed == seed; });
}

std::optional<RateSummary> EvalReport::find(const std::string& label, double drop_rate) const {
  for (const auto& s : summary())
    if (s.label == label && same_rate(s.drop_rate, drop_rate)) return s;
  return std::nullopt;
}

void EvalReport::merge(const EvalReport& other) {
  trials.insert(trials.end(), other.trials.begin(), other.trials.end());
}

std::uint64_t trial_seed(std::uint64_t seed, double drop_rate, int trial) {
  return SeedTree(seed).child("eval").child("rate=" + rate_key(drop_rate)).derive("trial", static_cast<std::uint64_t>(trial));
}

EvalReport sweep(DeFogNet& model, const std::string& env_name, const EvalConfig& config,
                 const std::string& label) {
  config.validate();
  torch::set_num_threads(1);
  const auto spec = env_spec(env_name);
  const double target = std::isnan(config.target_return) ? spec.default_target_return : config.target_return;
  const int max_steps = config.max_steps > 0 ? config.max_steps : spec.max_episode_steps;

  std::vector<std::pair<double, DropProcessConfig>> points;
  if (config.eval_process == DropKind::Markov) {
    for (auto [p1, p2] : config.markov_pairs)
      points.emplace_back(markov_steady_state(p1, p2), DropProcessConfig::markov(p1, p2));
  } else {
    for (double r : config.drop_rates) points.emplace_back(r, DropProcessConfig::bernoulli(r));
  }

  model->eval();
  EvalReport report;
  for (auto seed : config.seeds) {
    for (const auto& [rate, process] : points) {
      for (int trial = 0; trial < config.trials_per_rate; ++trial) {
        const auto ts = trial_seed(seed, rate, trial);
        auto env = wrap_env(make_env(env_name), process, ts);
        std::mt19937_64 act_rng(splitmix64(ts ^ 0x5bd1e995ull));
        const auto r = rollout(model, *env, target, max_steps, act_rng, config.act_mode, false);
        report.trials.push_back({label, seed, rate, trial, r.ret, r.length});
      }
    }
  }
  return report;
}

std::vector<std::string> emit_report(const EvalReport& report, const std::string& prefix, bool plot) {
  require(!report.trials.empty(), ErrorKind::InvalidInput, "report has no trials; nothing emitted");
  std::vector<std::string> written;
  const auto trials_path = prefix + "_trials.csv";
  {
    std::ofstream f(trials_path);
    require(f.good(), ErrorKind::Io, "cannot write " + trials_path);
    f << "label,seed,drop_rate,trial,return,length\n" << std::setprecision(17);
    for (const auto& t : report.trials) {
      f << csv_escape(t.label) << ',' << t.seed << ',' << t.drop_rate << ',' << t.trial << ','
        << t.ret << ',' << t.length << '\n';
    }
    require(f.good(), ErrorKind::Io, "failed writing " + trials_path);
  }
  written.push_back(trials_path);

  const auto summary = report.summary();
  const auto summary_path = prefix + "_summary.csv";
  {
    std::ofstream f(summary_path);
    require(f.good(), ErrorKind::Io, "cannot write " + summary_path);
    f << "label,drop_rate,n,mean,std,min,max,mean_length\n" << std::setprecision(17);
    for (const auto& s : summary) {
      f << csv_escape(s.label) << ',' << s.drop_rate << ',' << s.n << ',' << s.mean << ',' << s.std
        << ',' << s.min << ',' << s.max << ',' << s.mean_length << '\n';
    }
    require(f.good(), ErrorKind::Io, "failed writing " + summary_path);
  }
  written.push_back(summary_path);

  if (plot) {
    PlotSpec spec;
    spec.title = "mean return vs test-time drop rate";
    spec.xlabel = "drop rate";
    spec.ylabel = "return";
    for (const auto& label : report.labels()) {
      Series s;
      s.label = label;
      s.points = true;
      for (const auto& r : summary) {
        if (r.label != label) continue;
        s.x.push_back(r.drop_rate);
        s.y.push_back(r.mean);
        s.band.push_back(r.std);
      }
      spec.series.push_back(std::move(s));
    }
    const auto png = prefix + "_curve.png";
    render_plot(spec, png);
    written.push_back(png);
  }
  return written;
}

EvalReport read_trials_csv(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::Io, "cannot read " + path);
  std::string line;
  std::getline(f, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "label,seed,drop_rate,trial,return,length", ErrorKind::Format,
          path + " is not a trials table (unexpected header)");
  EvalReport r;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split_csv(line);
    require(cols.size() == 6, ErrorKind::Format, path + ":" + std::to_string(lineno) + ": expected 6 columns");
    try {
      r.trials.push_back({cols[0], std::stoull(cols[1]), std::stod(cols[2]), std::stoi(cols[3]),
                          std::stod(cols[4]), std::stoll(cols[5])});
    } catch (const std::exception&) {
      fail(ErrorKind::Format, path + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return r;
}

void write_trace_jsonl(const std::vector<TraceStep>& trace, const std::string& path) {
  require(!trace.empty(), ErrorKind::InvalidInput, "trace is empty");
  std::ofstream f(path);
  require(f.good(), ErrorKind::Io, "cannot write " + path);
  for (const auto& s : trace) {
    nlohmann::json j;
    j["t"] = s.t;
    j["true_state"] = s.true_state;
    j["observed_state"] = s.observed_state;
    j["action"] = s.action;
    j["dropped"] = s.dropped;
    j["drop_span"] = s.drop_span;
    j["rtg_observed"] = s.rtg_observed;
    j["rtg_true"] = s.rtg_true;
    j["reward"] = s.reward;
    f << j.dump() << '\n';
  }
  require(f.good(), ErrorKind::Io, "failed writing " + path);
}

void visualize_trace(const std::vector<TraceStep>& trace, const std::string& path) {
  require(!trace.empty(), ErrorKind::InvalidInput, "trace is empty");
  const auto& s0 = trace.front().true_state;
  const bool one_hot = std::count(s0.begin(), s0.end(), 1.0) == 1 &&
                       std::count(s0.begin(), s0.end(), 0.0) == static_cast<long>(s0.size()) - 1;
  PlotSpec spec;
  Series truth{"true", {}, {}, {}, true, false, 4};
  Series seen{"observed", {}, {}, {}, true, false, 1};
  Series drops{"dropped", {}, {}, {}, false, true, 3};
  if (one_hot || s0.size() < 2) {
    spec.title = "true vs observed position over time";
    spec.xlabel = "t";
    spec.ylabel = one_hot ? "cell" : "state[0]";
    auto pos = [one_hot](const StateVec& v) {
      return one_hot ? static_cast<double>(std::max_element(v.begin(), v.end()) - v.begin()) : v[0];
    };
    for (const auto& s : trace) {
      truth.x.push_back(static_cast<double>(s.t));
      truth.y.push_back(pos(s.true_state));
      seen.x.push_back(static_cast<double>(s.t));
      seen.y.push_back(pos(s.observed_state));
      if (s.dropped) {
        drops.x.push_back(static_cast<double>(s.t));
        drops.y.push_back(pos(s.true_state));
      }
    }
  } else {
    spec.title = "true vs observed trajectory";
    spec.xlabel = "x";
    spec.ylabel = "y";
    for (const auto& s : trace) {
      truth.x.push_back(s.true_state[0]);
      truth.y.push_back(s.true_state[1]);
      seen.x.push_back(s.observed_state[0]);
      seen.y.push_back(s.observed_state[1]);
      if (s.dropped) {
        drops.x.push_back(s.true_state[0]);
        drops.y.push_back(s.true_state[1]);
      }
    }
  }
  spec.series.push_back(std::move(truth));
  spec.series.push_back(std::move(seen));
  if (!drops.x.empty()) spec.series.push_back(std::move(drops));
  spec.width = 560;
  spec.height = 520;
  render_plot(spec, path);
}

}  // namespace defog
