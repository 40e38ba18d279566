#pragma once

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "defog/evaluator.hpp"
#include "defog/model.hpp"
#include "defog/trainer.hpp"

namespace defog {

struct RunConfig {
  std::string env = "point-mass";
  std::string tier = "expert";
  std::string dataset;  // empty: generate from env/tier/n_transitions
  std::int64_t n_transitions = 50000;
  std::string output_dir = "run";
  std::string label = "defog";
  std::uint64_t seed = 0;
  bool finetune = true;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  /// Flag combinations and every nested config.
  void validate() const;
};

/// Desk-scale defaults for `env`, dims filled from its spec.
RunConfig default_run_config(const std::string& env);
/// Vanilla DT: no drop-span machinery, no train-time masking, no finetune.
void make_vanilla_dt(RunConfig& config);

YAML::Node to_yaml(const ModelConfig& c);
YAML::Node to_yaml(const DropProcessConfig& c);
YAML::Node to_yaml(const TrainConfig& c);
YAML::Node to_yaml(const EvalConfig& c);
YAML::Node to_yaml(const RunConfig& c);

/// Each reader starts from `base` and overwrites the keys present in `node`;
/// unknown keys raise a config error.
ModelConfig model_config_from_yaml(const YAML::Node& node, ModelConfig base = {});
DropProcessConfig drop_config_from_yaml(const YAML::Node& node, DropProcessConfig base = {});
TrainConfig train_config_from_yaml(const YAML::Node& node, TrainConfig base = {});
EvalConfig eval_config_from_yaml(const YAML::Node& node, EvalConfig base = {});
RunConfig run_config_from_yaml(const YAML::Node& node);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& config, const std::string& path);
std::string dump_yaml(const YAML::Node& node);

/// Sets one value by dotted key, e.g. "train.learning_rate" or
/// "model.dropspan_mode". The value is parsed as YAML.
void apply_override(RunConfig& config, const std::string& key, const std::string& value);

struct AblationVariant {
  std::string name;
  std::function<void(RunConfig&)> apply;
};

struct AblationPreset {
  std::string family;
  std::string description;
  std::vector<AblationVariant> variants;
};

const std::vector<AblationPreset>& ablation_presets();
const AblationPreset& find_ablation(const std::string& family);
void apply_ablation(RunConfig& config, const std::string& family, const std::string& variant);

}  // namespace defog
