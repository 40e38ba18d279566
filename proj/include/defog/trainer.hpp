#pragma once

#include <torch/torch.h>

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "defog/dataset.hpp"
#include "defog/model.hpp"
#include "defog/rdmdp.hpp"

namespace defog {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  std::int64_t batch_size = 256;
  std::int64_t total_steps = 20000;
  std::int64_t finetune_steps = 4000;
  std::int64_t warmup_steps = 2000;
  double grad_clip_norm = 0.25;
  std::int64_t update_interval = 100;
  DropProcessConfig train_drop = DropProcessConfig::bernoulli(0.5);
  DropProcessConfig finetune_drop = DropProcessConfig::bernoulli(0.8);
  MaskingOptions masking;
  /// Draw the drop-mask once at step 0 and keep it.
  bool fixed_mask = false;
  /// Finetune interval of floor(update_interval / 5) instead of update_interval.
  bool short_finetune_interval = false;
  std::vector<ParamGroup> finetune_groups = {ParamGroup::DropspanEncoder,
                                             ParamGroup::ActionPredictor};
  std::uint64_t seed = 0;

  static TrainConfig continuous_defaults();
  static TrainConfig discrete_defaults();
  /// Sets finetune_steps = total/5 and warmup_steps = total/10.
  void scale_to(std::int64_t total);
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

enum class Stage { Main, Finetune };
const char* to_string(Stage s) noexcept;
Stage stage_from_string(const std::string& s);

struct LogRecord {
  std::int64_t step = 0;  // 0-based optimizer step within the stage
  Stage stage = Stage::Main;
  double loss = 0.0;
  double action_nll = 0.0;
  double nll_per_dim = 0.0;
  double lr = 0.0;
  double p_d = 0.0;
  double grad_norm = 0.0;          // before clipping
  double grad_norm_clipped = 0.0;  // after clipping
  double wall_time = 0.0;          // seconds since the stage started
  bool mask_resampled = false;
  double mask_drop_fraction = 0.0;
  bool skipped = false;  // non-finite loss, no update applied
};

std::string to_json_line(const LogRecord& r);

/// Learning rate for 0-based step `step`: linear warmup reaching `lr` after
/// `warmup` updates, constant afterwards.
double warmup_lr(double lr, std::int64_t step, std::int64_t warmup);

/// Builds a model whose dims match `dataset`, seeded from `seed`.
DeFogNet make_model(ModelConfig config, const TrajectoryDataset& dataset, std::uint64_t seed);

/// Per-dimension state mean and std over the dataset.
std::pair<std::vector<double>, std::vector<double>> state_moments(const TrajectoryDataset& data);

/// One training stage (main or freeze-trunk finetune) as a resumable state
/// machine. The dataset must outlive the trainer.
class Trainer {
public:
  Trainer(DeFogNet model, const TrajectoryDataset& dataset, TrainConfig config,
          Stage stage = Stage::Main);

  Stage stage() const { return stage_; }
  std::int64_t step_index() const { return step_; }
  std::int64_t stage_steps() const { return steps_; }
  std::int64_t warmup() const { return warmup_; }
  std::int64_t interval() const { return interval_; }
  bool done() const { return step_ >= steps_; }
  const TrainConfig& config() const { return config_; }
  const DropProcessConfig& drop_config() const {
    return stage_ == Stage::Main ? config_.train_drop : config_.finetune_drop;
  }
  DeFogNet model() const { return model_; }
  const MaskedView& view() const { return view_; }
  const std::vector<LogRecord>& log() const { return log_; }
  /// Names of the parameters handed to the optimizer.
  const std::vector<std::string>& trainable() const { return trainable_; }

  /// Appends every record to `path` as JSON lines.
  void set_log_file(const std::string& path);
  void set_log_callback(std::function<void(const LogRecord&)> cb) { callback_ = std::move(cb); }

  LogRecord step();
  /// Runs until `until` (exclusive, clamped to the stage length); -1 = to the end.
  void run(std::int64_t until = -1);

  void save_checkpoint(const std::string& path) const;
  /// Resumes a stage from a checkpoint written by save_checkpoint.
  static std::unique_ptr<Trainer> restore(const std::string& path, const TrajectoryDataset& dataset);

private:
  void init_streams();
  void build_optimizer();

  DeFogNet model_;
  const TrajectoryDataset* data_;
  TrainConfig config_;
  Stage stage_;
  std::int64_t steps_ = 0;
  std::int64_t warmup_ = 0;
  std::int64_t interval_ = 1;
  std::int64_t step_ = 0;
  int nonfinite_run_ = 0;
  MaskedView view_;
  std::mt19937_64 mask_rng_, batch_rng_, noise_rng_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  std::vector<std::string> trainable_;
  std::vector<LogRecord> log_;
  std::string log_path_;
  std::function<void(const LogRecord&)> callback_;
  std::chrono::steady_clock::time_point started_;
  double wall_offset_ = 0.0;
};

/// Main-stage training to completion.
DeFogNet train(DeFogNet model, const TrajectoryDataset& dataset, const TrainConfig& config,
               std::vector<LogRecord>* log = nullptr, const std::string& log_path = "");

/// Finetune stage updating only `config.finetune_groups`.
DeFogNet freeze_trunk_finetune(DeFogNet model, const TrajectoryDataset& dataset,
                               const TrainConfig& config, std::vector<LogRecord>* log = nullptr,
                               const std::string& log_path = "");

/// Finetune with an explicit group selection drawn from {dropspan_encoder,
/// action_predictor}.
DeFogNet finetune_component_selection(DeFogNet model, const TrajectoryDataset& dataset,
                                      TrainConfig config, const std::vector<ParamGroup>& groups,
                                      std::vector<LogRecord>* log = nullptr);

/// Model-only checkpoint I/O (no optimizer or stream state).
void save_model(const DeFogNet& model, const std::string& path);
DeFogNet load_model(const std::string& path);
/// Loads and checks the stored config against `expected`.
DeFogNet load_model(const std::string& path, const ModelConfig& expected);

/// FNV-1a over the raw bytes of the given parameters, in order.
std::uint64_t params_checksum(const NamedParams& params);
std::uint64_t model_checksum(const DeFogNet& model);

}  // namespace defog
