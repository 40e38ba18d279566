#ifndef DEFOG_H
#define DEFOG_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define DEFOG_API __declspec(dllexport)
#else
#define DEFOG_API __attribute__((visibility("default")))
#endif

typedef enum defog_status {
  DEFOG_OK = 0,
  DEFOG_ERR_INVALID_INPUT = 1,
  DEFOG_ERR_CONFIG = 2,
  DEFOG_ERR_FORMAT = 3,
  DEFOG_ERR_IO = 4,
  DEFOG_ERR_NUMERICAL = 5,
  DEFOG_ERR_PROTOCOL = 6,
  DEFOG_ERR_INVALID_WINDOW = 7,
  DEFOG_ERR_INSUFFICIENT_DATA = 8,
  DEFOG_ERR_UNDEFINED_STEADY_STATE = 9,
  DEFOG_ERR_INTERNAL = 10
} defog_status;

typedef struct defog_config defog_config;
typedef struct defog_dataset defog_dataset;
typedef struct defog_agent defog_agent;
typedef struct defog_report defog_report;

/* Message of the last failed call on this thread; "" if none. */
DEFOG_API const char* defog_last_error(void);
DEFOG_API const char* defog_status_name(defog_status status);
DEFOG_API const char* defog_version(void);

/* ---- run configuration ---- */
DEFOG_API defog_status defog_config_default(const char* env, defog_config** out);
DEFOG_API defog_status defog_config_load(const char* path, defog_config** out);
DEFOG_API defog_status defog_config_save(const defog_config* cfg, const char* path);
/* Dotted key, YAML value: ("train.learning_rate", "3e-4"). */
DEFOG_API defog_status defog_config_set(defog_config* cfg, const char* key, const char* value);
/* Copies the YAML rendering of `key` ("" = whole config) into buf. *needed
   receives the full length including the terminator. */
DEFOG_API defog_status defog_config_get(const defog_config* cfg, const char* key, char* buf,
                                        size_t size, size_t* needed);
DEFOG_API defog_status defog_config_validate(const defog_config* cfg);
DEFOG_API defog_status defog_config_make_vanilla_dt(defog_config* cfg);
DEFOG_API defog_status defog_config_clone(const defog_config* cfg, defog_config** out);
DEFOG_API void defog_config_free(defog_config* cfg);

/* ---- ablation presets ---- */
DEFOG_API size_t defog_ablation_family_count(void);
DEFOG_API const char* defog_ablation_family(size_t index);
DEFOG_API const char* defog_ablation_description(const char* family);
/* Returns 0 for an unknown family. */
DEFOG_API size_t defog_ablation_variant_count(const char* family);
DEFOG_API const char* defog_ablation_variant(const char* family, size_t index);
DEFOG_API defog_status defog_config_apply_ablation(defog_config* cfg, const char* family,
                                                   const char* variant);

/* ---- datasets ---- */
typedef struct defog_dataset_stats {
  int64_t n_transitions;
  int64_t n_trajectories;
  int32_t state_dim;
  int32_t action_dim;
  int32_t discrete_actions;
  double target_return;
  double mean_return; /* over trajectories */
  double min_return;
  double max_return;
} defog_dataset_stats;

DEFOG_API defog_status defog_dataset_generate(const char* env, const char* tier, int64_t n_transitions,
                                              uint64_t seed, defog_dataset** out);
DEFOG_API defog_status defog_dataset_load(const char* path, defog_dataset** out);
DEFOG_API defog_status defog_dataset_save(const defog_dataset* ds, const char* path);
DEFOG_API defog_status defog_dataset_stats_get(const defog_dataset* ds, defog_dataset_stats* out);
DEFOG_API void defog_dataset_free(defog_dataset* ds);

/* ---- training ---- */
/* Called once per optimizer step with the JSON log line. */
typedef void (*defog_log_fn)(const char* json_line, void* user);

/* Main stage. log_path may be NULL; checkpoint_path (optional) receives the
   resumable trainer state at the end. */
DEFOG_API defog_status defog_train(const defog_config* cfg, const defog_dataset* ds,
                                   const char* log_path, const char* checkpoint_path,
                                   defog_log_fn log_fn, void* user, defog_agent** out);
/* Freeze-trunk finetune of `agent` in place using cfg's finetune settings. */
DEFOG_API defog_status defog_finetune(defog_agent* agent, const defog_config* cfg,
                                      const defog_dataset* ds, const char* log_path,
                                      defog_log_fn log_fn, void* user);
DEFOG_API defog_status defog_agent_save(const defog_agent* agent, const char* path);
DEFOG_API defog_status defog_agent_load(const char* path, defog_agent** out);
DEFOG_API defog_status defog_agent_checksum(const defog_agent* agent, uint64_t* out);
DEFOG_API void defog_agent_free(defog_agent* agent);

/* ---- evaluation ---- */
typedef struct defog_rate_summary {
  double drop_rate;
  int32_t n;
  double mean;
  double std;
  double min;
  double max;
  double mean_length;
} defog_rate_summary;

/* Every (seed, rate, trial) of cfg's eval section, rows tagged with label. */
DEFOG_API defog_status defog_sweep(defog_agent* agent, const defog_config* cfg, const char* label,
                                   defog_report** out);
DEFOG_API defog_status defog_report_merge(defog_report* into, const defog_report* other);
/* Writes <prefix>_trials.csv, <prefix>_summary.csv and, if plot != 0,
   <prefix>_curve.png. */
DEFOG_API defog_status defog_report_emit(const defog_report* report, const char* prefix, int plot);
DEFOG_API defog_status defog_report_load(const char* trials_csv, defog_report** out);
/* Number of (label, rate) groups. */
DEFOG_API size_t defog_report_group_count(const defog_report* report);
DEFOG_API defog_status defog_report_group(const defog_report* report, size_t index,
                                          const char** label, defog_rate_summary* out);
DEFOG_API void defog_report_free(defog_report* report);

/* One curve per trials table, labeled by the table's label column. */
DEFOG_API defog_status defog_plot_reports(const char* const* trials_csvs, size_t count,
                                          const char* out_png, const char* title);

/* Single rollout at a bernoulli drop rate. Writes a JSONL trace and/or a PNG
   when the paths are non-NULL; *ret receives the true return. */
DEFOG_API defog_status defog_rollout(defog_agent* agent, const defog_config* cfg, double drop_rate,
                                     uint64_t seed, const char* trace_jsonl, const char* trace_png,
                                     double* ret, int64_t* length);

#ifdef __cplusplus
}
#endif

#endif /* DEFOG_H */
