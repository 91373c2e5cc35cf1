#ifndef STIGMERGY_H
#define STIGMERGY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StgStatus {
  STG_STATUS_OK = 0,
  STG_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8, or a length did not match.
   */
  STG_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Scenario, model or checkpoint content failed validation.
   */
  STG_STATUS_VALIDATION = 3,
  /**
   * The run itself failed.
   */
  STG_STATUS_RUNTIME = 4,
  STG_STATUS_IO = 5,
} StgStatus;

/**
 * Push-feasibility forest.
 */
typedef struct StgForest StgForest;

/**
 * Trained push-primitive network.
 */
typedef struct StgNetwork StgNetwork;

/**
 * Logs and metrics of a finished run.
 */
typedef struct StgRun StgRun;

/**
 * Scenario description.
 */
typedef struct StgScenario StgScenario;

typedef struct StgMetrics {
  size_t episodes;
  double steps_mean;
  double steps_std;
  double proportion_mean;
  double proportion_std;
} StgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty when none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *stg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *stg_version(void);

/**
 * Parses and validates a TOML scenario.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a writable pointer.
 */
enum StgStatus stg_scenario_from_toml(const char *toml, struct StgScenario **out);

/**
 * Loads one of the scenarios shipped with the library: `sanity`, `easy`,
 * `medium`, `hard` or `hard6`.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a writable pointer.
 */
enum StgStatus stg_scenario_bundled(const char *name, struct StgScenario **out);

/**
 * # Safety
 * `scenario` must be a live handle.
 */
enum StgStatus stg_scenario_set_seed(struct StgScenario *scenario, uint64_t seed);

/**
 * # Safety
 * `scenario` must be a live handle.
 */
enum StgStatus stg_scenario_set_episodes(struct StgScenario *scenario, uint32_t episodes);

/**
 * Number of agents in the scenario, or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be null or a live handle.
 */
size_t stg_scenario_agent_count(const struct StgScenario *scenario);

/**
 * # Safety
 * `scenario` must be null or a handle not yet freed.
 */
void stg_scenario_free(struct StgScenario *scenario);

/**
 * Runs the scenario in the synchronous node world, whatever its mode field.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a writable pointer.
 */
enum StgStatus stg_run_abstract(const struct StgScenario *scenario, struct StgRun **out);

/**
 * Runs the scenario in embodied mode. A null `network` selects the scripted
 * oracle pusher; a null `forest` disables feasibility gating.
 *
 * # Safety
 * `scenario` must be a live handle, `network` and `forest` null or live
 * handles, and `out` a writable pointer.
 */
enum StgStatus stg_run_embodied(const struct StgScenario *scenario,
                                const struct StgNetwork *network,
                                double beta,
                                const struct StgForest *forest,
                                struct StgRun **out);

/**
 * # Safety
 * `run` must be a live handle and `out` a writable pointer.
 */
enum StgStatus stg_run_metrics(const struct StgRun *run, struct StgMetrics *out);

/**
 * Steps used and agents reaching the goal in episode `index`.
 *
 * # Safety
 * `run` must be a live handle; `steps` and `reached` writable pointers.
 */
enum StgStatus stg_run_episode(const struct StgRun *run,
                               size_t index,
                               uint32_t *steps,
                               uint32_t *reached);

/**
 * Writes the per-episode CSV log to `path`.
 *
 * # Safety
 * `run` must be a live handle and `path` a NUL-terminated string.
 */
enum StgStatus stg_run_write_episodes_csv(const struct StgRun *run, const char *path);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void stg_run_free(struct StgRun *run);

/**
 * Loads a network checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum StgStatus stg_network_load(const char *path, struct StgNetwork **out);

/**
 * Evaluates the network on `input_len` inputs, writing `output_len`
 * action values.
 *
 * # Safety
 * `input` and `output` must point to arrays of the given lengths.
 */
enum StgStatus stg_network_forward(const struct StgNetwork *network,
                                   const double *input,
                                   size_t input_len,
                                   double *output,
                                   size_t output_len);

/**
 * # Safety
 * `network` must be null or a handle not yet freed.
 */
void stg_network_free(struct StgNetwork *network);

/**
 * Parses a forest from its text serialization.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum StgStatus stg_forest_from_text(const char *source, struct StgForest **out);

/**
 * Majority vote on a 10-value state. `class` receives 0 or 1 and `votes`
 * the share of trees voting 1.
 *
 * # Safety
 * `state` must point to `state_len` values; `class` and `votes` must be
 * writable.
 */
enum StgStatus stg_forest_predict(const struct StgForest *forest,
                                  const double *state,
                                  size_t state_len,
                                  uint8_t *class_,
                                  double *votes);

/**
 * # Safety
 * `forest` must be null or a handle not yet freed.
 */
void stg_forest_free(struct StgForest *forest);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STIGMERGY_H */
