#ifndef KENAS_H
#define KENAS_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KenasStatus {
  KENAS_STATUS_OK = 0,
  KENAS_STATUS_IO = 1,
  KENAS_STATUS_JSON = 2,
  KENAS_STATUS_GRAPH = 3,
  KENAS_STATUS_RULES = 4,
  KENAS_STATUS_INVALID_ARGUMENT = 5,
  KENAS_STATUS_DATA = 6,
  KENAS_STATUS_DIMENSION = 7,
  KENAS_STATUS_BUDGET = 8,
  KENAS_STATUS_SPACE = 9,
  KENAS_STATUS_CHECKPOINT = 10,
  KENAS_STATUS_NULL_POINTER = 11,
  KENAS_STATUS_UTF8 = 12,
  KENAS_STATUS_PANIC = 13,
} KenasStatus;

// Objective selector for [`kenas_objective`].
typedef enum KenasObjective {
  KENAS_OBJECTIVE_PROPOSED = 0,
  KENAS_OBJECTIVE_CONVENTIONAL = 1,
  KENAS_OBJECTIVE_ADAPTED_ETNAS = 2,
} KenasObjective;

// Operator graph with inferred shapes.
typedef struct KenasGraph KenasGraph;

// Platform latency and power profile.
typedef struct KenasProfile KenasProfile;

// Ordered list of fusion rules.
typedef struct KenasRules KenasRules;

// Architecture search space.
typedef struct KenasSpace KenasSpace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *kenas_version(void);

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *kenas_last_error(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from a kenas function and not be freed twice.
void kenas_string_free(char *s);

// Parses a graph from JSON and infers missing shapes.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum KenasStatus kenas_graph_from_json(const char *json, struct KenasGraph **out);

// Loads a graph file and infers missing shapes.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum KenasStatus kenas_graph_load(const char *path, struct KenasGraph **out);

// Number of operator nodes, boundary nodes included.
//
// # Safety
// `graph` must be a live handle; `out` must be writable.
enum KenasStatus kenas_graph_node_count(const struct KenasGraph *graph, size_t *out);

// # Safety
// `graph` must be null or a handle not yet freed.
void kenas_graph_free(struct KenasGraph *graph);

// Built-in profile by name: `synthetic-edge` or `synthetic-workstation`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum KenasStatus kenas_profile_builtin(const char *name, struct KenasProfile **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum KenasStatus kenas_profile_load(const char *path, struct KenasProfile **out);

// Copy of `profile` with every latency multiplied by `factor`.
//
// # Safety
// `profile` must be a live handle; `out` must be writable.
enum KenasStatus kenas_profile_scale_latency(const struct KenasProfile *profile,
                                             double factor,
                                             struct KenasProfile **out);

// # Safety
// `profile` must be null or a handle not yet freed.
void kenas_profile_free(struct KenasProfile *profile);

// Parses rules in the text format, one pattern per line.
//
// # Safety
// `source` must be a NUL-terminated string; `out` must be writable.
enum KenasStatus kenas_rules_parse(const char *source, struct KenasRules **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum KenasStatus kenas_rules_load(const char *path, struct KenasRules **out);

// # Safety
// `rules` must be null or a handle not yet freed.
void kenas_rules_free(struct KenasRules *rules);

// Predicted inference energy in mJ. Null `rules` uses the built-in set.
//
// # Safety
// `graph` and `profile` must be live handles; `rules` null or live;
// `out_mj` writable.
enum KenasStatus kenas_estimate_energy(const struct KenasGraph *graph,
                                       const struct KenasRules *rules,
                                       const struct KenasProfile *profile,
                                       uint64_t batch,
                                       double *out_mj);

// Full per-kernel estimate as JSON; free with [`kenas_string_free`].
//
// # Safety
// As [`kenas_estimate_energy`], with `out` writable.
enum KenasStatus kenas_estimate_json(const struct KenasGraph *graph,
                                     const struct KenasRules *rules,
                                     const struct KenasProfile *profile,
                                     uint64_t batch,
                                     char **out);

// Summed kernel power in W.
//
// # Safety
// As [`kenas_estimate_energy`].
enum KenasStatus kenas_total_power(const struct KenasGraph *graph,
                                   const struct KenasRules *rules,
                                   const struct KenasProfile *profile,
                                   uint64_t batch,
                                   double *out_w);

// Fused and merged kernel plan as JSON; free with [`kenas_string_free`].
//
// # Safety
// `graph` must be a live handle; `rules` null or live; `out` writable.
enum KenasStatus kenas_detect_kernels_json(const struct KenasGraph *graph,
                                           const struct KenasRules *rules,
                                           size_t max_parallel,
                                           char **out);

// Search objective with the default exponents (-2 below target, -0.5 above).
//
// # Safety
// `out` must be writable.
enum KenasStatus kenas_objective(double measure,
                                 double accuracy,
                                 double target,
                                 enum KenasObjective kind,
                                 double *out);

// Same as [`kenas_objective`] with explicit exponents.
//
// # Safety
// `out` must be writable.
enum KenasStatus kenas_objective_with(double measure,
                                      double accuracy,
                                      double target,
                                      double alpha,
                                      double beta,
                                      double *out);

// Percent energy saving of `new_mj` against `baseline_mj`, one decimal.
//
// # Safety
// `out` must be writable.
enum KenasStatus kenas_energy_saving(double baseline_mj, double new_mj, double *out);

// Built-in space for `family` (`mlp`, `resnet`, `fttransformer`).
//
// # Safety
// `family` must be a NUL-terminated string; `out` writable.
enum KenasStatus kenas_space_builtin(const char *family,
                                     uint64_t input_dim,
                                     uint64_t output_dim,
                                     struct KenasSpace **out);

// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum KenasStatus kenas_space_load(const char *path, struct KenasSpace **out);

// Lowers an architecture spec given as JSON into a graph handle.
//
// # Safety
// `space` must be a live handle; `spec_json` NUL-terminated; `out` writable.
enum KenasStatus kenas_space_lower(const struct KenasSpace *space,
                                   const char *spec_json,
                                   struct KenasGraph **out);

// # Safety
// `space` must be null or a handle not yet freed.
void kenas_space_free(struct KenasSpace *space);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KENAS_H */
