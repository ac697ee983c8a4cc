/* C interface to the vbmem episodic memory library. */

#ifndef VBMEM_H
#define VBMEM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum VbmStatus {
  VbmStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  VbmStatus_NullPointer = 1,
  /**
   * A precondition on the inputs was violated.
   */
  VbmStatus_InvalidArgument = 2,
  /**
   * A JSON document could not be parsed or did not match its schema.
   */
  VbmStatus_Parse = 3,
  /**
   * An I/O failure surfaced from the library.
   */
  VbmStatus_Io = 4,
  /**
   * The library panicked; this is a bug worth reporting.
   */
  VbmStatus_Panic = 5,
} VbmStatus;

/**
 * Model variant selector for [`vbm_spec_create`].
 */
typedef enum VbmVariant {
  VbmVariant_Gaussian = 0,
  VbmVariant_Categorical = 1,
  VbmVariant_MeanShifted = 2,
  VbmVariant_Mixture = 3,
  VbmVariant_Tree = 4,
} VbmVariant;

/**
 * Memory initialization mode for [`vbm_write_episode`].
 */
typedef enum VbmInit {
  VbmInit_Prior = 0,
  VbmInit_Random = 1,
  VbmInit_DataDependent = 2,
} VbmInit;

/**
 * Baseline selector for [`vbm_baseline_write`].
 */
typedef enum VbmBaseline {
  VbmBaseline_OnlineNonIterative = 0,
  VbmBaseline_BatchedIterative = 1,
} VbmBaseline;

/**
 * Opaque episode handle.
 */
typedef struct VbmEpisode VbmEpisode;

/**
 * Opaque inference-result handle (the posterior plus the spec it was
 * produced under, so it is self-describing).
 */
typedef struct VbmResult VbmResult;

/**
 * Opaque model specification handle.
 */
typedef struct VbmSpec VbmSpec;

/**
 * Additive pieces of the evidence lower bound.
 */
typedef struct VbmElboBreakdown {
  double recon;
  double code_kl;
  double address_kl;
  double memory_kl;
  double total;
} VbmElboBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *vbm_last_error_message(void);

/**
 * Frees a string returned by this library. Null is ignored.
 */
void vbm_string_free(char *s);

/**
 * Builds a spec with zero prior mean and identity covariances.
 * `clusters` is forced to 1 for the single-cluster variants and
 * `partitions` is forced to 1 for all but the tree variant.
 */
enum VbmStatus vbm_spec_create(enum VbmVariant variant,
                               uintptr_t memory_rows,
                               uintptr_t code_dim,
                               uintptr_t clusters,
                               uintptr_t partitions,
                               double sigma_z2,
                               struct VbmSpec **out);

/**
 * Parses a model-spec JSON document.
 */
enum VbmStatus vbm_spec_from_json(const char *json, struct VbmSpec **out);

/**
 * Serializes a spec to JSON (caller frees via [`vbm_string_free`]).
 */
enum VbmStatus vbm_spec_to_json(const struct VbmSpec *spec, char **out);

void vbm_spec_free(struct VbmSpec *spec);

/**
 * Parses an episode JSON document.
 */
enum VbmStatus vbm_episode_from_json(const char *json, struct VbmEpisode **out);

/**
 * Serializes an episode to JSON (caller frees via [`vbm_string_free`]).
 */
enum VbmStatus vbm_episode_to_json(const struct VbmEpisode *episode, char **out);

/**
 * Number of timesteps in an episode; zero for a null handle.
 */
uintptr_t vbm_episode_len(const struct VbmEpisode *episode);

void vbm_episode_free(struct VbmEpisode *episode);

/**
 * Samples a synthetic linear-Gaussian episode. On success, `out_episode`
 * receives the observed-mode episode and `out_spec` (optional, may be
 * null) receives a gaussian-address spec carrying the prior the episode
 * was generated under, ready for [`vbm_write_episode`].
 */
enum VbmStatus vbm_episode_synth(uintptr_t timesteps,
                                 uintptr_t memory_rows,
                                 uintptr_t code_dim,
                                 double sigma_z2,
                                 double prior_mean_scale,
                                 uint64_t seed,
                                 struct VbmEpisode **out_episode,
                                 struct VbmSpec **out_spec);

/**
 * Runs coordinate-ascent inference over an episode.
 */
enum VbmStatus vbm_write_episode(const struct VbmSpec *spec,
                                 const struct VbmEpisode *episode,
                                 uintptr_t sweeps,
                                 enum VbmInit init,
                                 uint64_t seed,
                                 bool record_trace,
                                 struct VbmResult **out);

/**
 * Runs one of the least-squares baselines (gaussian-address specs only).
 * `iterations` applies to the batched baseline and is ignored otherwise.
 */
enum VbmStatus vbm_baseline_write(const struct VbmSpec *spec,
                                  const struct VbmEpisode *episode,
                                  enum VbmBaseline kind,
                                  uintptr_t iterations,
                                  struct VbmResult **out);

/**
 * Last recorded bound value; an error if the run recorded no trace.
 */
enum VbmStatus vbm_result_final_elbo(const struct VbmResult *result, double *out);

/**
 * Exact bound breakdown of a result against an episode.
 */
enum VbmStatus vbm_elbo_closed_form(const struct VbmEpisode *episode,
                                    const struct VbmResult *result,
                                    struct VbmElboBreakdown *out);

/**
 * Monte Carlo bound estimate with standard error.
 */
enum VbmStatus vbm_elbo_monte_carlo(const struct VbmEpisode *episode,
                                    const struct VbmResult *result,
                                    uintptr_t n_samples,
                                    uint64_t seed,
                                    double *out_estimate,
                                    double *out_std_error);

/**
 * Serializes a result (including its spec) to JSON.
 */
enum VbmStatus vbm_result_to_json(const struct VbmResult *result, char **out);

/**
 * Parses a result JSON document produced by [`vbm_result_to_json`] or the
 * CLI `infer` subcommand.
 */
enum VbmStatus vbm_result_from_json(const char *json, struct VbmResult **out);

void vbm_result_free(struct VbmResult *result);

/**
 * Draws `n` observations directly from a written memory; `out` receives a
 * JSON array of code vectors.
 */
enum VbmStatus vbm_generate_direct(const struct VbmResult *result,
                                   uintptr_t n,
                                   uint64_t seed,
                                   char **out);

/**
 * Runs `steps` iterations of the read chain; `out` receives a JSON array
 * of code vectors.
 */
enum VbmStatus vbm_generate_iterative(const struct VbmResult *result,
                                      uintptr_t steps,
                                      uint64_t seed,
                                      char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VBMEM_H */
