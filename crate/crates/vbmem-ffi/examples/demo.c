/* Minimal C consumer: sample a synthetic episode, write it into memory,
 * compare against the online least-squares baseline, and generate a few
 * codes from the posterior. Build (from the workspace root):
 *
 *   cargo build -p vbmem-ffi
 *   cc crates/vbmem-ffi/examples/demo.c -Icrates/vbmem-ffi/include \
 *      -Ltarget/debug -lvbmem_ffi -lm -o demo
 *   LD_LIBRARY_PATH=target/debug ./demo
 */
#include <stdio.h>
#include <stdlib.h>

#include "vbmem.h"

static int fail(const char *where) {
    fprintf(stderr, "%s failed: %s\n", where, vbm_last_error_message());
    return 1;
}

int main(void) {
    VbmEpisode *episode = NULL;
    VbmSpec *spec = NULL;
    if (vbm_episode_synth(16, 8, 12, 1.0, 1.0, 42, &episode, &spec) != VbmStatus_Ok)
        return fail("vbm_episode_synth");

    VbmResult *posterior = NULL;
    if (vbm_write_episode(spec, episode, 30, VbmInit_Prior, 0, true, &posterior) != VbmStatus_Ok)
        return fail("vbm_write_episode");

    double elbo = 0.0;
    if (vbm_result_final_elbo(posterior, &elbo) != VbmStatus_Ok)
        return fail("vbm_result_final_elbo");

    VbmResult *baseline = NULL;
    if (vbm_baseline_write(spec, episode, VbmBaseline_OnlineNonIterative, 0, &baseline) !=
        VbmStatus_Ok)
        return fail("vbm_baseline_write");
    double baseline_elbo = 0.0;
    if (vbm_result_final_elbo(baseline, &baseline_elbo) != VbmStatus_Ok)
        return fail("vbm_result_final_elbo (baseline)");

    VbmElboBreakdown breakdown;
    if (vbm_elbo_closed_form(episode, posterior, &breakdown) != VbmStatus_Ok)
        return fail("vbm_elbo_closed_form");

    char *samples = NULL;
    if (vbm_generate_direct(posterior, 3, 7, &samples) != VbmStatus_Ok)
        return fail("vbm_generate_direct");

    printf("elbo=%.6f baseline=%.6f memory_kl=%.6f samples=%.24s...\n", elbo, baseline_elbo,
           breakdown.memory_kl, samples);
    if (elbo < baseline_elbo) {
        fprintf(stderr, "coordinate ascent should not lose to the online baseline\n");
        return 1;
    }
    printf("DEMO OK\n");

    vbm_string_free(samples);
    vbm_result_free(baseline);
    vbm_result_free(posterior);
    vbm_episode_free(episode);
    vbm_spec_free(spec);
    return 0;
}
