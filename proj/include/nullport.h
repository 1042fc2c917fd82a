#ifndef NULLPORT_H
#define NULLPORT_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum nullport_status {
    NULLPORT_OK = 0,
    NULLPORT_ERR_RUNTIME = 1,
    NULLPORT_ERR_CONFIG = 2
} nullport_status;

const char* nullport_version(void);

/* An experiment handle owns one parsed JSON config plus run options. */
typedef struct nullport_experiment nullport_experiment;

/* Loads and validates a config file. NULL on failure; see
 * nullport_last_error for the reason. */
nullport_experiment* nullport_open(const char* config_path);
void nullport_close(nullport_experiment* exp);

void nullport_set_out_dir(nullport_experiment* exp, const char* dir);
/* Replaces the config's seed list with this single seed. */
void nullport_override_seed(nullport_experiment* exp, uint64_t seed);
void nullport_set_threads(nullport_experiment* exp, int threads);

nullport_status nullport_run_train(nullport_experiment* exp);
nullport_status nullport_run_bench_scaling(nullport_experiment* exp);
nullport_status nullport_run_error_control(nullport_experiment* exp);
nullport_status nullport_run_compare_baseline(nullport_experiment* exp);

/* Fully resolved configuration (defaults filled in) as a JSON string.
 * Free the result with nullport_string_free. */
char* nullport_manifest(const nullport_experiment* exp);
void nullport_string_free(char* s);

/* Message from the most recent failure on the calling thread; "" if none. */
const char* nullport_last_error(void);

#ifdef __cplusplus
}
#endif

#endif /* NULLPORT_H */
