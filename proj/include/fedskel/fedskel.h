#ifndef FEDSKEL_FEDSKEL_H
#define FEDSKEL_FEDSKEL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define FSK_API __attribute__((visibility("default")))
#else
#define FSK_API
#endif

typedef enum fsk_status {
    FSK_OK = 0,
    FSK_ERR_CONFIG = 2,  /* bad config, bad argument or misuse */
    FSK_ERR_RUNTIME = 3, /* non-finite loss, protocol or data failure */
    FSK_ERR_IO = 4
} fsk_status;

typedef struct fsk_experiment fsk_experiment;

/* Message of the last failed call on this thread; never NULL. */
FSK_API const char* fsk_last_error(void);

/* Parses and validates the config file. *out is NULL on failure. */
FSK_API fsk_status fsk_experiment_open(const char* config_path, fsk_experiment** out);
FSK_API void fsk_experiment_close(fsk_experiment* exp);

/* Overrides; the file on disk is never modified. */
FSK_API fsk_status fsk_experiment_set_seed(fsk_experiment* exp, uint64_t seed);
FSK_API fsk_status fsk_experiment_set_strategy(fsk_experiment* exp, const char* strategy);
FSK_API fsk_status fsk_experiment_set_rounds(fsk_experiment* exp, int rounds);
FSK_API fsk_status fsk_experiment_set_jobs(fsk_experiment* exp, int jobs);
FSK_API fsk_status fsk_experiment_set_output_dir(fsk_experiment* exp, const char* dir);
/* Progress lines go to stdout unless quiet is nonzero. */
FSK_API fsk_status fsk_experiment_set_quiet(fsk_experiment* exp, int quiet);

/* Writes the per-client data caches and manifest.json. */
FSK_API fsk_status fsk_generate(fsk_experiment* exp);
/* Runs the federation; writes metrics.csv, checkpoints/, cka_block*.csv. */
FSK_API fsk_status fsk_train(fsk_experiment* exp);
/* One run per strategy under <out>/<name>, summary in compare.csv/.txt. */
FSK_API fsk_status fsk_compare(fsk_experiment* exp, const char* const* strategies, size_t count);
/* Re-evaluates the checkpoints under the output directory into eval.csv. */
FSK_API fsk_status fsk_evaluate(fsk_experiment* exp);
/* CKA, coefficient drift and plot series under <run_dir>/analysis. */
FSK_API fsk_status fsk_analyze(const char* run_dir);
/* Same, for the output directory the experiment resolves to. */
FSK_API fsk_status fsk_experiment_analyze(fsk_experiment* exp);

/* Resolved output directory (--out, $FEDSKEL_OUT, output_dir). The pointer
   stays valid until the next call on this handle. NULL on error. */
FSK_API const char* fsk_experiment_output_dir(fsk_experiment* exp);

/* Mean final linear accuracy of the last fsk_train call, or -1. */
FSK_API double fsk_last_mean_accuracy(const fsk_experiment* exp);

#ifdef __cplusplus
}
#endif

#endif
