#ifndef ADVDIFF_H
#define ADVDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdvdiffStatus {
  ADVDIFF_STATUS_OK = 0,
  ADVDIFF_STATUS_NULL_POINTER = 1,
  ADVDIFF_STATUS_INVALID_UTF8 = 2,
  ADVDIFF_STATUS_INVALID_ARGUMENT = 3,
  ADVDIFF_STATUS_SHAPE = 4,
  ADVDIFF_STATUS_NUMERIC = 5,
  ADVDIFF_STATUS_NON_FINITE = 6,
  ADVDIFF_STATUS_MODEL_INVALID = 7,
  ADVDIFF_STATUS_FORMAT = 8,
  ADVDIFF_STATUS_MISSING_FILE = 9,
  ADVDIFF_STATUS_IO = 10,
  ADVDIFF_STATUS_MANIFEST = 11,
  ADVDIFF_STATUS_NOT_FOUND = 12,
  ADVDIFF_STATUS_BUFFER_TOO_SMALL = 13,
  ADVDIFF_STATUS_PANIC = 14,
} AdvdiffStatus;

typedef struct AdvdiffDenoiser AdvdiffDenoiser;

typedef struct AdvdiffManifest AdvdiffManifest;

typedef struct AdvdiffReport AdvdiffReport;

// A locked run directory and its manifest.
typedef struct AdvdiffRun AdvdiffRun;

typedef struct AdvdiffTrajectory AdvdiffTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message, NUL-terminated, into
// `buf`. Returns the full message length excluding the terminator; 0 when
// no error has been recorded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t advdiff_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *advdiff_version(void);

// Creates a manifest with default values.
struct AdvdiffManifest *advdiff_manifest_new(void);

// Parses a manifest file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AdvdiffStatus advdiff_manifest_load(const char *path, struct AdvdiffManifest **out);

// Sets one `key` to `value` using manifest syntax.
//
// # Safety
// `m` must come from this library; strings must be NUL-terminated.
enum AdvdiffStatus advdiff_manifest_set(struct AdvdiffManifest *m,
                                        const char *key,
                                        const char *value);

// Copies the canonical text of the manifest, NUL-terminated, into `buf`.
// `*written` always receives the text length; a buffer of `len <= length`
// fails with `BUFFER_TOO_SMALL`.
//
// # Safety
// `m` must come from this library; `buf` must be null or hold `len` bytes;
// `written` must be writable.
enum AdvdiffStatus advdiff_manifest_text(const struct AdvdiffManifest *m,
                                         char *buf,
                                         size_t len,
                                         size_t *written);

// # Safety
// `m` must be null or come from this library, and not be used afterwards.
void advdiff_manifest_free(struct AdvdiffManifest *m);

// Opens (and locks) a run directory. The manifest is copied.
//
// # Safety
// `m` must come from this library; `dir` must be NUL-terminated; `out`
// must be writable.
enum AdvdiffStatus advdiff_run_open(const struct AdvdiffManifest *m,
                                    const char *dir,
                                    struct AdvdiffRun **out);

// Runs every stage up to evaluation, reusing persisted stages.
//
// # Safety
// `run` must come from this library; `out` must be writable.
enum AdvdiffStatus advdiff_run_all(struct AdvdiffRun *run, struct AdvdiffReport **out);

// Releases the run and its directory lock.
//
// # Safety
// `run` must be null or come from this library, and not be used afterwards.
void advdiff_run_free(struct AdvdiffRun *run);

// Looks up a value of the evaluation summary, e.g. metric `asr_adv` for
// model `embedder_0`, or `psnr_mean` for model `all`.
//
// # Safety
// `r` must come from this library; strings must be NUL-terminated; `value`
// must be writable.
enum AdvdiffStatus advdiff_report_metric(const struct AdvdiffReport *r,
                                         const char *metric,
                                         const char *model,
                                         double *value);

// # Safety
// `r` must be null or come from this library, and not be used afterwards.
void advdiff_report_free(struct AdvdiffReport *r);

// Creates a randomly initialised denoiser for `height`×`width` latents.
//
// # Safety
// `out` must be writable.
enum AdvdiffStatus advdiff_denoiser_new(size_t height,
                                        size_t width,
                                        size_t patch,
                                        uint64_t seed,
                                        struct AdvdiffDenoiser **out);

// Loads a denoiser checkpoint.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum AdvdiffStatus advdiff_denoiser_load(const char *path, struct AdvdiffDenoiser **out);

// # Safety
// `d` must be null or come from this library, and not be used afterwards.
void advdiff_denoiser_free(struct AdvdiffDenoiser *d);

// Inverts `x0` over the step-scaled linear schedule with `steps` steps.
//
// # Safety
// `d` must come from this library; `x0` must hold `height*width` doubles;
// `out` must be writable.
enum AdvdiffStatus advdiff_invert(const struct AdvdiffDenoiser *d,
                                  const double *x0,
                                  size_t height,
                                  size_t width,
                                  size_t steps,
                                  uint64_t seed,
                                  struct AdvdiffTrajectory **out);

// Replays the stored noise maps from `x_T` and writes `x_0` to `x0_out`.
//
// # Safety
// Handles must come from this library; `x0_out` must hold `len` doubles.
enum AdvdiffStatus advdiff_reconstruct(const struct AdvdiffTrajectory *traj,
                                       const struct AdvdiffDenoiser *d,
                                       double *x0_out,
                                       size_t len);

// # Safety
// `t` must be null or come from this library, and not be used afterwards.
void advdiff_trajectory_free(struct AdvdiffTrajectory *t);

// Ensemble weights `softmax(1 - scores)` written to `weights_out`.
//
// # Safety
// `scores` and `weights_out` must each hold `n` doubles.
enum AdvdiffStatus advdiff_update_weights(const double *scores, size_t n, double *weights_out);

// PSNR (peak 1) and SSIM of two images in `[0, 1]`. Identical images give
// an infinite PSNR.
//
// # Safety
// `a` and `b` must hold `height*width` doubles; outputs must be writable.
enum AdvdiffStatus advdiff_image_quality(const double *a,
                                         const double *b,
                                         size_t height,
                                         size_t width,
                                         double *psnr_out,
                                         double *ssim_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVDIFF_H */
