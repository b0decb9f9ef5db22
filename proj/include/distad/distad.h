#ifndef DISTAD_DISTAD_H
#define DISTAD_DISTAD_H

/* Stable C interface to the distributed AD engine. All handles are opaque;
 * every call that can fail returns a distad_status and leaves a message for
 * distad_last_error() on the calling thread. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DISTAD_API __declspec(dllexport)
#else
#define DISTAD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum distad_status {
    DISTAD_OK = 0,
    DISTAD_ERR_INVALID_ARGUMENT = 1,
    DISTAD_ERR_PROTOCOL = 2,
    DISTAD_ERR_DEADLOCK = 3,
    DISTAD_ERR_SOLVER = 4,
    DISTAD_ERR_IO = 5,
    DISTAD_ERR_CHECK_FAILED = 6,
    DISTAD_ERR_INTERNAL = 7
} distad_status;

typedef struct distad_config distad_config;
typedef struct distad_result distad_result;

DISTAD_API const char* distad_version(void);
DISTAD_API const char* distad_status_string(distad_status status);
/* Message of the last failed call on this thread; "" if none. */
DISTAD_API const char* distad_last_error(void);

DISTAD_API distad_status distad_config_create(distad_config** out);
DISTAD_API void distad_config_destroy(distad_config* config);
/* Keys: ranks, nx, ny, grid, px, py, rank_grid, steps, tol, seed,
 * obs_fraction, maxiter, out, checkpoint_every, sampling, kappa_init, invert,
 * fault_op, watchdog_ms, bench_repeats, history, c_max, cfl, velocity,
 * source_amplitude. */
DISTAD_API distad_status distad_config_set(distad_config* config, const char* key, const char* value);
/* Copies the value (NUL-terminated) into buf. If it does not fit, returns
 * DISTAD_ERR_INVALID_ARGUMENT; *needed (optional) always receives the length
 * including the terminator. */
DISTAD_API distad_status distad_config_get(const distad_config* config, const char* key, char* buf, size_t size,
                                           size_t* needed);
/* key=value lines, '#' comments. */
DISTAD_API distad_status distad_config_load(distad_config* config, const char* path);
DISTAD_API distad_status distad_config_validate(const distad_config* config, const char* command);

/* command: "gradcheck", "poisson", "wave" or "bench". On success or on
 * DISTAD_ERR_CHECK_FAILED a result is stored in *out and must be destroyed. */
DISTAD_API distad_status distad_run(const distad_config* config, const char* command, distad_result** out);

DISTAD_API int distad_result_passed(const distad_result* result);
DISTAD_API const char* distad_result_summary(const distad_result* result);
DISTAD_API size_t distad_result_metric_count(const distad_result* result);
DISTAD_API const char* distad_result_metric_name(const distad_result* result, size_t index);
DISTAD_API distad_status distad_result_metric(const distad_result* result, const char* name, double* value);
DISTAD_API size_t distad_result_file_count(const distad_result* result);
DISTAD_API const char* distad_result_file(const distad_result* result, size_t index);
DISTAD_API void distad_result_destroy(distad_result* result);

/* L(theta) = sum_{r<ranks} theta^r evaluated on `ranks` ranks with theta
 * owned by rank 0. */
DISTAD_API distad_status distad_cubic_demo(int ranks, double theta, double* loss, double* gradient);

/* Number of deadlock-watchdog firings inside the library so far. */
DISTAD_API uint64_t distad_watchdog_fires(void);

#ifdef __cplusplus
}
#endif

#endif /* DISTAD_DISTAD_H */
