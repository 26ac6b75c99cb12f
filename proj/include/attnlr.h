#ifndef ATTNLR_H
#define ATTNLR_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define ATTNLR_API __declspec(dllexport)
#else
#define ATTNLR_API __attribute__((visibility("default")))
#endif

typedef enum attnlr_status {
  ATTNLR_OK = 0,
  ATTNLR_E_INVALID_INPUT = 1,
  ATTNLR_E_DOMAIN = 2,
  ATTNLR_E_DIM_MISMATCH = 3,
  ATTNLR_E_SINGULAR = 4,
  ATTNLR_E_EMPTY_ACCUMULATOR = 5,
  ATTNLR_E_DIVERGENCE = 6,
  ATTNLR_E_FORMAT = 7,
  ATTNLR_E_IO = 8,
  ATTNLR_E_CONFIG = 9,
  ATTNLR_E_INTERNAL = 99
} attnlr_status;

/* A pipeline session holds command arguments and the result of the last
   command. Sessions are not shared between threads. */
typedef struct attnlr_session attnlr_session;

ATTNLR_API const char* attnlr_version(void);

/* Category name of a status, e.g. "empty_accumulator". */
ATTNLR_API const char* attnlr_status_name(attnlr_status status);

/* Message of the most recent failure on the calling thread; "" if none. */
ATTNLR_API const char* attnlr_last_error(void);

ATTNLR_API size_t attnlr_command_count(void);
ATTNLR_API const char* attnlr_command_name(size_t index);

ATTNLR_API attnlr_status attnlr_session_create(attnlr_session** out);
ATTNLR_API void attnlr_session_destroy(attnlr_session* session);

/* Sets one argument. Keys: config, seed, out, k (comma separated list),
   scope, mode, regime, checkpoint, dump, n, d. A NULL value unsets it. */
ATTNLR_API attnlr_status attnlr_session_set(attnlr_session* session, const char* key, const char* value);
ATTNLR_API void attnlr_session_clear(attnlr_session* session);

ATTNLR_API attnlr_status attnlr_run(attnlr_session* session, const char* command);

/* Results of the last successful attnlr_run. Strings stay valid until the
   next run, clear or destroy. */
ATTNLR_API const char* attnlr_result_text(const attnlr_session* session);
ATTNLR_API size_t attnlr_result_output_count(const attnlr_session* session);
ATTNLR_API const char* attnlr_result_output(const attnlr_session* session, size_t index);

/* Attention-score FLOPs of partial computation relative to exact, as a
   reduced fraction and a double. per_query selects per-query mode. */
ATTNLR_API attnlr_status attnlr_flops_ratio(uint64_t n, uint64_t d, uint64_t k, int per_query, uint64_t* num,
                                            uint64_t* den, double* ratio);

#ifdef __cplusplus
}
#endif

#endif
