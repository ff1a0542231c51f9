#ifndef ZAPSIM_H
#define ZAPSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ZsStatus {
  ZS_STATUS_OK = 0,
  ZS_STATUS_NULL_ARGUMENT = 1,
  ZS_STATUS_INVALID_UTF8 = 2,
  ZS_STATUS_CONFIG = 3,
  ZS_STATUS_PARSE = 4,
  ZS_STATUS_RUNTIME = 5,
  ZS_STATUS_IO = 6,
  ZS_STATUS_PANIC = 7,
} ZsStatus;

// Scenario and pipeline configuration.
typedef struct ZsConfig ZsConfig;

// Outcome of one simulated episode.
typedef struct ZsEpisode ZsEpisode;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread. Valid until the next
// failing call on the same thread; never null.
const char *zs_last_error(void);

// Library version as a static string.
const char *zs_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void zs_string_free(char *s);

// Default configuration.
struct ZsConfig *zs_config_new(void);

// Loads a `key = value` config file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum ZsStatus zs_config_load(const char *path, struct ZsConfig **out);

// Parses config text.
//
// # Safety
// `source` must be a NUL-terminated string and `out` writable.
enum ZsStatus zs_config_parse(const char *source, struct ZsConfig **out);

// Sets one key, e.g. `pipeline.dwell` to `"0.25"`. The configuration is
// left unchanged when the result would be invalid.
//
// # Safety
// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
enum ZsStatus zs_config_set(struct ZsConfig *cfg, const char *key, const char *value);

// Current value of a key as text. `*out` is set to null when the key does
// not apply to this configuration.
//
// # Safety
// `cfg` must be a live handle, `key` NUL-terminated and `out` writable.
enum ZsStatus zs_config_get(const struct ZsConfig *cfg, const char *key, char **out);

// Normalised config file text.
//
// # Safety
// `cfg` must be a live handle and `out` writable.
enum ZsStatus zs_config_to_string(const struct ZsConfig *cfg, char **out);

// # Safety
// `cfg` must come from this library and not be freed twice. Null is ignored.
void zs_config_free(struct ZsConfig *cfg);

// Runs one episode.
//
// # Safety
// `cfg` must be a live handle and `out` writable.
enum ZsStatus zs_episode_run(const struct ZsConfig *cfg, uint64_t seed, struct ZsEpisode **out);

// Mosquitoes killed. Zero for a null handle.
//
// # Safety
// `ep` must be a live handle or null.
uint32_t zs_episode_kills(const struct ZsEpisode *ep);

// Completed laser dwells. Zero for a null handle.
//
// # Safety
// `ep` must be a live handle or null.
uint32_t zs_episode_fires(const struct ZsEpisode *ep);

// # Safety
// `ep` must be a live handle or null.
uint32_t zs_episode_lost_track_events(const struct ZsEpisode *ep);

// Writes the time of the first kill and returns true, or returns false
// when nothing was killed.
//
// # Safety
// `ep` must be a live handle or null; `out` writable or null.
bool zs_episode_first_kill(const struct ZsEpisode *ep, double *out);

// Fire events as CSV.
//
// # Safety
// `ep` must be a live handle and `out` writable.
enum ZsStatus zs_episode_fires_csv(const struct ZsEpisode *ep, char **out);

// # Safety
// `ep` must come from this library and not be freed twice. Null is ignored.
void zs_episode_free(struct ZsEpisode *ep);

// Runs the full method x prediction-mode grid and returns the bench CSV.
//
// # Safety
// `cfg` must be a live handle and `out` writable.
enum ZsStatus zs_bench_csv(const struct ZsConfig *cfg,
                           uint32_t trials,
                           uint64_t seed_base,
                           char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZAPSIM_H */
