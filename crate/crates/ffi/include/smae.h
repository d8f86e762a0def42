#ifndef SMAE_H
#define SMAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmaeStatus {
  SMAE_STATUS_OK = 0,
  SMAE_STATUS_INVALID_ARGUMENT = 1,
  SMAE_STATUS_NUMERIC = 2,
  SMAE_STATUS_CONFIG = 3,
  SMAE_STATUS_IO = 4,
  SMAE_STATUS_INVARIANT = 5,
  SMAE_STATUS_NULL_POINTER = 6,
  SMAE_STATUS_PANIC = 7,
} SmaeStatus;

// A point cloud with optional per-point labels.
typedef struct SmaeCloud SmaeCloud;

// A pretrained model restored from a checkpoint.
typedef struct SmaeModel SmaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread. Valid until the next
// call into the library from the same thread.
const char *smae_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *smae_version(void);

// Creates a cloud from `n` packed `x y z` triples.
enum SmaeStatus smae_cloud_new(const double *xyz, size_t n, struct SmaeCloud **out);

// Generates a labelled synthetic shape: `kind` is one of plane, chair,
// table, rocket.
enum SmaeStatus smae_make_shape(const char *kind, size_t n, uint64_t seed, struct SmaeCloud **out);

// Reads a text cloud (`x y z [label]` per line).
enum SmaeStatus smae_cloud_read(const char *path, struct SmaeCloud **out);

void smae_cloud_free(struct SmaeCloud *cloud);

// Number of points, or 0 for a null handle.
size_t smae_cloud_len(const struct SmaeCloud *cloud);

// Copies the coordinates into `out`, which must hold `3 * len` doubles.
enum SmaeStatus smae_cloud_points(const struct SmaeCloud *cloud, double *out, size_t capacity);

// Copies per-point labels into `out` (`len` entries). Fails with
// `SMAE_STATUS_INVALID_ARGUMENT` for unlabelled clouds.
enum SmaeStatus smae_cloud_labels(const struct SmaeCloud *cloud, size_t *out, size_t capacity);

// Symmetric squared-L2 Chamfer distance.
enum SmaeStatus smae_chamfer(const struct SmaeCloud *a, const struct SmaeCloud *b, double *out);

// Farthest-point sampling of `count` indices starting at `start`.
enum SmaeStatus smae_fps(const struct SmaeCloud *cloud, size_t count, size_t start, size_t *out);

// `k` nearest neighbours of each center; writes `n_centers * k` indices,
// row by row.
enum SmaeStatus smae_knn(const struct SmaeCloud *cloud,
                         const size_t *centers,
                         size_t n_centers,
                         size_t k,
                         size_t *out);

// Component-aware mask over `g` tokens. Writes 1 (masked) or 0 per token.
enum SmaeStatus smae_csem_mask(const size_t *assignment,
                               size_t g,
                               size_t components,
                               double ratio,
                               uint64_t seed,
                               uint8_t *out);

// Loads a pretraining checkpoint; its embedded configuration defines the
// architecture.
enum SmaeStatus smae_model_load(const char *path, struct SmaeModel **out);

void smae_model_free(struct SmaeModel *model);

// Number of prototypes (possible component labels), or 0 for null.
size_t smae_model_prototypes(const struct SmaeModel *model);

// Labels every point of `cloud` with a component id in
// `[0, smae_model_prototypes)`; `out` holds `smae_cloud_len` entries.
enum SmaeStatus smae_export_groups(const struct SmaeModel *model,
                                   const struct SmaeCloud *cloud,
                                   size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMAE_H */
