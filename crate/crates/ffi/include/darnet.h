#ifndef DARNET_H
#define DARNET_H

#include <stddef.h>
#include <stdint.h>

// Result codes. Zero is success.
typedef enum DarnetStatus {
  DARNET_STATUS_OK = 0,
  DARNET_STATUS_NULL_POINTER = 1,
  DARNET_STATUS_INVALID_ARGUMENT = 2,
  DARNET_STATUS_SHAPE_MISMATCH = 3,
  DARNET_STATUS_IO = 4,
  DARNET_STATUS_MALFORMED_FILE = 5,
  DARNET_STATUS_DEGENERATE_INPUT = 6,
  DARNET_STATUS_INVALID_CONFIG = 7,
  DARNET_STATUS_PANIC = 8,
  DARNET_STATUS_INTERNAL = 9,
} DarnetStatus;

// A C×H×W feature map.
typedef struct DarnetFeatureMap DarnetFeatureMap;

// Model with its configuration.
typedef struct DarnetModel DarnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or "" after a success.
// The pointer stays valid until the next call into this library.
const char *darnet_last_error_message(void);

// Static, nul-terminated library version.
const char *darnet_version(void);

// Builds a model from a TOML configuration file, loading
// `eval.checkpoint` when set.
//
// # Safety
// `config_path` must be a nul-terminated string and `out` a valid pointer.
enum DarnetStatus darnet_model_from_config_file(const char *config_path, struct DarnetModel **out);

// Builds a model from TOML text; an empty string gives the defaults.
//
// # Safety
// `toml` must be a nul-terminated string and `out` a valid pointer.
enum DarnetStatus darnet_model_from_config_str(const char *toml, struct DarnetModel **out);

// # Safety
// `model` must come from this library and not be used afterwards. Null is ignored.
void darnet_model_free(struct DarnetModel *model);

// # Safety
// `model` must be a live handle and `path` a nul-terminated string.
enum DarnetStatus darnet_model_load_checkpoint(struct DarnetModel *model, const char *path);

// # Safety
// `model` must be a live handle and `path` a nul-terminated string.
enum DarnetStatus darnet_model_save_checkpoint(const struct DarnetModel *model, const char *path);

// Sets the ablation flags used by [`darnet_segment`], e.g. "sm,arsm,tta"
// or "baseline".
//
// # Safety
// `model` must be a live handle and `flags` a nul-terminated string.
enum DarnetStatus darnet_model_set_flags(struct DarnetModel *model, const char *flags);

// Number of feature channels the extractor produces.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum DarnetStatus darnet_model_feature_channels(const struct DarnetModel *model, size_t *out);

// Runs the extractor (inference mode) on one image.
//
// # Safety
// `image` must point to `height*width*3` doubles; `out` must be valid.
enum DarnetStatus darnet_model_extract(const struct DarnetModel *model,
                                       const double *image,
                                       size_t height,
                                       size_t width,
                                       struct DarnetFeatureMap **out);

// Segments one query from `k_shot` labeled supports of the same size.
//
// `support_images` holds `k_shot` images back to back and `support_masks`
// the matching masks. `out_mask` receives the binary prediction at image
// resolution; `out_fg`, when non-null, the foreground confidence. `seed`
// drives the test-time augmentations.
//
// # Safety
// All buffers must have the sizes stated above.
enum DarnetStatus darnet_segment(const struct DarnetModel *model,
                                 const double *support_images,
                                 const uint8_t *support_masks,
                                 size_t k_shot,
                                 const double *query_image,
                                 size_t height,
                                 size_t width,
                                 uint64_t seed,
                                 uint8_t *out_mask,
                                 double *out_fg);

// Copies a row-major C×H×W buffer into a new feature map.
//
// # Safety
// `data` must point to `channels*height*width` doubles; `out` must be valid.
enum DarnetStatus darnet_feature_map_new(const double *data,
                                         size_t channels,
                                         size_t height,
                                         size_t width,
                                         struct DarnetFeatureMap **out);

// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum DarnetStatus darnet_feature_map_load(const char *path, struct DarnetFeatureMap **out);

// # Safety
// `map` must be a live handle and `path` a nul-terminated string.
enum DarnetStatus darnet_feature_map_save(const struct DarnetFeatureMap *map, const char *path);

// # Safety
// `map` must be a live handle; each output pointer must be valid.
enum DarnetStatus darnet_feature_map_shape(const struct DarnetFeatureMap *map,
                                           size_t *channels,
                                           size_t *height,
                                           size_t *width);

// Copies the values out in C×H×W order. `len` must equal C·H·W.
//
// # Safety
// `out` must point to `len` writable doubles.
enum DarnetStatus darnet_feature_map_data(const struct DarnetFeatureMap *map,
                                          double *out,
                                          size_t len);

// # Safety
// `map` must come from this library and not be used afterwards. Null is ignored.
void darnet_feature_map_free(struct DarnetFeatureMap *map);

// Masked average pooling. `mask` is H×W at the map's resolution; `out`
// receives C values and `out_count` the number of masked pixels. An empty
// mask yields a zero vector and a count of zero.
//
// # Safety
// `mask` must hold H·W bytes and `out` C doubles.
enum DarnetStatus darnet_masked_average_pool(const struct DarnetFeatureMap *map,
                                             const uint8_t *mask,
                                             double *out,
                                             size_t *out_count);

// Cosine similarity of a C-vector with every pixel; `out` receives H·W values.
//
// # Safety
// `prototype` must hold `channels` doubles and `out` H·W doubles.
enum DarnetStatus darnet_cosine_map(const struct DarnetFeatureMap *map,
                                    const double *prototype,
                                    size_t channels,
                                    double *out);

// Adaptive threshold shift δ for one episode.
//
// # Safety
// `out_delta` must be a valid pointer.
enum DarnetStatus darnet_adaptive_delta(double fb_q,
                                        double fb_s,
                                        size_t sim_num,
                                        size_t union_num,
                                        double kappa,
                                        double lambda_mix,
                                        double *out_delta);

// IoU of two binary H×W masks; two empty masks score 1.
//
// # Safety
// `pred` and `gt` must each hold H·W bytes.
enum DarnetStatus darnet_iou(const uint8_t *pred,
                             const uint8_t *gt,
                             size_t height,
                             size_t width,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DARNET_H */
