#ifndef RGBDYN_RGBDYN_H
#define RGBDYN_RGBDYN_H

/* C interface to the rgbdyn engine. Every call returns a status code; on
 * failure rgbdyn_last_error() holds a message for the calling thread. Handles
 * are opaque and owned by the caller, who releases them with the matching
 * _free function. Paths are UTF-8. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define RGBDYN_API __declspec(dllexport)
#else
#define RGBDYN_API __attribute__((visibility("default")))
#endif

typedef enum rgbdyn_status {
  RGBDYN_OK = 0,
  RGBDYN_ERR_INTERNAL = 1,
  RGBDYN_ERR_VALIDATION = 2,
  RGBDYN_ERR_NUMERICAL = 3,
  RGBDYN_ERR_IO = 4,
  RGBDYN_ERR_MISSING_TENSOR = 5,
  RGBDYN_ERR_SHAPE_MISMATCH = 6,
  RGBDYN_ERR_DTYPE_MISMATCH = 7
} rgbdyn_status;

typedef struct rgbdyn_dataset rgbdyn_dataset;
typedef struct rgbdyn_model rgbdyn_model;

RGBDYN_API const char* rgbdyn_version(void);
/* Message of the last failed call on this thread; empty after a success. */
RGBDYN_API const char* rgbdyn_last_error(void);
/* Process exit code for a status: 0 success, 3 numerical, 2 otherwise. */
RGBDYN_API int rgbdyn_exit_code(rgbdyn_status status);

/* ---- datasets ---------------------------------------------------------- */

/* Renders `frames` frames of the scene described by the JSON file. */
RGBDYN_API rgbdyn_status rgbdyn_dataset_generate(const char* spec_path, int frames, uint64_t seed,
                                                 rgbdyn_dataset** out);
RGBDYN_API rgbdyn_status rgbdyn_dataset_read(const char* dir, rgbdyn_dataset** out);
RGBDYN_API rgbdyn_status rgbdyn_dataset_write(const rgbdyn_dataset* data, const char* dir);
RGBDYN_API void rgbdyn_dataset_free(rgbdyn_dataset* data);

/* Any output pointer may be NULL. */
RGBDYN_API rgbdyn_status rgbdyn_dataset_info(const rgbdyn_dataset* data, int* height, int* width,
                                             int* frames, int* action_dim);

/* Writes one plane as a binary PPM. `what` is one of "rgb", "depth",
 * "optical_flow" (predicted), "gt_optical_flow"; flow is colour-coded by
 * direction and magnitude. */
RGBDYN_API rgbdyn_status rgbdyn_export_ppm(const rgbdyn_dataset* data, const char* what, int frame,
                                           const char* path);

/* ---- models ------------------------------------------------------------ */

/* Fits the pair (t, t+1) when t >= 0. With t < 0 every transition of the
 * dataset is fitted and the twists are regressed on the recorded actions,
 * giving an action-conditioned model. `weights` is a JSON file path or eight
 * inline numbers "l1,l2,l3,l4,l5,l6,alpha,knn_k"; NULL selects defaults. */
RGBDYN_API rgbdyn_status rgbdyn_fit(const rgbdyn_dataset* data, int t, int k, const char* weights,
                                    int steps, double lr, uint64_t seed, rgbdyn_model** out);
RGBDYN_API rgbdyn_status rgbdyn_model_read(const char* path, rgbdyn_model** out);
RGBDYN_API rgbdyn_status rgbdyn_model_write(const rgbdyn_model* model, const char* path);
RGBDYN_API void rgbdyn_model_free(rgbdyn_model* model);
/* 1 for an action-conditioned model, 0 for a single-pair model. */
RGBDYN_API int rgbdyn_model_is_action(const rgbdyn_model* model);

/* Rolls the model forward `horizon` steps from the frame the model was fitted
 * on. Action models read their actions from the dataset when
 * `actions_from_data` is non-zero and otherwise use zero actions. */
RGBDYN_API rgbdyn_status rgbdyn_predict(const rgbdyn_dataset* data, const rgbdyn_model* model,
                                        int actions_from_data, int horizon, rgbdyn_dataset** out);

/* Per-frame metrics of pred against gt written as CSV. Frames are matched by
 * absolute index, so a prediction that starts after its context frame is
 * compared with the same frames of the source sequence. */
RGBDYN_API rgbdyn_status rgbdyn_evaluate(const rgbdyn_dataset* pred, const rgbdyn_dataset* gt,
                                         const char* report_csv);

/* ---- planning ---------------------------------------------------------- */

/* Closed-loop servoing on the dataset's simulator scene with an action
 * model. `icem_path` may be NULL for the default parameters. */
RGBDYN_API rgbdyn_status rgbdyn_plan(const rgbdyn_dataset* data, const rgbdyn_model* model,
                                     const double goal[3], int budget, const char* icem_path,
                                     uint64_t seed, const char* report_csv);

/* ---- hyperparameter search --------------------------------------------- */

RGBDYN_API rgbdyn_status rgbdyn_hpo(const rgbdyn_dataset* data, const char* space_path,
                                    const int* ladder, size_t ladder_len, double eta, int workers,
                                    int max_trials, uint64_t seed, const char* log_path);
/* Budget-correlation table of a trial log as CSV; NULL csv_path = stdout. */
RGBDYN_API rgbdyn_status rgbdyn_hpo_report(const char* log_path, const char* csv_path);

#ifdef __cplusplus
}
#endif

#endif
