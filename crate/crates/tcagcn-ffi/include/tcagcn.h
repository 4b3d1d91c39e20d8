/* C interface to the tcagcn skeleton-action-recognition library. */

#ifndef TCAGCN_H
#define TCAGCN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of one call. Anything but OK leaves a message readable through
 * `tcagcn_last_error` on the calling thread.
 */
typedef enum TcagcnStatus {
  TCAGCN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TCAGCN_STATUS_NULL_POINTER = 1,
  /**
   * Bad paths, shapes, encodings, or file contents.
   */
  TCAGCN_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The operating system refused a read or write.
   */
  TCAGCN_STATUS_IO = 3,
  /**
   * A result came out NaN or infinite.
   */
  TCAGCN_STATUS_NUMERICAL = 4,
  /**
   * An internal invariant broke; the library state is undefined.
   */
  TCAGCN_STATUS_PANIC = 5,
} TcagcnStatus;

/**
 * Input encodings accepted by `tcagcn_model_predict`. Passed as a plain
 * integer so out-of-range values can be rejected instead of being undefined
 * behavior.
 */
typedef enum TcagcnStream {
  TCAGCN_STREAM_JOINT = 0,
  TCAGCN_STREAM_BONE = 1,
  TCAGCN_STREAM_JOINT_MOTION = 2,
  TCAGCN_STREAM_BONE_MOTION = 3,
} TcagcnStream;

/**
 * A loaded model. Create with `tcagcn_model_load`, release with
 * `tcagcn_model_free`. Safe to use from several threads at once; the
 * handle is read-only after loading.
 */
typedef struct TcagcnModel TcagcnModel;

/**
 * Outcome of a stream-weight search. `weights` applies to the four score
 * tables in argument order (joint, bone, joint motion, bone motion).
 */
typedef struct TcagcnFusionResult {
  double weights[4];
  double accuracy;
  uintptr_t right;
  uintptr_t zong;
  uintptr_t tuples_evaluated;
} TcagcnFusionResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never null, never freed.
 */
const char *tcagcn_version(void);

/**
 * Message for the most recent failing call on this thread, empty after a
 * success. The pointer stays valid until the next call on the same thread.
 */
const char *tcagcn_last_error(void);

/**
 * Load a model from a checkpoint manifest written by the trainer. On
 * success `*out` owns the model; on failure it is null.
 */
enum TcagcnStatus tcagcn_model_load(const char *checkpoint_path, struct TcagcnModel **out);

/**
 * Release a model handle. Null is a no-op.
 */
void tcagcn_model_free(struct TcagcnModel *model);

/**
 * Number of action classes the model scores. 0 for a null handle.
 */
uintptr_t tcagcn_model_num_classes(const struct TcagcnModel *model);

/**
 * Number of skeleton joints the model expects per frame. 0 for a null
 * handle.
 */
uintptr_t tcagcn_model_num_joints(const struct TcagcnModel *model);

/**
 * Minimum number of frames a sequence needs to survive the model's
 * temporal strides. 0 for a null handle.
 */
uintptr_t tcagcn_model_min_frames(const struct TcagcnModel *model);

/**
 * Score one skeleton sequence.
 *
 * `coords` holds frames × joints × 3 doubles, row major: the x, y, z of
 * joint j in frame t at `coords[(t * joints + j) * 3]`. `stream` selects
 * the input encoding (a `TcagcnStream` value); bone and motion variants
 * are derived internally from the raw coordinates. `logits` receives
 * `tcagcn_model_num_classes` unnormalized class scores.
 */
enum TcagcnStatus tcagcn_model_predict(const struct TcagcnModel *model,
                                       const double *coords,
                                       uintptr_t frames,
                                       uint32_t stream,
                                       double *logits);

/**
 * Search stream weights over four aligned score CSVs (as written by the
 * scores command), one path per stream in the order joint, bone, joint
 * motion, bone motion.
 *
 * `step` is the weight grid resolution in (0, 1]. `threads` caps the
 * search workers; 0 means one per available core. `greedy` switches from
 * the exhaustive search to the first-improvement scan; both reach the same
 * correct count and differ only in which maximizing tuple they report.
 */
enum TcagcnStatus tcagcn_fuse_solve(const char *joint_csv,
                                    const char *bone_csv,
                                    const char *joint_motion_csv,
                                    const char *bone_motion_csv,
                                    double step,
                                    uintptr_t threads,
                                    bool greedy,
                                    struct TcagcnFusionResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCAGCN_H */
