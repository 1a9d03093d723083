#ifndef CDTM_H
#define CDTM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function of this library.
 */
typedef enum CdtmStatus {
  /**
   * Success.
   */
  CdtmOk = 0,
  /**
   * A required pointer argument was null.
   */
  CdtmNullArgument = 1,
  /**
   * An argument was out of range or malformed.
   */
  CdtmInvalidArgument = 2,
  /**
   * File could not be read, written, or parsed.
   */
  CdtmIoError = 3,
  /**
   * The solver did not converge within its iteration budget.
   */
  CdtmNotConverged = 4,
  /**
   * The estimation problem is degenerate (observability lost).
   */
  CdtmDegenerate = 5,
  /**
   * The initial guess was rejected by the error gate.
   */
  CdtmRejected = 6,
  /**
   * A numerical operation failed (ill-conditioning, gimbal lock, ...).
   */
  CdtmNumericalError = 7,
  /**
   * Internal panic; the library state is still valid.
   */
  CdtmInternalError = 8,
} CdtmStatus;

/**
 * Opaque digital terrain map handle.
 */
typedef struct CdtmTerrain CdtmTerrain;

/**
 * Result of one pose-and-motion solve.
 */
typedef struct CdtmSolveReport {
  /**
   * Estimated parameter vector, same layout as the guess.
   */
  double theta[12];
  /**
   * 1 if the iteration converged, 0 otherwise.
   */
  int converged;
  /**
   * 1 if the problem was flagged as degenerate.
   */
  int degenerate;
  /**
   * 1 if the initial guess was rejected by the error gate.
   */
  int rejected;
  /**
   * Gauss-Newton / Levenberg-Marquardt iterations used.
   */
  uint64_t iterations;
  /**
   * Final squared residual norm.
   */
  double final_cost;
  /**
   * Condition number of the final parameter Jacobian.
   */
  double condition_number;
} CdtmSolveReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the most recent error on this thread into
 * `buf` (NUL-terminated, truncated to `len` bytes). Returns the full
 * message length in bytes, excluding the terminator, or -1 if `buf`
 * is null and `len` nonzero.
 */
int cdtm_last_error(char *buf, uintptr_t len);

/**
 * Reads a terrain grid from an ESRI ASCII (.asc) file. On success
 * writes a new handle to `out`; free it with `cdtm_terrain_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CdtmStatus cdtm_terrain_read_asc(const char *path, struct CdtmTerrain **out);

/**
 * Builds a terrain grid from a row-major `rows x cols` height array.
 * `origin_x`, `origin_y` locate node (0, 0); `spacing` is the node
 * pitch in meters along both axes. On success writes a new handle to
 * `out`; free it with `cdtm_terrain_free`.
 *
 * # Safety
 * `heights` must point to `rows * cols` doubles and `out` must be a
 * valid pointer.
 */
enum CdtmStatus cdtm_terrain_create(uintptr_t rows,
                                    uintptr_t cols,
                                    double origin_x,
                                    double origin_y,
                                    double spacing,
                                    const double *heights,
                                    struct CdtmTerrain **out);

/**
 * Frees a terrain handle. A null handle is a no-op.
 *
 * # Safety
 * `terrain` must be a handle returned by this library that has not
 * already been freed.
 */
void cdtm_terrain_free(struct CdtmTerrain *terrain);

/**
 * Bilinearly interpolated terrain height at `(x, y)`. Fails with
 * `CdtmInvalidArgument` outside the grid footprint.
 *
 * # Safety
 * `terrain` must be a live handle and `out_height` a valid pointer.
 */
enum CdtmStatus cdtm_terrain_height_at(const struct CdtmTerrain *terrain,
                                       double x,
                                       double y,
                                       double *out_height);

/**
 * Estimates both camera poses from `n` matched feature rays and the
 * terrain, starting from `guess` (length 12). `huber` nonzero enables
 * Huber robust reweighting against gross outliers. The report is
 * filled on `CdtmOk`, `CdtmNotConverged`, `CdtmDegenerate`, and
 * `CdtmRejected`; the latter three also set the error message.
 *
 * # Safety
 * `terrain` must be a live handle, `observations` must point to
 * `n * 4` doubles, `guess` to 12 doubles, and `report` must be a
 * valid pointer.
 */
enum CdtmStatus cdtm_solve(const struct CdtmTerrain *terrain,
                           const double *observations,
                           uintptr_t n,
                           const double *guess,
                           int huber,
                           struct CdtmSolveReport *report);

/**
 * First-order covariance of the estimate at `theta` (length 12) given
 * image-ray noise `sigma_l` (image plane, unit focal length) and
 * terrain height noise `sigma_h` (meters). Writes the row-major 12x12
 * parameter covariance to `sigma_theta_out` (144 doubles) and the
 * row-major 6x6 second-pose covariance to `sigma_c2_out` (36
 * doubles); either output pointer may be null to skip it.
 *
 * # Safety
 * `terrain` must be a live handle, `observations` must point to
 * `n * 4` doubles, `theta` to 12 doubles, and each non-null output
 * pointer to the stated number of doubles.
 */
enum CdtmStatus cdtm_covariance(const struct CdtmTerrain *terrain,
                                const double *observations,
                                uintptr_t n,
                                const double *theta,
                                double sigma_l,
                                double sigma_h,
                                double *sigma_theta_out,
                                double *sigma_c2_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDTM_H */
