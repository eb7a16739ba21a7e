"""Depth completion error metrics (MAE, RMSE, iMAE, iRMSE)."""

from dataclasses import astuple, dataclass

import numpy as np

from kbnet.errors import NoValidPixelsError, ShapeError

CSV_HEADER = "mae_mm,rmse_mm,imae_per_km,irmse_per_km,n_pixels"


@dataclass(frozen=True)
class EvalResult:
    mae: float  # millimetres
    rmse: float  # millimetres
    imae: float  # 1/km
    irmse: float  # 1/km
    n_pixels: int

    def to_csv_line(self):
        return f"{self.mae:.6f},{self.rmse:.6f},{self.imae:.6f},{self.irmse:.6f},{self.n_pixels}"

    def as_tuple(self):
        return astuple(self)


def evaluation_mask(gt, cap, valid=None):
    gt = np.asarray(gt, dtype=np.float64)
    lo, hi = cap
    mask = np.isfinite(gt) & (gt > 0) & (gt >= lo) & (gt <= hi)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    return mask


def evaluate(pred, gt, cap=(0.2, 5.0), valid=None):
    """Errors of ``pred`` against ``gt`` (both meters) on capped valid pixels.

    Only the ground truth gates pixels: it must be positive, finite, inside
    ``cap`` and (optionally) flagged in ``valid``.  The prediction is never
    clipped.
    """
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not cap[0] > 0:
        raise ValueError(f"lower depth cap must be positive, got {cap[0]}")
    mask = evaluation_mask(gt, cap, valid)
    n = int(mask.sum())
    if n == 0:
        raise NoValidPixelsError("no ground-truth pixels inside the evaluation cap")
    p, g = pred[mask], gt[mask]
    err = p - g
    ierr = 1.0 / p - 1.0 / g
    return EvalResult(
        mae=1000.0 * float(np.mean(np.abs(err))),
        rmse=1000.0 * float(np.sqrt(np.mean(err ** 2))),
        imae=1000.0 * float(np.mean(np.abs(ierr))),
        irmse=1000.0 * float(np.sqrt(np.mean(ierr ** 2))),
        n_pixels=n,
    )


def mean_result(results):
    """Average of per-frame results, the usual benchmark aggregation."""
    arr = np.array([r.as_tuple()[:4] for r in results], dtype=np.float64)
    mae, rmse, imae, irmse = arr.mean(axis=0)
    return EvalResult(float(mae), float(rmse), float(imae), float(irmse),
                      int(sum(r.n_pixels for r in results)))
