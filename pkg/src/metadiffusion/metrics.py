"""Scale-invariant error norms for curves and stress fields."""

import numpy as np


class UndefinedMetricError(ValueError):
    """The reference has zero norm."""


def _relative_error(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    scale = np.max(np.abs(truth)) if truth.size else 0.0
    if scale == 0:
        raise UndefinedMetricError("reference is identically zero")
    # rescaling first keeps tiny or huge magnitudes from under/overflowing when squared
    pred, truth = pred / scale, truth / scale
    return float(np.sqrt(np.sum((pred - truth) ** 2) / np.sum(truth**2)))


def nrmse(pred, truth) -> float:
    """Normalized RMSE of two stress-strain curves: ||pred - truth|| / ||truth||."""
    return _relative_error(pred, truth)


def rel_l2_field(pred_frame, truth_frame) -> float:
    """Relative Frobenius error of one stress frame.

    Inflated when the reference field is small in magnitude (e.g. the first
    strain step), so read it alongside the absolute field values.
    """
    pred_frame = np.asarray(pred_frame)
    if pred_frame.ndim != 2:
        raise ValueError("expected a single 2D frame")
    return _relative_error(pred_frame, truth_frame)


def mean_field_error(pred_frames, truth_frames) -> float:
    """Mean of the per-frame relative errors over a sequence."""
    return float(np.mean([rel_l2_field(p, t) for p, t in zip(pred_frames, truth_frames)]))
