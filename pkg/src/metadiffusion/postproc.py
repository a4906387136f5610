"""Turn generated field sequences into a design, a predicted curve and
deformed-configuration renderings."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import FieldSequence, curve_from_fields
from .design import FOUR_CONNECTIVITY, UnitCell, mirror_quarter


class EmptyDesignError(ValueError):
    """Every pixel was classified as void."""


def remove_disconnected(pixels: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected material domain.

    Domains tied for the largest size are all kept, so a mirror-symmetric
    input stays mirror-symmetric.
    """
    labels, count = ndimage.label(pixels, structure=FOUR_CONNECTIVITY)
    if count == 0:
        return np.zeros_like(pixels, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = np.flatnonzero(sizes == sizes.max()) + 1
    return np.isin(labels, keep).astype(np.uint8)


def void_mask_from_displacement(u2: np.ndarray, tolerance: float = 0.02) -> np.ndarray:
    """Pixels whose vertical displacement stays within ``tolerance`` times the
    overall (max - min) range of u2 in every frame."""
    u2 = np.asarray(u2, dtype=float)
    span = u2.max() - u2.min()
    return np.all(np.abs(u2) <= tolerance * span, axis=0)


def extract_topology(seq: FieldSequence, tolerance: float = 0.02) -> UnitCell:
    """Binary design from the vertical displacement of the upper-left quarter.

    ``seq`` must be in physical units. The quarter is mirrored into the full
    cell and material not in the largest connected domain is removed.
    """
    u2 = seq.u2
    n = u2.shape[-1]
    void = void_mask_from_displacement(u2, tolerance)
    quarter = (~void[: n // 2, : n // 2]).astype(np.uint8)
    pixels = remove_disconnected(mirror_quarter(quarter))
    if not pixels.any():
        raise EmptyDesignError("no material pixels recovered from the displacement field")
    return UnitCell(pixels)


def predict_curve(seq: FieldSequence, cell: UnitCell) -> np.ndarray:
    """Effective stress from row averages of the stress masked to ``cell``."""
    return curve_from_fields(seq, cell)


def to_eulerian(seq: FieldSequence, mask: np.ndarray | None = None, min_coverage: float = 0.5):
    """Splat the stress of each material pixel to its deformed position.

    Pixel (i, j) has undeformed centre X1 = j + 0.5, X2 = n - i - 0.5 (unit
    pixels, X2 upward). Values are bilinearly splatted and divided by the
    accumulated weight; pixels with coverage below ``min_coverage`` are left
    empty. Returns ``(images, coverage)``, each of shape (frames, n, n).
    For display only.
    """
    frames = seq.frames
    f, _, n, _ = frames.shape
    if mask is None:
        mask = np.any(frames != 0, axis=(0, 1))
    rows, cols = np.nonzero(mask)
    images = np.zeros((f, n, n))
    coverage = np.zeros((f, n, n))
    for k in range(f):
        u1 = frames[k, 1, rows, cols]
        u2 = frames[k, 2, rows, cols]
        x = cols + u1  # deformed column coordinate of the pixel centre (minus 0.5)
        y = rows - u2  # row index grows downward
        vals = frames[k, 0, rows, cols]
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        fx, fy = x - x0, y - y0
        acc = np.zeros((n, n))
        wsum = np.zeros((n, n))
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                wgt = wy * wx
                ok = (yy >= 0) & (yy < n) & (xx >= 0) & (xx < n) & (wgt > 0)
                np.add.at(acc, (yy[ok], xx[ok]), wgt[ok] * vals[ok])
                np.add.at(wsum, (yy[ok], xx[ok]), wgt[ok])
        filled = wsum >= min_coverage
        images[k][filled] = acc[filled] / wsum[filled]
        coverage[k] = wsum
    return images, coverage
