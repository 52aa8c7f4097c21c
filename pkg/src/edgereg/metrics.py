"""Overlap and deformation-quality metrics."""
from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .data import MASK_LABELS, WMGM_LABELS, DisplacementField, LabelVolume, Volume3D
from .errors import ShapeError
from .spatial_transform import warp_labels

__all__ = [
    "MASK_LABELS",
    "WMGM_LABELS",
    "dice",
    "folding_fraction",
    "jacobian_determinant",
    "residual_image",
    "warp_labels",
]


def _labels(x) -> np.ndarray:
    return x.data if isinstance(x, LabelVolume) else np.asarray(x)


def dice(a, b, label: int | Iterable[int]) -> float:
    """Dice overlap of the voxels carrying ``label`` (or any label in a set).

    Two empty sets score 1.0.
    """
    a, b = _labels(a), _labels(b)
    if a.shape != b.shape:
        raise ShapeError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    labels = [label] if np.isscalar(label) else list(label)
    sa, sb = np.isin(a, labels), np.isin(b, labels)
    denom = int(sa.sum()) + int(sb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((sa & sb).sum()) / denom


def jacobian_determinant(u) -> np.ndarray:
    """det(I + grad u) at interior voxels by central differences, shape (X-2, Y-2, Z-2)."""
    data = u.data if isinstance(u, DisplacementField) else np.asarray(u)
    data = data.astype(np.float64)
    if data.shape[0] != 3 or data.ndim != 4:
        raise ShapeError(f"expected a (3, X, Y, Z) field, got {data.shape}")
    if min(data.shape[1:]) < 3:
        raise ShapeError("field dims must each be >= 3")
    jac = np.empty(tuple(n - 2 for n in data.shape[1:]) + (3, 3))
    for j in range(3):
        hi = [slice(1, -1)] * 3
        lo = [slice(1, -1)] * 3
        hi[j], lo[j] = slice(2, None), slice(None, -2)
        for i in range(3):
            jac[..., i, j] = (data[i][tuple(hi)] - data[i][tuple(lo)]) / 2.0
    jac += np.eye(3)
    return np.linalg.det(jac)


def folding_fraction(u) -> float:
    """Fraction of interior voxels where the Jacobian determinant of Id + u is <= 0."""
    det = jacobian_determinant(u)
    return float(np.count_nonzero(det <= 0.0)) / det.size


def residual_image(f, warped) -> np.ndarray:
    """Signed ``f - warped`` (not clamped)."""
    fa = f.data if isinstance(f, Volume3D) else np.asarray(f)
    wa = warped.data if isinstance(warped, Volume3D) else np.asarray(warped)
    if fa.shape != wa.shape:
        raise ShapeError(f"images differ in shape: {fa.shape} vs {wa.shape}")
    return fa.astype(np.float64) - wa.astype(np.float64)
