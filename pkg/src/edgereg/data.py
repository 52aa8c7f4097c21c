"""Core volumetric containers.

Arrays are indexed ``[x, y, z]`` so that the on-disk x-fastest layout is
simply Fortran order. Displacement fields carry the component axis first:
``data[d, x, y, z]`` is the displacement along axis ``d`` in voxels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DataError, ShapeError

MIN_DIM = 8
LABELS = frozenset({0, 1, 2, 3})

# label semantics of the synthetic phantoms
BACKGROUND, MASK_SHELL, WM_CORE, GM_SHELL = 0, 1, 2, 3
WMGM_LABELS = (WM_CORE, GM_SHELL)
MASK_LABELS = (MASK_SHELL, WM_CORE, GM_SHELL)


def _spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ArgumentError(f"spacing must be three positive reals, got {spacing!r}")
    return sp


@dataclass
class Volume3D:
    """Single-channel intensity volume with values in [0, 1]."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"Volume3D needs a 3D array, got shape {data.shape}")
        if min(data.shape) < MIN_DIM:
            raise ShapeError(f"every dimension must be >= {MIN_DIM}, got {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite intensities")
        if data.min() < 0.0 or data.max() > 1.0:
            raise DataError(
                f"intensities must lie in [0, 1], got [{data.min()}, {data.max()}];"
                " use normalize_intensities()"
            )
        self.data = data
        self.spacing = _spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"LabelVolume needs a 3D array, got shape {data.shape}")
        if data.size and (data.min() < 0 or not set(np.unique(data).tolist()) <= LABELS):
            raise DataError(f"labels must be a subset of {sorted(LABELS)}")
        self.data = data.astype(np.uint8, copy=False)
        self.spacing = _spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class DisplacementField:
    """Per-voxel displacement ``u`` with ``Phi = Id + u`` (voxel units)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ShapeError(f"displacement field must have shape (3, X, Y, Z), got {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise DataError("displacement field contains non-finite entries")
        self.data = data
        self.spacing = _spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
        return cls(np.zeros((3, *dims), dtype=np.float32), spacing)


def normalize_intensities(data: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant array maps to zeros."""
    data = np.asarray(data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi - lo <= 0:
        return np.zeros_like(data, dtype=np.float32)
    return ((data - lo) / (hi - lo)).astype(np.float32)
