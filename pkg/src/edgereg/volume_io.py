"""VOL3 volume files and the synthetic phantom generator.

VOL3 layout (little-endian)::

    0-3    magic b"VOL3"
    4-7    u32 version (1)
    8-19   u32 dims (dx, dy, dz)
    20-31  f32 spacing (mm)
    32-35  u32 dtype code (0 = f32 intensities, 1 = u8 labels)
    36-39  u32 channel count
    40-    payload, x fastest, channels outermost
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import (
    GM_SHELL,
    MASK_SHELL,
    WM_CORE,
    DisplacementField,
    LabelVolume,
    Volume3D,
    normalize_intensities,
)
from .errors import ArgumentError, DataError, FormatError, TruncationError
from .spatial_transform import (
    AffineTransform,
    affine_coords,
    compose_affine,
    identity_grid,
    invert_field,
    sample,
    sample_nearest,
)

MAGIC = b"VOL3"
VERSION = 1
HEADER = struct.Struct("<4sI3I3f2I")
DTYPE_F32, DTYPE_U8 = 0, 1
_NP_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}

DISP_SMOOTHING_SIGMA = 4.0


# --------------------------------------------------------------------------
# VOL3 container
# --------------------------------------------------------------------------

def _encode(array: np.ndarray, spacing, dtype_code: int) -> bytes:
    channels = array.shape[0]
    dims = array.shape[1:]
    header = HEADER.pack(MAGIC, VERSION, *dims, *spacing, dtype_code, channels)
    payload = b"".join(
        np.asarray(ch, dtype=_NP_DTYPES[dtype_code]).tobytes(order="F") for ch in array
    )
    return header + payload


def _write(path, blob: bytes):
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_vol3(path):
    """Decode a VOL3 file into ``(array[channels, x, y, z], spacing, dtype_code)``."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a VOL3 file")
    magic, version, dx, dy, dz, sx, sy, sz, code, channels = HEADER.unpack_from(blob)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported VOL3 version {version}")
    if code not in _NP_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = _NP_DTYPES[code]
    count = dx * dy * dz * channels
    payload = blob[HEADER.size:]
    if len(payload) != count * dt.itemsize:
        raise TruncationError(
            f"{path}: payload holds {len(payload)} bytes, dims {dx}x{dy}x{dz}x{channels} need"
            f" {count * dt.itemsize}"
        )
    flat = np.frombuffer(payload, dtype=dt)
    arr = flat.reshape((channels, dz, dy, dx)).transpose(0, 3, 2, 1)
    arr = np.ascontiguousarray(arr.astype(dt.newbyteorder("=")))
    if code == DTYPE_F32 and not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: payload contains non-finite values")
    return arr, (sx, sy, sz), code


def write_volume(vol: Volume3D, path) -> None:
    if not np.all(np.isfinite(vol.data)):
        raise DataError("refusing to write non-finite volume")
    _write(path, _encode(vol.data[None], vol.spacing, DTYPE_F32))


def read_volume(path) -> Volume3D:
    """Read a single-channel intensity volume.

    Stored data already in [0, 1] is returned untouched (bit-exact round
    trip); anything else is min-max normalised on load.
    """
    arr, spacing, code = read_vol3(path)
    if code != DTYPE_F32 or arr.shape[0] != 1:
        raise FormatError(f"{path}: expected a 1-channel f32 volume")
    data = arr[0]
    if data.min() < 0.0 or data.max() > 1.0:
        data = normalize_intensities(data)
    return Volume3D(data, spacing)


def write_labels(labels: LabelVolume, path) -> None:
    _write(path, _encode(labels.data[None], labels.spacing, DTYPE_U8))


def read_labels(path) -> LabelVolume:
    arr, spacing, code = read_vol3(path)
    if code != DTYPE_U8 or arr.shape[0] != 1:
        raise FormatError(f"{path}: expected a 1-channel u8 label volume")
    return LabelVolume(arr[0], spacing)


def write_field(u: DisplacementField, path) -> None:
    if not np.all(np.isfinite(u.data)):
        raise DataError("refusing to write non-finite displacement field")
    _write(path, _encode(u.data, u.spacing, DTYPE_F32))


def read_field(path) -> DisplacementField:
    arr, spacing, code = read_vol3(path)
    if code != DTYPE_F32 or arr.shape[0] != 3:
        raise FormatError(f"{path}: expected a 3-channel f32 displacement field")
    return DisplacementField(arr, spacing)


# --------------------------------------------------------------------------
# phantoms
# --------------------------------------------------------------------------

@dataclass
class PhantomPair:
    fixed: Volume3D
    moving: Volume3D
    fixed_labels: LabelVolume
    moving_labels: LabelVolume
    gt_affine: AffineTransform | None
    gt_disp: DisplacementField | None
    modality_remap: str

    # ground truth is stored as the registration target: warping `moving`
    # by gt_affine and then gt_disp reproduces `fixed`.

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_volume(self.fixed, out / "fixed.vol")
        write_volume(self.moving, out / "moving.vol")
        write_labels(self.fixed_labels, out / "fixed_labels.vol")
        write_labels(self.moving_labels, out / "moving_labels.vol")
        if self.gt_affine is not None:
            np.savetxt(out / "gt_affine.txt", self.gt_affine.params[None], fmt="%.17g")
        if self.gt_disp is not None:
            write_field(self.gt_disp, out / "gt_disp.vol")
        (out / "modality.txt").write_text(self.modality_remap + "\n", encoding="utf-8")

    @classmethod
    def load(cls, pair_dir) -> PhantomPair:
        d = Path(pair_dir)
        if not (d / "fixed.vol").exists():
            raise FormatError(f"{d}: not a phantom pair directory (fixed.vol missing)")
        gt_affine = None
        if (d / "gt_affine.txt").exists():
            gt_affine = AffineTransform(np.loadtxt(d / "gt_affine.txt", ndmin=1))
        gt_disp = read_field(d / "gt_disp.vol") if (d / "gt_disp.vol").exists() else None
        remap = (d / "modality.txt").read_text(encoding="utf-8").strip() if (
            d / "modality.txt").exists() else "identity"
        return cls(
            read_volume(d / "fixed.vol"),
            read_volume(d / "moving.vol"),
            read_labels(d / "fixed_labels.vol"),
            read_labels(d / "moving_labels.vol"),
            gt_affine,
            gt_disp,
            remap,
        )


_AXIS_FRACTIONS = np.array([0.48, 0.63, 0.78])


def _shell_geometry(rng, dims):
    half = np.asarray(dims, dtype=np.float64) / 2.0
    centre = (np.asarray(dims) - 1) / 2.0 + rng.uniform(-1.0, 1.0, 3)
    # distinct semi-axes so that rotations change the image (a sphere hides them)
    outer = half * (rng.permutation(_AXIS_FRACTIONS) + rng.uniform(-0.03, 0.03, 3))
    gm = outer * rng.uniform(0.60, 0.66)
    wm = outer * rng.uniform(0.30, 0.36)
    return centre, (outer, gm, wm)


def _labels_at(points: np.ndarray, centre, radii) -> np.ndarray:
    """Analytic labels at index-space points ``(3, ...)``."""
    outer, gm, wm = radii
    rel = points - centre.reshape(3, *([1] * (points.ndim - 1)))

    def inside(r):
        return np.sum((rel / r.reshape(3, *([1] * (points.ndim - 1)))) ** 2, axis=0) <= 1.0

    lab = np.zeros(points.shape[1:], dtype=np.uint8)
    lab[inside(outer)] = MASK_SHELL
    lab[inside(gm)] = GM_SHELL
    lab[inside(wm)] = WM_CORE
    return lab


_INTENSITY = {0: 0.0, MASK_SHELL: 0.35, GM_SHELL: 0.65, WM_CORE: 1.0}


def _remap(v: np.ndarray) -> np.ndarray:
    return 1.0 - np.power(np.clip(v, 0.0, 1.0), 0.7)


def random_displacement(rng, dims, magnitude: float) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to max vector norm ``magnitude``."""
    noise = rng.standard_normal((3, *dims))
    smooth = np.stack([ndimage.gaussian_filter(c, DISP_SMOOTHING_SIGMA) for c in noise])
    peak = np.sqrt((smooth ** 2).sum(axis=0)).max()
    return smooth * (magnitude / peak) if peak > 0 else smooth


def generate_phantom_pair(
    seed: int,
    dims=(32, 32, 32),
    affine_magnitude: float = 0.0,
    disp_magnitude: float = 0.0,
    modality_shift: bool = False,
    *,
    max_rotation_deg: float | None = None,
    rigid_only: bool = False,
) -> PhantomPair:
    """Concentric-ellipsoid phantom and a deformed, optionally contrast-inverted copy.

    Translations are bounded by ``affine_magnitude`` voxels and rotations by
    ``max_rotation_deg`` (defaults to ``affine_magnitude``) degrees; scale
    deviations and shears are bounded by ``0.01 * affine_magnitude`` unless
    ``rigid_only``. The displacement has max norm ``disp_magnitude`` voxels.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ArgumentError(f"phantom dims must be three integers >= 16, got {dims}")
    if affine_magnitude < 0 or disp_magnitude < 0:
        raise ArgumentError("magnitudes must be non-negative")
    rot_max = affine_magnitude if max_rotation_deg is None else float(max_rotation_deg)
    if rot_max < 0:
        raise ArgumentError("max_rotation_deg must be non-negative")

    rng = np.random.default_rng(seed)
    centre, radii = _shell_geometry(rng, dims)
    grid = identity_grid(dims).numpy()
    fixed_labels = _labels_at(grid, centre, radii)
    raw = np.vectorize(_INTENSITY.get, otypes=[np.float64])(fixed_labels)
    fixed = normalize_intensities(np.clip(ndimage.gaussian_filter(raw, 1.0), 0.0, 1.0))

    params = np.zeros(12)
    params[0:3] = rng.uniform(-1, 1, 3) * affine_magnitude
    params[3:6] = np.deg2rad(rng.uniform(-1, 1, 3) * rot_max)
    if not rigid_only:
        params[6:9] = rng.uniform(-1, 1, 3) * 0.01 * affine_magnitude
        params[9:12] = rng.uniform(-1, 1, 3) * 0.01 * affine_magnitude
    u = random_displacement(rng, dims, disp_magnitude) if disp_magnitude > 0 else None

    # moving(q) = fixed(c(q)) with c = (Id + u)^-1 o T^-1, so that
    # warping moving by T then by u recovers fixed.
    m_inv = torch.from_numpy(np.linalg.inv(compose_affine(params)))[None]
    coords = affine_coords(m_inv, dims)
    if u is not None:
        v = invert_field(torch.from_numpy(u)[None])
        coords = coords + sample(v, coords, padding="border")
    fixed_t = torch.from_numpy(fixed.astype(np.float64))[None, None]
    moving = np.clip(sample(fixed_t, coords)[0, 0].numpy(), 0.0, 1.0)
    # labels are resampled from the fixed grid (not the analytic shapes) so
    # that the inverse warp undoes the rounding instead of compounding it
    lab_t = torch.from_numpy(fixed_labels.astype(np.float64))[None, None]
    moving_labels = np.rint(sample_nearest(lab_t, coords)[0, 0].numpy()).astype(np.uint8)

    remap = "identity"
    if modality_shift:
        moving = _remap(moving)
        remap = "v -> 1 - v**0.7"

    return PhantomPair(
        fixed=Volume3D(fixed),
        moving=Volume3D(moving.astype(np.float32)),
        fixed_labels=LabelVolume(fixed_labels),
        moving_labels=LabelVolume(moving_labels),
        gt_affine=AffineTransform(params),
        gt_disp=DisplacementField(u) if u is not None else None,
        modality_remap=remap,
    )


def phantom_dataset(count: int, seed: int = 0, **kwargs) -> list[PhantomPair]:
    """``count`` pairs with seeds ``seed, seed + 1, ...``."""
    return [generate_phantom_pair(seed + i, **kwargs) for i in range(count)]


def list_pair_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / "fixed.vol").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "fixed.vol").exists())
