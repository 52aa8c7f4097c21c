"""Differentiable affine and dense warping.

Coordinate convention: voxel centred, origin at the volume centre, axes in
(x, y, z) order matching the array layout. For an axis of length ``n`` the
index ``i`` sits at coordinate ``i - (n - 1) / 2``.

All warps are *backward*: the output voxel ``p`` is read from the source at
the mapped location. Every function accepts either the numpy containers from
:mod:`edgereg.data` or batched torch tensors shaped ``(N, C, X, Y, Z)``; the
return type follows the input.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from .data import DisplacementField, LabelVolume, Volume3D
from .errors import ArgumentError, ShapeError

N_PARAMS = 12
PADDING_MODES = ("zeros", "border")


# --------------------------------------------------------------------------
# affine parameterisation
# --------------------------------------------------------------------------

def affine_matrix(params: torch.Tensor) -> torch.Tensor:
    """Map ``(N, 12)`` parameters to ``(N, 4, 4)`` homogeneous matrices.

    Parameter layout: translations (0:3, voxels), rotations about x, y, z
    (3:6, radians), scale deviations (6:9, ``s = 1 + sigma``) and shears
    (9:12). The linear part is ``Rz @ Ry @ Rx @ Sh @ S``.
    """
    if params.shape[-1] != N_PARAMS:
        raise ShapeError(f"expected {N_PARAMS} affine parameters, got {params.shape[-1]}")
    p = params.reshape(-1, N_PARAMS)
    n = p.shape[0]
    one = torch.ones(n, dtype=p.dtype, device=p.device)
    zero = torch.zeros_like(one)
    t = p[:, 0:3]
    cx, cy, cz = torch.cos(p[:, 3]), torch.cos(p[:, 4]), torch.cos(p[:, 5])
    sx, sy, sz = torch.sin(p[:, 3]), torch.sin(p[:, 4]), torch.sin(p[:, 5])

    def mat(rows):
        return torch.stack([torch.stack(r, dim=-1) for r in rows], dim=-2)

    rx = mat([[one, zero, zero], [zero, cx, -sx], [zero, sx, cx]])
    ry = mat([[cy, zero, sy], [zero, one, zero], [-sy, zero, cy]])
    rz = mat([[cz, -sz, zero], [sz, cz, zero], [zero, zero, one]])
    h1, h2, h3 = p[:, 9], p[:, 10], p[:, 11]
    shear = mat([[one, h1, h2], [zero, one, h3], [zero, zero, one]])
    scale = torch.diag_embed(1.0 + p[:, 6:9])
    a = rz @ ry @ rx @ shear @ scale

    top = torch.cat([a, t.unsqueeze(-1)], dim=-1)
    bottom = torch.cat([zero, zero, zero, one]).reshape(4, n).T.unsqueeze(1)
    return torch.cat([top, bottom], dim=1)


def compose_affine(params) -> np.ndarray:
    """Homogeneous 4x4 matrix (float64) for a single 12-vector of parameters."""
    p = np.asarray(params, dtype=np.float64).reshape(-1)
    if p.size != N_PARAMS:
        raise ArgumentError(f"expected {N_PARAMS} parameters, got {p.size}")
    if np.any(p[6:9] <= -1.0):
        raise ArgumentError("scale deviations must exceed -1 (degenerate scale)")
    return affine_matrix(torch.from_numpy(p)[None])[0].numpy()


@dataclass
class AffineTransform:
    """Twelve affine parameters plus the derived homogeneous matrix."""

    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != N_PARAMS:
            raise ArgumentError(f"expected {N_PARAMS} parameters, got {self.params.size}")
        if not np.all(np.isfinite(self.params)):
            raise ArgumentError("affine parameters must be finite")

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(np.zeros(N_PARAMS))

    @property
    def matrix(self) -> np.ndarray:
        return compose_affine(self.params)

    @property
    def translation(self) -> np.ndarray:
        return self.params[0:3].copy()


# --------------------------------------------------------------------------
# grids and the trilinear sampler
# --------------------------------------------------------------------------

def _centre(shape) -> torch.Tensor:
    return torch.tensor([(n - 1) / 2.0 for n in shape], dtype=torch.float64)


def identity_grid(shape, dtype=torch.float64, device=None) -> torch.Tensor:
    """Index coordinates, shape ``(3, X, Y, Z)``."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def sample(vol: torch.Tensor, coords: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Trilinear interpolation of ``vol`` (N, C, X, Y, Z) at index ``coords`` (N, 3, ...).

    Each output is the sum over the eight grid neighbours ``q`` of the
    sampling point of ``vol[q]`` times the per-axis weights
    ``1 - |coord_d - q_d|``. Out-of-range neighbours contribute zero
    (``padding="zeros"``) or the point is clamped into the grid first
    (``padding="border"``).
    """
    if padding not in PADDING_MODES:
        raise ArgumentError(f"padding must be one of {PADDING_MODES}")
    n, c = vol.shape[:2]
    size = vol.shape[2:]
    out_shape = coords.shape[2:]
    coords = coords.to(vol.dtype)
    if padding == "border":
        coords = torch.stack(
            [coords[:, d].clamp(0, size[d] - 1) for d in range(3)], dim=1
        )
    base = torch.floor(coords)
    frac = coords - base
    base = base.long()
    flat = vol.reshape(n, c, -1)
    out = vol.new_zeros((n, c) + tuple(out_shape))
    for corner in itertools.product((0, 1), repeat=3):
        weight = None
        valid = None
        lin = None
        for d, o in enumerate(corner):
            q = base[:, d] + o
            w = frac[:, d] if o else 1.0 - frac[:, d]
            ok = (q >= 0) & (q < size[d])
            qc = q.clamp(0, size[d] - 1)
            weight = w if weight is None else weight * w
            valid = ok if valid is None else valid & ok
            lin = qc if lin is None else lin * size[d] + qc
        idx = lin.reshape(n, 1, -1).expand(n, c, -1)
        vals = torch.gather(flat, 2, idx).reshape(out.shape)
        out = out + vals * (weight * valid.to(vol.dtype)).unsqueeze(1)
    return out


def sample_nearest(vol: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour lookup with zero fill; used for label maps."""
    n, c = vol.shape[:2]
    size = vol.shape[2:]
    idx = torch.floor(coords + 0.5).long()
    valid = None
    lin = None
    for d in range(3):
        q = idx[:, d]
        ok = (q >= 0) & (q < size[d])
        valid = ok if valid is None else valid & ok
        qc = q.clamp(0, size[d] - 1)
        lin = qc if lin is None else lin * size[d] + qc
    vals = torch.gather(vol.reshape(n, c, -1), 2, lin.reshape(n, 1, -1).expand(n, c, -1))
    vals = vals.reshape((n, c) + tuple(coords.shape[2:]))
    return vals * valid.unsqueeze(1).to(vals.dtype)


def affine_coords(matrix: torch.Tensor, shape) -> torch.Tensor:
    """Index coordinates ``(N, 3, X, Y, Z)`` of ``A p + b`` for every voxel ``p``."""
    dtype = matrix.dtype
    centre = _centre(shape).to(dtype=dtype, device=matrix.device).reshape(1, 3, 1, 1, 1)
    p = identity_grid(shape, dtype, matrix.device).unsqueeze(0) - centre
    a = matrix[:, :3, :3]
    b = matrix[:, :3, 3]
    mapped = torch.einsum("nij,jxyz->nixyz", a, p[0]) + b.reshape(-1, 3, 1, 1, 1)
    return mapped + centre


def _check_det(matrix: np.ndarray):
    if abs(np.linalg.det(matrix[:3, :3])) < 1e-8:
        raise ArgumentError("degenerate affine matrix (|det A| < 1e-8)")


# --------------------------------------------------------------------------
# public warps
# --------------------------------------------------------------------------

def affine_warp(vol, transform, padding: str = "zeros"):
    """Resample ``vol`` at ``A p + b``.

    Tensor inputs: ``vol`` is (N, C, X, Y, Z) and ``transform`` is either
    ``(N, 12)`` parameters or ``(N, 4, 4)`` matrices; gradients flow to both.
    """
    if isinstance(vol, torch.Tensor):
        t = transform
        if isinstance(t, AffineTransform):
            t = torch.from_numpy(t.matrix).to(vol)[None].expand(vol.shape[0], 4, 4)
        elif t.shape[-1] == N_PARAMS:
            t = affine_matrix(t)
        return sample(vol, affine_coords(t.to(vol.dtype), vol.shape[2:]), padding)

    if not isinstance(transform, AffineTransform):
        transform = AffineTransform(transform)
    m = transform.matrix
    if not np.allclose(m[3], [0, 0, 0, 1]):
        raise ArgumentError("matrix last row must be (0, 0, 0, 1)")
    _check_det(m)
    if isinstance(vol, LabelVolume):
        return warp_labels(vol, transform)
    src = torch.from_numpy(vol.data.astype(np.float64))[None, None]
    out = sample(src, affine_coords(torch.from_numpy(m)[None], vol.dims), padding)
    return Volume3D(np.clip(out[0, 0].numpy(), 0.0, 1.0), vol.spacing)


def trilinear_warp(vol, u, padding: str = "zeros"):
    """Warp by the dense map ``phi(p) = p + u(p)``."""
    if isinstance(vol, torch.Tensor):
        if vol.shape[2:] != u.shape[2:]:
            raise ShapeError(f"volume {tuple(vol.shape[2:])} and field {tuple(u.shape[2:])} differ")
        grid = identity_grid(vol.shape[2:], vol.dtype, vol.device).unsqueeze(0)
        return sample(vol, grid + u.to(vol.dtype), padding)

    if isinstance(vol, LabelVolume):
        return warp_labels(vol, u)
    if vol.dims != u.dims:
        raise ShapeError(f"volume {vol.dims} and field {u.dims} differ")
    src = torch.from_numpy(vol.data.astype(np.float64))[None, None]
    disp = torch.from_numpy(u.data.astype(np.float64))[None]
    out = trilinear_warp(src, disp, padding)
    return Volume3D(np.clip(out[0, 0].numpy(), 0.0, 1.0), vol.spacing)


def affine_to_field(transform, dims) -> DisplacementField | torch.Tensor:
    """Displacement ``u(p) = (A p + b) - p`` on a grid of ``dims``."""
    if isinstance(transform, torch.Tensor):
        m = affine_matrix(transform) if transform.shape[-1] == N_PARAMS else transform
        grid = identity_grid(dims, m.dtype, m.device).unsqueeze(0)
        return affine_coords(m, dims) - grid
    if not isinstance(transform, AffineTransform):
        transform = AffineTransform(transform)
    m = torch.from_numpy(transform.matrix)[None]
    u = affine_coords(m, dims) - identity_grid(dims).unsqueeze(0)
    return DisplacementField(u[0].numpy())


def compose_fields(u_outer, u_inner):
    """Field ``w`` with ``Id + w = (Id + u_inner) o (Id + u_outer)``.

    ``w(p) = u_outer(p) + u_inner(p + u_outer(p))``; ``u_inner`` is sampled
    with border clamping so constant fields compose exactly.
    Warping by ``w`` approximates ``trilinear_warp(trilinear_warp(v, u_inner), u_outer)``.
    """
    if isinstance(u_outer, torch.Tensor):
        if u_outer.shape != u_inner.shape:
            raise ShapeError("fields must have equal shapes")
        grid = identity_grid(u_outer.shape[2:], u_outer.dtype, u_outer.device).unsqueeze(0)
        return u_outer + sample(u_inner, grid + u_outer, padding="border")
    if u_outer.dims != u_inner.dims:
        raise ShapeError(f"field dims differ: {u_outer.dims} vs {u_inner.dims}")
    a = torch.from_numpy(u_outer.data.astype(np.float64))[None]
    b = torch.from_numpy(u_inner.data.astype(np.float64))[None]
    return DisplacementField(compose_fields(a, b)[0].numpy(), u_outer.spacing)


def warp_labels(labels: LabelVolume, transform) -> LabelVolume:
    """Nearest-neighbour resampling of a label map under an affine or a field."""
    src = torch.from_numpy(labels.data.astype(np.float64))[None, None]
    if isinstance(transform, DisplacementField):
        if transform.dims != labels.dims:
            raise ShapeError(f"labels {labels.dims} and field {transform.dims} differ")
        coords = identity_grid(labels.dims).unsqueeze(0) + torch.from_numpy(
            transform.data.astype(np.float64)
        )[None]
    else:
        if not isinstance(transform, AffineTransform):
            transform = AffineTransform(transform)
        coords = affine_coords(torch.from_numpy(transform.matrix)[None], labels.dims)
    out = sample_nearest(src, coords)[0, 0].numpy()
    return LabelVolume(np.rint(out).astype(np.uint8), labels.spacing)


def invert_field(u: torch.Tensor, iterations: int = 50, tol: float = 1e-7) -> torch.Tensor:
    """Fixed-point inverse ``v(p) = -u(p + v(p))`` of a small smooth field."""
    grid = identity_grid(u.shape[2:], u.dtype, u.device).unsqueeze(0)
    v = -u
    for _ in range(iterations):
        nxt = -sample(u, grid + v, padding="border")
        done = (nxt - v).abs().max().item() < tol
        v = nxt
        if done:
            break
    return v
