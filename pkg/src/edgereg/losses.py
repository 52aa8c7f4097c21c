"""Unsupervised objective: (local) mutual information plus a smoothness term.

MI uses a Parzen soft joint histogram: every intensity is spread over
``bins`` Gaussian-weighted bins (centres ``i / (bins - 1)``, width
``parzen_sigma`` bins), weights normalised per voxel. The local variant
tiles the volume with non-overlapping ``window``^3 blocks and averages the
per-block MI; partial blocks at the far edges are kept (padding voxels are
masked out of the histogram).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import DisplacementField, Volume3D
from .errors import ArgumentError, ShapeError
from .spatial_transform import N_PARAMS, AffineTransform, affine_to_field, affine_warp, trilinear_warp

RANGE_TOL = 1e-6


@dataclass
class LossConfig:
    alpha: float = 1.0
    bins: int = 32
    window: int = 9
    parzen_sigma: float = 1.0
    reduction: str = "mean"
    alpha_affine: float = 0.0

    def __post_init__(self):
        if self.bins < 2:
            raise ArgumentError("bins must be >= 2")
        if self.window != 0 and (self.window < 3 or self.window % 2 == 0):
            raise ArgumentError("window must be 0 (global) or an odd integer >= 3")
        if self.alpha < 0 or self.alpha_affine < 0:
            raise ArgumentError("regularisation weights must be >= 0")
        if self.parzen_sigma <= 0:
            raise ArgumentError("parzen_sigma must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ArgumentError("reduction must be 'sum' or 'mean'")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    D: float
    R: float
    alpha: float
    total: float


def _as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, Volume3D):
        return torch.from_numpy(x.data.astype(np.float64))[None, None].to(dtype)
    if isinstance(x, DisplacementField):
        return torch.from_numpy(x.data.astype(np.float64))[None].to(dtype)
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    return x


class JointHistogramModel:
    """Parzen soft-binning joint histogram, batched over blocks."""

    def __init__(self, bins: int = 32, parzen_sigma: float = 1.0):
        self.bins = bins
        self.sigma = parzen_sigma / (bins - 1)
        self.bin_centers = torch.linspace(0.0, 1.0, bins, dtype=torch.float64)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., V)`` intensities -> ``(..., V, bins)`` normalised soft assignments."""
        c = self.bin_centers.to(x)
        w = torch.exp(-0.5 * ((x.unsqueeze(-1) - c) / self.sigma) ** 2)
        return w / w.sum(dim=-1, keepdim=True)

    def joint(self, a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``(B, V)`` pairs of samples -> ``(B, bins, bins)`` joint probabilities."""
        wa, wb = self.weights(a), self.weights(b)
        if mask is not None:
            wa = wa * mask.unsqueeze(-1)
            count = mask.sum(dim=-1)
        else:
            count = torch.full(a.shape[:1], a.shape[-1], dtype=a.dtype, device=a.device)
        return torch.bmm(wa.transpose(1, 2), wb) / count.reshape(-1, 1, 1)


def mi_from_joint(p: torch.Tensor) -> torch.Tensor:
    """``sum p log(p / (p_a p_b))`` per leading index, with ``0 log 0 = 0``."""
    pa = p.sum(dim=2, keepdim=True)
    pb = p.sum(dim=1, keepdim=True)
    pos = p > 0
    one = torch.ones_like(p)
    # log of each factor separately: the product pa * pb can underflow in float32
    log_ratio = (torch.log(torch.where(pos, p, one)) - torch.log(torch.where(pos, pa.expand_as(p), one))
                 - torch.log(torch.where(pos, pb.expand_as(p), one)))
    return torch.where(pos, p * log_ratio, torch.zeros_like(p)).sum(dim=(1, 2))


def _blocks(x: torch.Tensor, window: int):
    """``(N, 1, X, Y, Z)`` -> ``(N * nblocks, window^3)`` plus a validity mask."""
    n = x.shape[0]
    dims = x.shape[2:]
    pad = [(-d) % window for d in dims]
    mask = torch.ones_like(x)
    # F.pad takes the last dimension first
    spec = [0, pad[2], 0, pad[1], 0, pad[0]]
    xp, mp = F.pad(x, spec), F.pad(mask, spec)

    def tile(t):
        X, Y, Z = t.shape[2:]
        t = t.reshape(n, X // window, window, Y // window, window, Z // window, window)
        t = t.permute(0, 1, 3, 5, 2, 4, 6)
        return t.reshape(-1, window ** 3)

    return tile(xp), tile(mp)


def _check_range(x: torch.Tensor, name: str):
    lo, hi = float(x.detach().min()), float(x.detach().max())
    if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL or not np.isfinite(lo + hi):
        raise ArgumentError(f"{name} intensities must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")


def mutual_information(f, w, bins: int = 32, parzen_sigma: float = 1.0, window: int = 0) -> torch.Tensor:
    """Per-sample MI ``(N,)`` (block-averaged when ``window > 0``)."""
    f, w = _as_tensor(f), _as_tensor(w)
    if f.shape != w.shape:
        raise ShapeError(f"image shapes differ: {tuple(f.shape)} vs {tuple(w.shape)}")
    _check_range(f, "fixed")
    _check_range(w, "warped")
    f = f.to(w.dtype) if w.is_floating_point() else f
    hist = JointHistogramModel(bins, parzen_sigma)
    n = f.shape[0]
    if window == 0:
        p = hist.joint(f.reshape(n, -1), w.reshape(n, -1))
        return mi_from_joint(p)
    fb, mask = _blocks(f, window)
    wb, _ = _blocks(w, window)
    p = hist.joint(fb, wb, mask)
    return mi_from_joint(p).reshape(n, -1).mean(dim=1)


def local_mi_loss(f, w, cfg: LossConfig | None = None):
    """Negative (local) MI, averaged over blocks and batch.

    Returns a float for :class:`Volume3D` inputs and a scalar tensor otherwise.
    """
    cfg = cfg or LossConfig()
    plain = isinstance(f, Volume3D)
    mi = mutual_information(f, w, cfg.bins, cfg.parzen_sigma, cfg.window)
    loss = -mi.mean()
    return float(loss) if plain else loss


def smoothness(u, cfg: LossConfig | None = None):
    """Sum (or per-voxel mean) of squared forward differences of ``u``.

    The last difference along each axis is zero (replicated boundary), so
    the sum runs over interior differences only.
    """
    cfg = cfg or LossConfig()
    plain = isinstance(u, DisplacementField)
    t = _as_tensor(u)
    if t.dim() == 4:
        t = t[None]
    total = sum(
        (torch.diff(t, dim=ax) ** 2).sum(dim=(1, 2, 3, 4)) for ax in (2, 3, 4)
    )
    if cfg.reduction == "mean":
        total = total / float(np.prod(t.shape[2:]))
    r = total.mean()
    return float(r) if plain else r


def total_loss(f, m, transform_or_field, cfg: LossConfig | None = None):
    """``D(f, m o phi) + weight * R(phi)`` and its breakdown.

    ``transform_or_field`` may be an :class:`AffineTransform`, an ``(N, 12)``
    parameter tensor (affine path, weight ``alpha_affine``), a
    :class:`DisplacementField` or an ``(N, 3, X, Y, Z)`` tensor (weight ``alpha``).
    Returns ``(total, breakdown, warped)``; ``total`` keeps the autograd graph.
    """
    cfg = cfg or LossConfig()
    tf = transform_or_field
    ft, mt = _as_tensor(f), _as_tensor(m)
    if isinstance(tf, AffineTransform):
        tf = torch.from_numpy(tf.params)[None].expand(mt.shape[0], N_PARAMS)
    tf = _as_tensor(tf)
    is_affine = tf.shape[-1] == N_PARAMS and tf.dim() == 2
    if is_affine:
        tf = tf.to(mt.dtype)
        warped = affine_warp(mt, tf)
        field = affine_to_field(tf, mt.shape[2:])
        weight = cfg.alpha_affine
    else:
        field = _as_tensor(tf).to(mt.dtype)
        if field.dim() == 4:
            field = field[None]
        warped = trilinear_warp(mt, field)
        weight = cfg.alpha
    d = local_mi_loss(ft.to(mt.dtype), warped, cfg)
    r = smoothness(field, cfg)
    total = d + weight * r
    breakdown = LossBreakdown(float(d.detach()), float(r.detach()), float(weight), float(total.detach()))
    return total, breakdown, warped
