"""Learnable edge kernels and kernel analytics.

A bank starts from a discrete Laplacian, each weight multiplied by
``1 + 0.1 * eps`` with ``eps ~ N(0, 1)``, so that filters differ from the
first step. The forward pass is conv -> Leaky ReLU -> keep the ``select_n``
channels whose spatial mean activation is largest.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .errors import ArgumentError, ShapeError

DEFAULT_C_OUT = 32
DEFAULT_SELECT = 16
PERTURBATION_SCALE = 0.1
LEAKY_SLOPE = 0.01


def laplacian3d(connectivity: int = 6) -> np.ndarray:
    """3x3x3 discrete Laplacian (face neighbours +1, centre -6 by default)."""
    k = np.zeros((3, 3, 3))
    if connectivity == 6:
        for axis in range(3):
            for off in (0, 2):
                idx = [1, 1, 1]
                idx[axis] = off
                k[tuple(idx)] = 1.0
        k[1, 1, 1] = -6.0
    elif connectivity == 26:
        k[:] = 1.0
        k[1, 1, 1] = -26.0
    else:
        raise ArgumentError("connectivity must be 6 or 26")
    return k


def perturbed_filters(base: np.ndarray, c_in: int, c_out: int, seed: int,
                      scale: float = PERTURBATION_SCALE) -> np.ndarray:
    """``(c_out, c_in, 3, 3, 3)`` copies of ``base / c_in`` times ``1 + scale * eps``."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((c_out, c_in, 3, 3, 3))
    return (base / c_in)[None, None] * (1.0 + scale * eps)


def select_top_channels(act: torch.Tensor, n: int):
    """Pick the ``n`` channels with the largest spatial mean, per sample.

    Ties keep ascending channel order (stable sort). Returns the gathered
    activations and the ``(N, n)`` index tensor.
    """
    means = act.mean(dim=(2, 3, 4))
    order = torch.sort(means, dim=1, descending=True, stable=True).indices[:, :n]
    idx = order.reshape(*order.shape, 1, 1, 1).expand(-1, -1, *act.shape[2:])
    return torch.gather(act, 1, idx), order


class EdgeKernelBank(nn.Module):
    def __init__(
        self,
        c_in: int = 1,
        c_out: int = DEFAULT_C_OUT,
        select_n: int = DEFAULT_SELECT,
        seed: int = 0,
        perturbation_scale: float = PERTURBATION_SCALE,
        leaky_slope: float = LEAKY_SLOPE,
        trainable: bool = True,
        connectivity: int = 6,
    ):
        super().__init__()
        if c_in < 1:
            raise ArgumentError("c_in must be >= 1")
        if select_n < 1 or c_out < select_n:
            raise ArgumentError(f"need 1 <= select_n <= c_out, got select_n={select_n}, c_out={c_out}")
        self.c_in, self.c_out, self.select_n = c_in, c_out, select_n
        self.perturbation_scale = perturbation_scale
        self.leaky_slope = leaky_slope
        self.base_kernel = laplacian3d(connectivity)
        w = perturbed_filters(self.base_kernel, c_in, c_out, seed, perturbation_scale)
        self.weight = nn.Parameter(torch.from_numpy(w).float(), requires_grad=trainable)
        self.bias = nn.Parameter(torch.zeros(c_out), requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    def activations(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"edge bank expects {self.c_in} channels, got {x.shape[1]}")
        return F.leaky_relu(F.conv3d(x, self.weight, self.bias, padding=1), self.leaky_slope)

    def forward(self, x: torch.Tensor, return_indices: bool = False):
        out, idx = select_top_channels(self.activations(x), self.select_n)
        return (out, idx) if return_indices else out

    def rf_expand(self, lo, hi):
        return lo - 1, hi + 1

    def extra_repr(self):
        return f"c_in={self.c_in}, c_out={self.c_out}, select_n={self.select_n}, trainable={self.trainable}"


def init_edge_bank(c_in: int, c_out: int = DEFAULT_C_OUT, seed: int = 0, **kwargs) -> EdgeKernelBank:
    return EdgeKernelBank(c_in, c_out, seed=seed, **kwargs)


def edge_forward(bank: EdgeKernelBank, feat: torch.Tensor) -> torch.Tensor:
    return bank(feat)


class FrozenLaplacian(nn.Module):
    """Fixed Laplacian filter replicated into ``copies`` identical output channels."""

    def __init__(self, copies: int = DEFAULT_SELECT, connectivity: int = 6):
        super().__init__()
        k = torch.from_numpy(laplacian3d(connectivity)).float()
        self.register_buffer("weight", k.expand(copies, 1, 3, 3, 3).clone())

    def forward(self, x):
        if x.shape[1] != 1:
            raise ShapeError(f"frozen Laplacian expects 1 channel, got {x.shape[1]}")
        return F.conv3d(x, self.weight, padding=1)

    def rf_expand(self, lo, hi):
        return lo - 1, hi + 1


# --------------------------------------------------------------------------
# analytics
# --------------------------------------------------------------------------

@dataclass
class KernelSnapshot:
    epoch: int
    filters: np.ndarray


def snapshot(bank: EdgeKernelBank, epoch: int) -> KernelSnapshot:
    return KernelSnapshot(int(epoch), bank.weight.detach().cpu().numpy().astype(np.float64).copy())


def _kernel_rows(source) -> np.ndarray:
    """Flatten the first input slice of every filter to a 27-vector."""
    if isinstance(source, EdgeKernelBank):
        source = snapshot(source, 0)
    if isinstance(source, KernelSnapshot):
        return source.filters[:, 0].reshape(source.filters.shape[0], 27)
    if isinstance(source, (list, tuple)) and source and isinstance(source[0], KernelSnapshot):
        return np.concatenate([_kernel_rows(s) for s in source])
    arr = np.asarray(source, dtype=np.float64)
    if arr.ndim == 5:
        arr = arr[:, 0]
    return arr.reshape(arr.shape[0], 27)


def pca_project(source):
    """Project kernels onto their top-2 principal components.

    Returns ``(points (K, 2), explained_variance_ratio (2,))``. Components
    below numerical rank are zeroed, so degenerate families give exact zeros.
    """
    x = _kernel_rows(source)
    if x.shape[0] < 3:
        raise ArgumentError("PCA needs at least 3 kernels")
    xc = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((x.shape[0], 2)), np.zeros(2)
    s = np.where(s > s[0] * max(xc.shape) * np.finfo(float).eps, s, 0.0)
    total = float((s ** 2).sum())
    ratios = np.zeros(2)
    k = min(2, s.size)
    ratios[:k] = s[:k] ** 2 / total
    comps = np.zeros((2, 27))
    comps[:k] = vt[:k]
    # deterministic sign: largest-magnitude loading positive
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    comps[s[:2] == 0] = 0.0
    return xc @ comps.T, ratios


def write_pca_csv(points: np.ndarray, ratios: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kernel_id", "pc1", "pc2"])
        for i, (a, b) in enumerate(points):
            w.writerow([i, f"{a:.10g}", f"{b:.10g}"])
        w.writerow(["explained_variance", f"{ratios[0]:.10g}", f"{ratios[1]:.10g}"])


def _to_gray(slice2d: np.ndarray, vmax: float, upscale: int) -> np.ndarray:
    scaled = 127.5 + 127.5 * (slice2d / vmax if vmax > 0 else np.zeros_like(slice2d))
    img = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    return np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))


def export_heatmaps(snap, out_dir, upscale: int = 16) -> list[Path]:
    """One symmetric-scale grayscale PNG per kernel and depth slice.

    Mid-gray is zero; the scale is symmetric about zero per kernel.
    """
    if isinstance(snap, EdgeKernelBank):
        snap = snapshot(snap, 0)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, filt in enumerate(snap.filters):
        kern = filt[0]
        vmax = float(np.abs(kern).max())
        for s in range(3):
            p = out / f"kernel{k:03d}_slice{s}.png"
            Image.fromarray(_to_gray(kern[:, :, s], vmax, upscale)).save(p, optimize=False)
            paths.append(p)
    return paths


def export_evolution(snapshots: list[KernelSnapshot], out_dir, kernels=None, upscale: int = 16) -> list[Path]:
    """Per-kernel strip of the centre depth slice across snapshots (left to right by epoch)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not snapshots:
        return []
    n = snapshots[0].filters.shape[0]
    kernels = range(min(n, 8)) if kernels is None else kernels
    paths = []
    for k in kernels:
        tiles = []
        vmax = max(float(np.abs(s.filters[k, 0]).max()) for s in snapshots)
        for s in snapshots:
            tiles.append(_to_gray(s.filters[k, 0, :, :, 1], vmax, upscale))
            tiles.append(np.full((3 * upscale, 2), 255, dtype=np.uint8))
        p = out / f"evolution_kernel{k:03d}.png"
        Image.fromarray(np.hstack(tiles[:-1])).save(p, optimize=False)
        paths.append(p)
    return paths


def save_snapshots(series: dict[str, list[KernelSnapshot]], path) -> None:
    arrays = {}
    for name, snaps in series.items():
        key = name.replace(".", "__")
        arrays[f"{key}__epochs"] = np.array([s.epoch for s in snaps], dtype=np.int64)
        arrays[f"{key}__filters"] = np.stack([s.filters for s in snaps]) if snaps else np.zeros((0,))
    np.savez(path, **arrays)


def load_snapshots(path) -> dict[str, list[KernelSnapshot]]:
    data = np.load(path)
    series = {}
    for key in data.files:
        if not key.endswith("__epochs"):
            continue
        stem = key[: -len("__epochs")]
        epochs = data[key]
        filters = data[f"{stem}__filters"]
        series[stem.replace("__", ".")] = [KernelSnapshot(int(e), f) for e, f in zip(epochs, filters)]
    return series
