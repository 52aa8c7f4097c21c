"""Independent scalar oracles shared by unit and acceptance tests."""
from __future__ import annotations

import itertools
import math

import numpy as np


def trilinear_point(vol: np.ndarray, x: float, y: float, z: float) -> float:
    """Eight-neighbour interpolation written out per corner; zero outside."""
    x0, y0, z0 = math.floor(x), math.floor(y), math.floor(z)
    total = 0.0
    for dx, dy, dz in itertools.product((0, 1), repeat=3):
        qx, qy, qz = x0 + dx, y0 + dy, z0 + dz
        if not (0 <= qx < vol.shape[0] and 0 <= qy < vol.shape[1] and 0 <= qz < vol.shape[2]):
            continue
        w = (1 - abs(x - qx)) * (1 - abs(y - qy)) * (1 - abs(z - qz))
        total += w * vol[qx, qy, qz]
    return total


def affine_warp_loop(vol: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Backward affine warp voxel by voxel in centre-origin coordinates."""
    c = (np.array(vol.shape) - 1) / 2.0
    out = np.zeros(vol.shape)
    for i, j, k in itertools.product(*(range(n) for n in vol.shape)):
        p = np.array([i, j, k]) - c
        q = matrix[:3, :3] @ p + matrix[:3, 3] + c
        out[i, j, k] = trilinear_point(vol, *q)
    return out


def smoothness_loop(u: np.ndarray) -> float:
    """Sum of squared forward differences, one term at a time."""
    total = 0.0
    _, nx, ny, nz = u.shape
    for c, i, j, k in itertools.product(range(3), range(nx), range(ny), range(nz)):
        v = float(u[c, i, j, k])
        if i + 1 < nx:
            total += (float(u[c, i + 1, j, k]) - v) ** 2
        if j + 1 < ny:
            total += (float(u[c, i, j + 1, k]) - v) ** 2
        if k + 1 < nz:
            total += (float(u[c, i, j, k + 1]) - v) ** 2
    return total


def folding_loop(u: np.ndarray) -> float:
    """Explicit 3x3 determinant (cofactor expansion) at each interior voxel."""
    _, nx, ny, nz = u.shape
    folded = count = 0
    for i, j, k in itertools.product(range(1, nx - 1), range(1, ny - 1), range(1, nz - 1)):
        jac = [[0.0] * 3 for _ in range(3)]
        for a in range(3):
            plus = [u[a, i + 1, j, k], u[a, i, j + 1, k], u[a, i, j, k + 1]]
            minus = [u[a, i - 1, j, k], u[a, i, j - 1, k], u[a, i, j, k - 1]]
            for b in range(3):
                jac[a][b] = (float(plus[b]) - float(minus[b])) / 2.0 + (1.0 if a == b else 0.0)
        det = (jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
               - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
               + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]))
        folded += det <= 0.0
        count += 1
    return folded / count


def dice_count(a: np.ndarray, b: np.ndarray, labels) -> float:
    """Dice from explicit voxel-index sets."""
    sa = {tuple(ix) for ix in np.argwhere(np.isin(a, labels))}
    sb = {tuple(ix) for ix in np.argwhere(np.isin(b, labels))}
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def top_channels_sort(act: np.ndarray, n: int) -> list[list[int]]:
    """Full-sort oracle: order channels by (-mean, index) with a Python sort."""
    out = []
    for sample in act:
        means = [float(np.mean(ch, dtype=np.float64)) for ch in sample]
        order = sorted(range(len(means)), key=lambda c: (-means[c], c))
        out.append(order[:n])
    return out


def smooth_random_field(rng, dims, magnitude: float, sigma: float = 3.0) -> np.ndarray:
    from scipy import ndimage

    noise = rng.standard_normal((3, *dims))
    f = np.stack([ndimage.gaussian_filter(c, sigma) for c in noise])
    return f * (magnitude / np.abs(f).max())
