"""Monte Carlo dropout: repeated stochastic passes, voxelwise mean and variance.

BatchNorm stays in inference mode; only dropout layers are switched on.
Pass ``k`` draws its masks from a generator seeded with ``(seed, k)``, so the
result depends on the seed and pass count only. Mean and variance are
reduced over the pass axis after sorting it, which makes them independent
of pass order bit for bit.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .data import Volume3D
from .errors import ArgumentError
from .spatial_transform import affine_warp, trilinear_warp

DEFAULT_PASSES = 10


@dataclass
class UncertaintyResult:
    mean_warped: Volume3D
    variance_map: np.ndarray
    passes: int
    dropout_p: float
    per_pass_outputs: list[np.ndarray] | None = None
    param_mean: np.ndarray | None = None
    param_variance: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.passes < 1:
            raise ArgumentError("passes must be >= 1")
        if np.any(self.variance_map < 0):
            raise ArgumentError("variance must be non-negative")


def _dropout_layers(model: nn.Module) -> list[nn.Dropout]:
    return [m for m in model.modules() if isinstance(m, nn.modules.dropout._DropoutNd)]


@contextmanager
def _mc_mode(model: nn.Module):
    was_training = {m: m.training for m in model.modules()}
    model.eval()
    for m in _dropout_layers(model):
        m.train()
    try:
        yield
    finally:
        for m, flag in was_training.items():
            m.train(flag)


def pass_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed) % 2 ** 63, k]).generate_state(1, np.uint64)[0] % 2 ** 63)


def population_stats(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and divide-by-N variance over axis 0, independent of sample order."""
    s = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    n = s.shape[0]
    # shift by the minimum so that identical samples give exactly zero variance
    d = s - s[0]
    shift = d.sum(axis=0) / n
    dev = np.sort((d - shift) ** 2, axis=0)
    return s[0] + shift, dev.sum(axis=0) / n


def _tensor(vol: Volume3D, dtype) -> torch.Tensor:
    return torch.from_numpy(vol.data)[None, None].to(dtype)


def mc_predict(model: nn.Module, moving: Volume3D, fixed: Volume3D, passes: int = DEFAULT_PASSES,
               seed: int = 0, keep_passes: bool = False) -> UncertaintyResult:
    """``passes`` dropout-active predictions of the warped moving image."""
    if passes < 1:
        raise ArgumentError("passes must be >= 1")
    drops = _dropout_layers(model)
    if not drops:
        raise ArgumentError("model has no dropout layers")
    dtype = next(model.parameters()).dtype
    m_in, f_in = _tensor(moving, dtype), _tensor(fixed, dtype)
    src = torch.from_numpy(moving.data.astype(np.float64))[None, None]
    outputs, params = [], []
    with _mc_mode(model), torch.no_grad():
        for k in range(passes):
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(pass_seed(seed, k))
                pred = model(m_in, f_in).double()
            if getattr(model, "kind", "") == "rigid":
                params.append(pred[0].numpy())
                warped = affine_warp(src, pred)
            else:
                warped = trilinear_warp(src, pred)
            outputs.append(warped[0, 0].numpy())
    stack = np.stack(outputs)
    mean, var = population_stats(stack)
    p_mean = p_var = None
    if params:
        p_mean, p_var = population_stats(np.stack(params))
    return UncertaintyResult(
        mean_warped=Volume3D(np.clip(mean, 0.0, 1.0), moving.spacing),
        variance_map=var,
        passes=passes,
        dropout_p=max(m.p for m in drops),
        per_pass_outputs=list(stack) if keep_passes else None,
        param_mean=p_mean,
        param_variance=p_var,
    )


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def hot_colormap(t: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white for ``t`` in [0, 1]; returns floats in [0, 1]."""
    t = np.clip(t, 0.0, 1.0)
    return np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=-1)


def _slice(arr: np.ndarray, axis: int, index: int) -> np.ndarray:
    return np.take(arr, index, axis=axis)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def render_uncertainty(result: UncertaintyResult, slice_axis: int, slice_index: int, out_path) -> list[Path]:
    """Write mean, variance heat map and overlay PNGs for one slice.

    The heat map is normalised to the slice's maximum variance, which is
    written to a sidecar ``*_variance_max.txt``. The overlay blends the heat
    colour over the grey mean image with alpha ``0.5 * variance / max``.
    Rows of each image follow the first remaining volume axis.
    """
    if slice_axis not in (0, 1, 2):
        raise ArgumentError("slice_axis must be 0, 1 or 2")
    n = result.variance_map.shape[slice_axis]
    if not 0 <= slice_index < n:
        raise ArgumentError(f"slice_index {slice_index} out of range [0, {n})")
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"axis{slice_axis}_slice{slice_index:03d}"

    mean = _slice(result.mean_warped.data.astype(np.float64), slice_axis, slice_index)
    var = _slice(result.variance_map, slice_axis, slice_index)
    vmax = float(var.max())
    t = var / vmax if vmax > 0 else np.zeros_like(var)
    heat = hot_colormap(t)
    grey = np.repeat(np.clip(mean, 0.0, 1.0)[..., None], 3, axis=-1)
    alpha = (0.5 * t)[..., None]
    overlay = (1.0 - alpha) * grey + alpha * heat

    paths = [out / f"{stem}_mean.png", out / f"{stem}_variance.png", out / f"{stem}_overlay.png"]
    Image.fromarray(_to_u8(np.clip(mean, 0.0, 1.0))).save(paths[0], optimize=False)
    Image.fromarray(_to_u8(heat)).save(paths[1], optimize=False)
    Image.fromarray(_to_u8(overlay)).save(paths[2], optimize=False)
    side = out / f"{stem}_variance_max.txt"
    side.write_text(f"{vmax:.17g}\n", encoding="utf-8")
    return paths + [side]
