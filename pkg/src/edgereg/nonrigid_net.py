"""U-shaped displacement networks (non-rigid variants 1-4).

Shared layout: stem (conv + residual) -> ``levels`` downsampling blocks ->
dilated bottleneck -> ``levels`` decoder stages (trilinear x2 upsampling,
optional skip concatenation, residual block, ReLU) -> zero-initialised
3x3x3 conv to a 3-channel field. Variant encoders:

1. residual block -> edge module -> pool, in every block
2. block 1: edge module -> dense fusion -> pool; then residual -> pool
3. dense fusion -> pool in every block (no edge module)
4. edge banks on each input; every block: edge -> inception -> residual -> pool
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .conv_blocks import (
    DenseFusionBlock,
    DilatedBlock,
    InceptionBlock,
    ResidualBlock,
    conv3,
)
from .data import DisplacementField, Volume3D
from .edge_kernels import DEFAULT_C_OUT, DEFAULT_SELECT, EdgeKernelBank
from .errors import ArgumentError, ShapeError
from .rigid_net import count_parameters

__all__ = [
    "DisplacementField",
    "NonRigidModelConfig",
    "NonRigidRegNet",
    "count_parameters",
    "nonrigid_forward",
    "receptive_field",
]


@dataclass
class NonRigidModelConfig:
    variant: int = 4
    base_channels: int = 16
    levels: int = 3
    skip_connections: bool = True
    dilation_rates: list[int] = field(default_factory=lambda: [6, 12, 18])
    dropout_p: float = 0.1
    edge_c_out: int = DEFAULT_C_OUT
    edge_select: int = DEFAULT_SELECT
    seed: int = 0

    def __post_init__(self):
        if self.variant not in (1, 2, 3, 4):
            raise ArgumentError(f"variant must be 1-4, got {self.variant}")
        if self.levels < 1:
            raise ArgumentError("levels must be >= 1")
        if self.variant == 4 and self.base_channels % 4:
            raise ArgumentError("variant 4 needs base_channels divisible by 4 (inception)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ArgumentError("dropout_p must lie in [0, 1)")
        self.dilation_rates = [int(r) for r in self.dilation_rates]

    def as_dict(self) -> dict:
        return asdict(self)


class _Stage(nn.Module):
    """Ordered list of same-resolution modules, optionally followed by 2x average pooling."""

    def __init__(self, *mods, pool=True):
        super().__init__()
        self.mods = nn.ModuleList(mods)
        self.pool = pool

    def forward(self, x):
        for m in self.mods:
            x = m(x)
        return F.avg_pool3d(x, 2) if self.pool else x

    def rf_expand(self, lo, hi):
        if self.pool:
            lo, hi = 2 * lo, 2 * hi + 1
        for m in reversed(self.mods):
            lo, hi = _expand(m, lo, hi)
        return lo, hi


def _expand(m: nn.Module, lo, hi):
    if hasattr(m, "rf_expand"):
        return m.rf_expand(lo, hi)
    if isinstance(m, nn.Conv3d):
        r = (m.kernel_size[0] - 1) // 2 * m.dilation[0]
        return lo - r, hi + r
    if isinstance(m, (nn.AvgPool3d, nn.MaxPool3d)):
        k = m.kernel_size if isinstance(m.kernel_size, int) else m.kernel_size[0]
        s = m.stride if isinstance(m.stride, int) else m.stride[0]
        if s == 1:
            return lo - k // 2, hi + k // 2
        return s * lo, s * hi + k - 1
    if isinstance(m, nn.Sequential):
        for sub in reversed(m):
            lo, hi = _expand(sub, lo, hi)
        return lo, hi
    return lo, hi


def _upsample_back(lo, hi):
    # trilinear x2, align_corners=False: output j reads input (j + 0.5) / 2 - 0.5
    return math.floor(lo / 2 - 0.25), math.ceil(hi / 2 - 0.25)


class NonRigidRegNet(nn.Module):
    kind = "nonrigid"

    def __init__(self, cfg: NonRigidModelConfig | None = None, **overrides):
        super().__init__()
        cfg = cfg or NonRigidModelConfig(**overrides)
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        b, sel, p = cfg.base_channels, cfg.edge_select, cfg.dropout_p
        bank_id = iter(range(1000))

        def bank(cin):
            return EdgeKernelBank(cin, cfg.edge_c_out, sel, seed=cfg.seed * 1000 + next(bank_id))

        if cfg.variant == 4:
            self.edge_moving, self.edge_fixed = bank(1), bank(1)
            cin = 2 * sel
        else:
            self.edge_moving = self.edge_fixed = None
            cin = 2
        self.stem = _Stage(conv3(cin, b), nn.ReLU(), ResidualBlock(b, b, p), pool=False)

        enc_widths = [b]
        blocks = []
        cin = b
        for i in range(cfg.levels):
            w = b * 2 ** i
            if cfg.variant == 1:
                mods = [ResidualBlock(cin, w, p), bank(w)]
                w = sel
            elif cfg.variant == 2:
                mods = [bank(cin), DenseFusionBlock(sel, w)] if i == 0 else [ResidualBlock(cin, w, p)]
            elif cfg.variant == 3:
                mods = [DenseFusionBlock(cin, w)]
            else:
                mods = [bank(cin), InceptionBlock(sel, w), ResidualBlock(w, w, p)]
            blocks.append(_Stage(*mods))
            enc_widths.append(w)
            cin = w
        self.down = nn.ModuleList(blocks)
        self.bottleneck = DilatedBlock(cin, cin, cfg.dilation_rates)

        dec = []
        for lvl in reversed(range(cfg.levels)):
            skip_w = enc_widths[lvl]
            din = cin + (skip_w if cfg.skip_connections else 0)
            dec.append(ResidualBlock(din, skip_w, p))
            cin = skip_w
        self.up = nn.ModuleList(dec)
        self.flow = conv3(cin, 3)
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)

    def edge_banks(self) -> dict[str, EdgeKernelBank]:
        return {n: m for n, m in self.named_modules() if isinstance(m, EdgeKernelBank)}

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        """``(N, 1, X, Y, Z)`` pair -> ``(N, 3, X, Y, Z)`` displacement in voxels."""
        if moving.shape != fixed.shape:
            raise ShapeError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} differ")
        factor = 2 ** self.cfg.levels
        bad = [n for n in moving.shape[2:] if n % factor]
        if bad:
            pad = [(-n) % factor for n in moving.shape[2:]]
            raise ShapeError(
                f"spatial dims {tuple(moving.shape[2:])} must be divisible by {factor};"
                f" pad by {pad} voxels"
            )
        if self.cfg.variant == 4:
            x = torch.cat([self.edge_moving(moving), self.edge_fixed(fixed)], dim=1)
        else:
            x = torch.cat([moving, fixed], dim=1)
        x = self.stem(x)
        skips = [x]
        for block in self.down:
            x = block(x)
            skips.append(x)
        x = self.bottleneck(x)
        for lvl, stage in zip(reversed(range(self.cfg.levels)), self.up):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            if self.cfg.skip_connections:
                x = torch.cat([x, skips[lvl]], dim=1)
            x = F.relu(stage(x))
        return self.flow(x)

    # receptive field ------------------------------------------------------

    def _back_encoder(self, lvl, lo, hi):
        if lvl == 0:
            lo, hi = self.stem.rf_expand(lo, hi)
            if self.cfg.variant == 4:
                lo, hi = self.edge_moving.rf_expand(lo, hi)
            return lo, hi
        lo, hi = self.down[lvl - 1].rf_expand(lo, hi)
        return self._back_encoder(lvl - 1, lo, hi)

    def _back_decoder(self, lvl, lo, hi):
        levels = self.cfg.levels
        if lvl == levels:
            lo, hi = self.bottleneck.rf_expand(lo, hi)
            return self._back_encoder(levels, lo, hi)
        lo, hi = self.up[levels - 1 - lvl].rf_expand(lo, hi)
        lo_u, hi_u = self._back_decoder(lvl + 1, *_upsample_back(lo, hi))
        if not self.cfg.skip_connections:
            return lo_u, hi_u
        lo_s, hi_s = self._back_encoder(lvl, lo, hi)
        return min(lo_u, lo_s), max(hi_u, hi_s)

    def rf_interval(self, j: int) -> tuple[int, int]:
        """Input index interval (one axis) that can influence output index ``j``."""
        lo, hi = _expand(self.flow, j, j)
        return self._back_decoder(0, lo, hi)


def receptive_field(model: nn.Module) -> tuple[int, int, int]:
    """Theoretical receptive field of one output voxel (max over grid phases)."""
    if isinstance(model, NonRigidRegNet):
        period = 2 ** model.cfg.levels
        w = max(hi - lo + 1 for lo, hi in (model.rf_interval(j) for j in range(period)))
        return (w, w, w)
    lo, hi = _expand(model, 0, 0)
    if (lo, hi) == (0, 0) and not isinstance(model, (nn.Conv3d, nn.Sequential)):
        raise ArgumentError(f"no receptive-field rule for {type(model).__name__}")
    w = hi - lo + 1
    return (w, w, w)


def nonrigid_forward(model: NonRigidRegNet, moving, fixed) -> DisplacementField:
    if isinstance(moving, Volume3D):
        if moving.dims != fixed.dims:
            raise ShapeError(f"moving {moving.dims} and fixed {fixed.dims} differ")
        moving = torch.from_numpy(moving.data)[None, None]
        fixed = torch.from_numpy(fixed.data)[None, None]
    p = next(model.parameters())
    with torch.no_grad():
        u = model(moving.to(p), fixed.to(p))
    return DisplacementField(u[0].double().cpu().numpy())
