"""Affine regression networks (rigid variants 1-4).

All variants share the same tail: a refinement residual block at the
coarsest level, global average pooling and two fully connected layers
(``pool_grid > 1`` pools to a coarse grid instead, keeping some layout).
The last layer starts at zero, so an untrained network predicts the
identity. Its outputs are multiplied by fixed per-group units (one voxel, 0.05 rad,
0.02, 0.02) so that an adaptive optimiser's step moves every group by a
comparable geometric amount.

Variant encoders:

1. frozen Laplacian on each input -> residual+pool blocks
2. trainable edge bank on each input -> residual+pool blocks
3. edge banks -> conv + residual stem -> first block has an edge module
4. edge banks -> conv + residual stem -> every block has an edge module
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conv_blocks import ResidualBlock, conv3
from .data import Volume3D
from .edge_kernels import DEFAULT_C_OUT, DEFAULT_SELECT, EdgeKernelBank, FrozenLaplacian
from .errors import ArgumentError, ShapeError
from .spatial_transform import N_PARAMS, AffineTransform, compose_affine

__all__ = [
    "AffineTransform",
    "RigidModelConfig",
    "RigidRegNet",
    "compose_affine",
    "count_parameters",
    "rigid_forward",
]


@dataclass
class RigidModelConfig:
    variant: int = 4
    base_channels: int = 16
    levels: int = 3
    fc_hidden: int = 128
    # the coarsest features are average-pooled to pool_grid^3 cells and
    # flattened; 1 is plain global average pooling
    pool_grid: int = 1
    dropout_p: float = 0.1
    edge_c_out: int = DEFAULT_C_OUT
    edge_select: int = DEFAULT_SELECT
    seed: int = 0
    # output units per parameter group: translation (voxels), rotation
    # (radians), scale deviation, shear
    head_scales: list[float] = field(default_factory=lambda: [1.0, 0.05, 0.02, 0.02])

    def __post_init__(self):
        if self.variant not in (1, 2, 3, 4):
            raise ArgumentError(f"variant must be 1-4, got {self.variant}")
        if self.levels < 1:
            raise ArgumentError("levels must be >= 1")
        self.head_scales = [float(v) for v in self.head_scales]
        if len(self.head_scales) != 4 or min(self.head_scales) <= 0:
            raise ArgumentError("head_scales needs four positive entries")
        if self.base_channels < 1 or self.fc_hidden < 1 or self.pool_grid < 1:
            raise ArgumentError("channel counts must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ArgumentError("dropout_p must lie in [0, 1)")
        if self.edge_select > self.edge_c_out:
            raise ArgumentError("edge_select must not exceed edge_c_out")

    def as_dict(self) -> dict:
        return asdict(self)


class _DownBlock(nn.Module):
    def __init__(self, cin, cout, dropout_p, edge: EdgeKernelBank | None):
        super().__init__()
        self.edge = edge
        res_in = edge.select_n if edge is not None else cin
        self.res = ResidualBlock(res_in, cout, dropout_p)

    def forward(self, x):
        if self.edge is not None:
            x = self.edge(x)
        return F.avg_pool3d(self.res(x), 2)


class RigidRegNet(nn.Module):
    kind = "rigid"

    def __init__(self, cfg: RigidModelConfig | None = None, **overrides):
        super().__init__()
        cfg = cfg or RigidModelConfig(**overrides)
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        sel = cfg.edge_select

        def bank(cin, k):
            return EdgeKernelBank(cin, cfg.edge_c_out, sel, seed=cfg.seed * 1000 + k)

        if cfg.variant == 1:
            self.edge_moving = FrozenLaplacian(sel)
            self.edge_fixed = FrozenLaplacian(sel)
        else:
            self.edge_moving = bank(1, 0)
            self.edge_fixed = bank(1, 1)

        widths = [cfg.base_channels * 2 ** i for i in range(cfg.levels)]
        if cfg.variant in (1, 2):
            self.stem = nn.Identity()
            cin = 2 * sel
        else:
            self.stem = nn.Sequential(
                conv3(2 * sel, cfg.base_channels),
                nn.ReLU(),
                ResidualBlock(cfg.base_channels, cfg.base_channels, cfg.dropout_p),
            )
            cin = cfg.base_channels
        blocks = []
        for i, w in enumerate(widths):
            with_edge = (cfg.variant == 3 and i == 0) or cfg.variant == 4
            blocks.append(_DownBlock(cin, w, cfg.dropout_p, bank(cin, 2 + i) if with_edge else None))
            cin = w
        self.down = nn.ModuleList(blocks)
        self.refine = ResidualBlock(cin, cin, cfg.dropout_p)
        self.fc1 = nn.Linear(cin * cfg.pool_grid ** 3, cfg.fc_hidden)
        self.head_dropout = nn.Dropout(cfg.dropout_p)
        self.fc2 = nn.Linear(cfg.fc_hidden, N_PARAMS)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)
        self.register_buffer(
            "head_scale", torch.tensor(cfg.head_scales, dtype=torch.float32).repeat_interleave(3)
        )

    def edge_banks(self) -> dict[str, EdgeKernelBank]:
        return {n: m for n, m in self.named_modules() if isinstance(m, EdgeKernelBank)}

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        """``(N, 1, X, Y, Z)`` pair -> ``(N, 12)`` affine parameters."""
        if moving.shape != fixed.shape:
            raise ShapeError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} differ")
        x = torch.cat([self.edge_moving(moving), self.edge_fixed(fixed)], dim=1)
        x = self.stem(x)
        for block in self.down:
            x = block(x)
        x = self.refine(x)
        x = F.adaptive_avg_pool3d(x, self.cfg.pool_grid).flatten(1)
        x = self.head_dropout(F.relu(self.fc1(x)))
        return self.fc2(x) * self.head_scale


def _as_batch(vol) -> torch.Tensor:
    if isinstance(vol, Volume3D):
        return torch.from_numpy(vol.data)[None, None]
    return vol


def rigid_forward(model: RigidRegNet, moving, fixed) -> AffineTransform:
    """Predict the affine for one pair (model evaluated as-is, no mode switch)."""
    if isinstance(moving, Volume3D) and moving.dims != fixed.dims:
        raise ShapeError(f"moving {moving.dims} and fixed {fixed.dims} differ")
    p = next(model.parameters())
    with torch.no_grad():
        out = model(_as_batch(moving).to(p), _as_batch(fixed).to(p))
    return AffineTransform(out[0].double().cpu().numpy())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def affine_errors(pred: AffineTransform, gt: AffineTransform) -> tuple[np.ndarray, float]:
    """Per-axis absolute translation error (voxels) and residual rotation angle (degrees).

    The rotation is the polar factor of ``A_gt^-1 A_pred``.
    """
    mp, mg = pred.matrix, gt.matrix
    t_err = np.abs(mp[:3, 3] - mg[:3, 3])
    resid = np.linalg.solve(mg[:3, :3], mp[:3, :3])
    u, _, vt = np.linalg.svd(resid)
    rot = u @ vt
    cos = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    return t_err, float(np.degrees(np.arccos(cos)))
