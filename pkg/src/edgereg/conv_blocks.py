"""Residual, dilated, inception and dense-fusion blocks.

Every block keeps the spatial size of its input; downsampling is left to the
enclosing encoder arm. Each block also reports how it widens a receptive
interval (``rf_expand``) so :func:`edgereg.nonrigid_net.receptive_field`
can walk a network without running it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ArgumentError, ShapeError


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    dropout_p: float = 0.1
    dilation_rates: list[int] = field(default_factory=lambda: [6, 12, 18])
    dense_growth: int = 16
    pool: str = "average"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ArgumentError("channel counts must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ArgumentError("dropout_p must lie in [0, 1)")
        rates = list(self.dilation_rates)
        if not rates or rates[0] < 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ArgumentError("dilation rates must be strictly increasing and >= 1")
        if self.dense_growth < 1:
            raise ArgumentError("dense_growth must be >= 1")
        if self.pool not in ("average", "none"):
            raise ArgumentError("pool must be 'average' or 'none'")


def _check_channels(x: torch.Tensor, expected: int, name: str):
    if x.shape[1] != expected:
        raise ShapeError(f"{name} expects {expected} input channels, got {x.shape[1]}")


def conv3(cin, cout, dilation=1):
    return nn.Conv3d(cin, cout, 3, padding=dilation, dilation=dilation)


def conv1(cin, cout):
    return nn.Conv3d(cin, cout, 1)


class ResidualBlock(nn.Module):
    """Two conv-BN-ReLU-dropout units plus an identity or 1x1x1 shortcut."""

    def __init__(self, in_channels: int, out_channels: int, dropout_p: float = 0.1):
        super().__init__()
        self.in_channels = in_channels
        self.main = nn.Sequential(
            conv3(in_channels, out_channels),
            nn.BatchNorm3d(out_channels),
            nn.ReLU(inplace=False),
            nn.Dropout(dropout_p),
            conv3(out_channels, out_channels),
            nn.BatchNorm3d(out_channels),
            nn.ReLU(inplace=False),
            nn.Dropout(dropout_p),
        )
        self.skip = nn.Identity() if in_channels == out_channels else conv1(in_channels, out_channels)

    @classmethod
    def from_config(cls, cfg: BlockConfig):
        return cls(cfg.in_channels, cfg.out_channels, cfg.dropout_p)

    def forward(self, x):
        _check_channels(x, self.in_channels, "ResidualBlock")
        return self.main(x) + self.skip(x)

    def rf_expand(self, lo, hi):
        return lo - 2, hi + 2


class DilatedBlock(nn.Module):
    """Parallel dilated 3x3x3 convs (ReLU then BN), concatenated, reduced by 1x1x1."""

    def __init__(self, in_channels: int, out_channels: int, rates=(6, 12, 18)):
        super().__init__()
        self.in_channels = in_channels
        self.rates = tuple(rates)
        self.branches = nn.ModuleList(
            nn.Sequential(conv3(in_channels, in_channels, d), nn.ReLU(), nn.BatchNorm3d(in_channels))
            for d in self.rates
        )
        self.reduce = conv1(in_channels * len(self.rates), out_channels)

    @classmethod
    def from_config(cls, cfg: BlockConfig):
        return cls(cfg.in_channels, cfg.out_channels, cfg.dilation_rates)

    def forward(self, x):
        _check_channels(x, self.in_channels, "DilatedBlock")
        return self.reduce(torch.cat([b(x) for b in self.branches], dim=1))

    def rf_expand(self, lo, hi):
        r = max(self.rates)
        return lo - r, hi + r


class InceptionBlock(nn.Module):
    """Four branches (1x1, 1x1->3x3, 1x1->5x5, maxpool->1x1), out_channels/4 each."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if out_channels % 4:
            raise ArgumentError(f"inception out_channels must be divisible by 4, got {out_channels}")
        b = out_channels // 4
        self.in_channels = in_channels
        self.branch1 = nn.Sequential(conv1(in_channels, b), nn.ReLU())
        self.branch3 = nn.Sequential(conv1(in_channels, b), nn.ReLU(), conv3(b, b), nn.ReLU())
        self.branch5 = nn.Sequential(
            conv1(in_channels, b), nn.ReLU(), nn.Conv3d(b, b, 5, padding=2), nn.ReLU()
        )
        self.branch_pool = nn.Sequential(
            nn.MaxPool3d(3, stride=1, padding=1), conv1(in_channels, b), nn.ReLU()
        )

    @classmethod
    def from_config(cls, cfg: BlockConfig):
        return cls(cfg.in_channels, cfg.out_channels)

    def forward(self, x):
        _check_channels(x, self.in_channels, "InceptionBlock")
        return torch.cat(
            [self.branch1(x), self.branch3(x), self.branch5(x), self.branch_pool(x)], dim=1
        )

    def rf_expand(self, lo, hi):
        return lo - 2, hi + 2


class DenseFusionBlock(nn.Module):
    """Three densely connected 3x3x3 conv+ReLU layers, then a 1x1x1 projection."""

    def __init__(self, in_channels: int, out_channels: int, growth: int = 16, layers: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.layers = nn.ModuleList(
            nn.Sequential(conv3(in_channels + k * growth, growth), nn.ReLU()) for k in range(layers)
        )
        self.fused_channels = in_channels + layers * growth
        self.project = conv1(self.fused_channels, out_channels)

    @classmethod
    def from_config(cls, cfg: BlockConfig):
        return cls(cfg.in_channels, cfg.out_channels, cfg.dense_growth)

    def fused(self, x):
        feats = x
        for layer in self.layers:
            feats = torch.cat([feats, layer(feats)], dim=1)
        return feats

    def forward(self, x):
        _check_channels(x, self.in_channels, "DenseFusionBlock")
        return self.project(self.fused(x))

    def rf_expand(self, lo, hi):
        n = len(self.layers)
        return lo - n, hi + n
