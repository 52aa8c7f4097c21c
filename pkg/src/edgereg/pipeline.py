"""Training loops, the two-stage registration pipeline and evaluation."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import MASK_LABELS, WMGM_LABELS, DisplacementField, LabelVolume, Volume3D
from .edge_kernels import KernelSnapshot, save_snapshots, snapshot
from .errors import ArgumentError, NumericError
from .losses import LossBreakdown, LossConfig, local_mi_loss, smoothness, total_loss
from .metrics import dice, folding_fraction, residual_image
from .nonrigid_net import NonRigidModelConfig, NonRigidRegNet, nonrigid_forward
from .rigid_net import RigidModelConfig, RigidRegNet, rigid_forward
from .spatial_transform import (
    AffineTransform,
    affine_warp,
    identity_grid,
    sample_nearest,
    trilinear_warp,
)
from .uncertainty import UncertaintyResult, mc_predict
from .volume_io import PhantomPair, generate_phantom_pair, list_pair_dirs

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "D", "R", "alpha", "total"]
EVAL_HEADER = ["pair_id", "dice_wmgm", "dice_mask", "folding_pct", "mean_abs_residual"]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "rigid"
    variant: int = 4
    epochs: int = 500
    learning_rate: float = 1e-4
    batch_size: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    snapshot_every: int = 10
    dataset: str = "phantom:count=20"
    base_channels: int = 16
    levels: int = 3
    dropout_p: float = 0.1
    skip_connections: bool = True
    dilation_rates: list[int] = field(default_factory=lambda: [6, 12, 18])
    weight_decay: float = 0.01
    rigid_checkpoint: str = ""

    def __post_init__(self):
        if self.stage not in ("rigid", "nonrigid"):
            raise ArgumentError("stage must be 'rigid' or 'nonrigid'")
        if self.variant not in (1, 2, 3, 4):
            raise ArgumentError("variant must be 1-4")
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.batch_size < 1 or self.snapshot_every < 1:
            raise ArgumentError("batch_size and snapshot_every must be >= 1")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    def model_config(self):
        common = dict(variant=self.variant, base_channels=self.base_channels, levels=self.levels,
                      dropout_p=self.dropout_p, seed=self.seed)
        if self.stage == "rigid":
            return RigidModelConfig(**common)
        return NonRigidModelConfig(skip_connections=self.skip_connections,
                                   dilation_rates=list(self.dilation_rates), **common)

    def effective_loss(self) -> LossConfig:
        """The rigid stage always scores with global MI."""
        if self.stage == "rigid":
            return LossConfig(**{**asdict(self.loss), "window": 0})
        return self.loss


_LOSS_KEYS = {f.name for f in fields(LossConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss"}


def _coerce(value: str, target):
    if isinstance(target, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ArgumentError(f"not a boolean: {value!r}")
    if isinstance(target, list):
        return [int(v) for v in value.replace(",", " ").split()]
    try:
        return type(target)(value.strip())
    except ValueError as exc:
        raise ArgumentError(f"bad value {value!r}: {exc}") from exc


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Flat ``key = value`` lines, ``#`` comments. Loss keys sit at top level."""
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ArgumentError(f"config line {n}: expected 'key = value'")
        raw[key.strip()] = value.strip()
    raw.update(overrides or {})
    base, loss_base = TrainConfig(), LossConfig()
    kw, loss_kw = {}, {}
    for key, value in raw.items():
        if key in _LOSS_KEYS:
            loss_kw[key] = _coerce(value, getattr(loss_base, key))
        elif key in _TRAIN_KEYS:
            kw[key] = _coerce(value, getattr(base, key))
        else:
            raise ArgumentError(f"unknown config key {key!r}")
    return TrainConfig(loss=LossConfig(**loss_kw), **kw)


def load_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), overrides)


def parse_dataset_spec(spec: str) -> dict:
    """``phantom:count=200,seed=0,affine=4,rotation=5,disp=2,rigid_only=1,modality_shift=0,dims=32``."""
    head, _, body = spec.partition(":")
    if head != "phantom":
        raise ArgumentError(f"not a generator spec: {spec!r}")
    opts = {"count": 20, "seed": 0, "affine": 0.0, "rotation": None, "disp": 0.0,
            "rigid_only": False, "modality_shift": False, "dims": 32}
    for item in filter(None, (s.strip() for s in body.split(","))):
        k, sep, v = item.partition("=")
        if not sep or k not in opts:
            raise ArgumentError(f"bad dataset option {item!r}")
        if k in ("rigid_only", "modality_shift"):
            opts[k] = _coerce(v, True)
        elif k in ("count", "seed", "dims"):
            opts[k] = int(v)
        else:
            opts[k] = float(v)
    return opts


def phantoms_from_spec(spec: str) -> list[PhantomPair]:
    o = parse_dataset_spec(spec)
    return [
        generate_phantom_pair(
            o["seed"] + i, (o["dims"],) * 3, o["affine"], o["disp"], o["modality_shift"],
            max_rotation_deg=o["rotation"], rigid_only=o["rigid_only"],
        )
        for i in range(o["count"])
    ]


def load_dataset(dataset) -> list[PhantomPair]:
    if isinstance(dataset, list):
        return dataset
    if isinstance(dataset, str) and dataset.startswith("phantom:"):
        return phantoms_from_spec(dataset)
    root = Path(dataset)
    if not root.exists():
        raise ArgumentError(f"dataset {dataset!r} is neither a generator spec nor a directory")
    return [PhantomPair.load(d) for d in list_pair_dirs(root)]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: nn.Module
    log_rows: list[dict]
    snapshots: dict[str, list[KernelSnapshot]]
    checkpoint_path: Path | None = None


def build_model(cfg: TrainConfig) -> nn.Module:
    mc = cfg.model_config()
    return RigidRegNet(mc) if cfg.stage == "rigid" else NonRigidRegNet(mc)


def _stack(vols: list[Volume3D]) -> torch.Tensor:
    return torch.stack([torch.from_numpy(v.data)[None] for v in vols])


def _prealign(moving: torch.Tensor, fixed: torch.Tensor, rigid: nn.Module) -> torch.Tensor:
    rigid.eval()
    out = []
    with torch.no_grad():
        for m, f in zip(moving, fixed):
            params = rigid(m[None], f[None]).double()
            out.append(affine_warp(m[None].double(), params).clamp(0.0, 1.0).float()[0])
    return torch.stack(out)


def _write_log(rows: list[dict], path: Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, LOG_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k == "step" else f"{r[k]:.10g}") for k in LOG_HEADER})


def train(cfg: TrainConfig, dataset=None, out_dir=None, progress=None) -> TrainResult:
    """Minimise the unsupervised loss with AdamW.

    ``dataset`` overrides ``cfg.dataset`` (a list of :class:`PhantomPair`).
    With ``out_dir`` the final checkpoint (``model.erck``), the per-epoch
    loss log (``train_log.csv``) and kernel snapshots are written there. A
    non-finite loss restores the last good parameters, saves them as
    ``last_good.erck`` and raises :class:`NumericError`.
    """
    pairs = load_dataset(dataset if dataset is not None else cfg.dataset)
    if not pairs:
        raise ArgumentError("dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    loss_cfg = cfg.effective_loss()
    moving, fixed = _stack([p.moving for p in pairs]), _stack([p.fixed for p in pairs])
    if cfg.stage == "nonrigid" and cfg.rigid_checkpoint:
        moving = _prealign(moving, fixed, load_checkpoint(cfg.rigid_checkpoint, "rigid"))

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    banks = model.edge_banks()
    snaps: dict[str, list[KernelSnapshot]] = {name: [snapshot(b, 0)] for name, b in banks.items()}
    rows: list[dict] = []
    good_state = copy.deepcopy(model.state_dict())
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(pairs)
    model.train()

    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = model(moving[idx], fixed[idx])
            loss, br, _ = total_loss(fixed[idx], moving[idx], pred, loss_cfg)
            if not math.isfinite(br.total):
                model.load_state_dict(good_state)
                if out is not None:
                    save_checkpoint(model, out / "last_good.erck", {"epoch": epoch - 1})
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: D={br.D}, R={br.R};"
                    f" parameters restored to the end of epoch {epoch - 1}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += len(idx) * np.array([br.D, br.R, br.total])
        d, r, tot = sums / n
        rows.append({"step": epoch, "D": d, "R": r, "alpha": br.alpha, "total": tot})
        good_state = copy.deepcopy(model.state_dict())
        if epoch % cfg.snapshot_every == 0:
            for name, b in banks.items():
                snaps[name].append(snapshot(b, epoch))
        if progress is not None:
            progress(rows[-1])

    model.eval()
    model.checkpoint_meta = {
        "epoch": cfg.epochs,
        "optimizer": f"AdamW(weight_decay={cfg.weight_decay})",
        "learning_rate": repr(cfg.learning_rate),
        "metrics": '{"final_D": %.10g, "final_total": %.10g}' % (rows[-1]["D"], rows[-1]["total"]),
    }
    ckpt_path = None
    if out is not None:
        ckpt_path = save_checkpoint(model, out / "model.erck")
        _write_log(rows, out / "train_log.csv")
        if banks:
            save_snapshots(snaps, out / "kernel_snapshots.npz")
    return TrainResult(model, rows, snaps, ckpt_path)


# --------------------------------------------------------------------------
# registration and evaluation
# --------------------------------------------------------------------------

@dataclass
class RegistrationResult:
    affine: AffineTransform
    field: DisplacementField | None
    warped: Volume3D
    aligned: Volume3D
    loss: LossBreakdown
    metrics: dict | None = None
    uncertainty: UncertaintyResult | None = None


def _model(obj, kind: str) -> nn.Module:
    if isinstance(obj, nn.Module):
        if getattr(obj, "kind", None) != kind:
            raise ArgumentError(f"expected a {kind} model, got {getattr(obj, 'kind', type(obj).__name__)}")
        return obj
    return load_checkpoint(obj, kind)


def register(moving: Volume3D, fixed: Volume3D, rigid_ckpt, nonrigid_ckpt=None, mc_passes: int = 0,
             seed: int = 0, loss_cfg: LossConfig | None = None) -> RegistrationResult:
    """Affine stage, then (optionally) the deformable stage on the aligned pair."""
    loss_cfg = loss_cfg or LossConfig()
    rigid = _model(rigid_ckpt, "rigid").eval()
    affine = rigid_forward(rigid, moving, fixed)
    aligned = affine_warp(moving, affine)
    fld = None
    warped = aligned
    last_model, last_moving = rigid, moving
    if nonrigid_ckpt is not None:
        nonrigid = _model(nonrigid_ckpt, "nonrigid").eval()
        fld = nonrigid_forward(nonrigid, aligned, fixed)
        warped = trilinear_warp(aligned, fld)
        last_model, last_moving = nonrigid, aligned
    d = local_mi_loss(fixed, warped, loss_cfg)
    r = smoothness(fld, loss_cfg) if fld is not None else 0.0
    breakdown = LossBreakdown(d, r, loss_cfg.alpha, d + loss_cfg.alpha * r)
    unc = mc_predict(last_model, last_moving, fixed, mc_passes, seed) if mc_passes > 0 else None
    return RegistrationResult(affine, fld, warped, aligned, breakdown, None, unc)


def warp_labels_two_stage(labels: LabelVolume, affine: AffineTransform,
                          fld: DisplacementField | None = None) -> LabelVolume:
    """Nearest-neighbour label lookup at ``A (p + u(p)) + b`` (one rounding only)."""
    dims = labels.dims
    m = affine.matrix
    centre = torch.tensor([(n - 1) / 2.0 for n in dims], dtype=torch.float64).reshape(1, 3, 1, 1, 1)
    q = identity_grid(dims).unsqueeze(0)
    if fld is not None:
        q = q + torch.from_numpy(fld.data.astype(np.float64))[None]
    coords = torch.einsum("ij,njxyz->nixyz", torch.from_numpy(m[:3, :3]), q - centre)
    coords = coords + torch.from_numpy(m[:3, 3]).reshape(1, 3, 1, 1, 1) + centre
    src = torch.from_numpy(labels.data.astype(np.float64))[None, None]
    out = sample_nearest(src, coords)[0, 0].numpy()
    return LabelVolume(np.rint(out).astype(np.uint8), labels.spacing)


def pair_metrics(pair: PhantomPair, result: RegistrationResult) -> dict:
    warped_labels = warp_labels_two_stage(pair.moving_labels, result.affine, result.field)
    return {
        "dice_wmgm": dice(pair.fixed_labels, warped_labels, WMGM_LABELS),
        "dice_mask": dice(pair.fixed_labels, warped_labels, MASK_LABELS),
        "folding_pct": 100.0 * folding_fraction(result.field) if result.field is not None else 0.0,
        "mean_abs_residual": float(np.abs(residual_image(pair.fixed, result.warped)).mean()),
    }


def evaluate(pairs, rigid_ckpt, nonrigid_ckpt=None, out_csv=None) -> list[dict]:
    """Register every pair and collect the evaluation rows (optionally as CSV)."""
    if isinstance(pairs, (str, Path)):
        dirs = list_pair_dirs(pairs)
        named = [(d.name, PhantomPair.load(d)) for d in dirs]
    else:
        named = [(f"pair_{i:04d}", p) for i, p in enumerate(pairs)]
    if not named:
        raise ArgumentError("no pairs to evaluate")
    rigid = _model(rigid_ckpt, "rigid")
    nonrigid = _model(nonrigid_ckpt, "nonrigid") if nonrigid_ckpt is not None else None
    rows = []
    for pid, pair in named:
        res = register(pair.moving, pair.fixed, rigid, nonrigid)
        rows.append({"pair_id": pid, **pair_metrics(pair, res)})
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, EVAL_HEADER, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (r[k] if k == "pair_id" else f"{r[k]:.10g}") for k in EVAL_HEADER})
    return rows
