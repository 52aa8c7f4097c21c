"""``edgereg`` command-line interface.

Exit codes: 0 success, 2 argument error, 3 data/format/checkpoint error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import read_checkpoint
from .edge_kernels import export_evolution, export_heatmaps, load_snapshots, pca_project, snapshot, write_pca_csv
from .errors import ArgumentError, DataError, EdgeRegError, FormatError, NumericError, ShapeError
from .pipeline import evaluate, load_config, register, train
from .uncertainty import DEFAULT_PASSES, mc_predict, render_uncertainty
from .volume_io import PhantomPair, generate_phantom_pair, write_field, write_volume

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("edgereg")


def _cmd_gen_phantom(args) -> int:
    out = Path(args.out)
    for i in range(args.count):
        pair = generate_phantom_pair(
            args.seed + i, tuple(args.dims), args.affine_magnitude, args.disp_magnitude,
            args.modality_shift, max_rotation_deg=args.max_rotation, rigid_only=args.rigid_only,
        )
        target = out if args.count == 1 else out / f"pair_{args.seed + i:04d}"
        pair.save(target)
        log.info("wrote %s", target)
    return EXIT_OK


def _overrides(items) -> dict[str, str]:
    result = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ArgumentError(f"--set expects key=value, got {item!r}")
        result[key.strip()] = value.strip()
    return result


def _cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))

    def progress(row):
        log.info("epoch %d  D=%.6f  R=%.6f  total=%.6f", row["step"], row["D"], row["R"], row["total"])

    res = train(cfg, out_dir=args.out, progress=progress)
    print(res.checkpoint_path)
    return EXIT_OK


def _cmd_register(args) -> int:
    pair = PhantomPair.load(args.pair)
    res = register(pair.moving, pair.fixed, args.rigid, args.nonrigid, args.mc_passes, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(res.warped, out / "warped.vol")
    np.savetxt(out / "affine.txt", res.affine.params[None], fmt="%.17g")
    if res.field is not None:
        write_field(res.field, out / "field.vol")
    b = res.loss
    (out / "loss.csv").write_text(
        f"D,R,alpha,total\n{b.D:.10g},{b.R:.10g},{b.alpha:.10g},{b.total:.10g}\n", encoding="utf-8"
    )
    if res.uncertainty is not None:
        np.save(out / "variance.npy", res.uncertainty.variance_map)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    rows = evaluate(args.pairs, args.rigid, args.nonrigid, args.out)
    for r in rows:
        log.info("%s dice_wmgm=%.4f dice_mask=%.4f", r["pair_id"], r["dice_wmgm"], r["dice_mask"])
    return EXIT_OK


def _cmd_uncertainty(args) -> int:
    ckpt = read_checkpoint(args.model)
    model = ckpt.build_model()
    pair = PhantomPair.load(args.pair)
    res = mc_predict(model, pair.moving, pair.fixed, args.passes, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(res.mean_warped, out / "mean.vol")
    np.save(out / "variance.npy", res.variance_map)
    if res.param_variance is not None:
        np.savetxt(out / "param_variance.txt", res.param_variance[None], fmt="%.10g")
    index = args.slice_index if args.slice_index is not None else res.variance_map.shape[args.slice_axis] // 2
    render_uncertainty(res, args.slice_axis, index, out)
    return EXIT_OK


def _cmd_inspect_kernels(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.snapshots:
        series = load_snapshots(args.snapshots)
    else:
        model = read_checkpoint(args.model).build_model()
        series = {name: [snapshot(b, 0)] for name, b in model.edge_banks().items()}
    if not series:
        raise ArgumentError("model has no trainable edge banks")
    for name, snaps in series.items():
        sub = out / name.replace(".", "_")
        export_heatmaps(snaps[-1], sub / "heatmaps")
        points, ratios = pca_project(snaps[-1])
        write_pca_csv(points, ratios, sub / "pca.csv")
        if len(snaps) > 1:
            export_evolution(snaps, sub / "evolution")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgereg", description="Edge-kernel registration networks")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads (1 = bit-deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantom", help="write synthetic phantom pair(s)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    g.add_argument("--affine-magnitude", "--affine-mag", type=float, default=0.0)
    g.add_argument("--max-rotation", type=float, default=None, help="degrees (default: affine magnitude)")
    g.add_argument("--rigid-only", action="store_true")
    g.add_argument("--disp-magnitude", "--disp-mag", type=float, default=0.0)
    g.add_argument("--modality-shift", action="store_true")
    g.set_defaults(func=_cmd_gen_phantom)

    t = sub.add_parser("train", help="train a rigid or non-rigid model")
    t.add_argument("--config", required=True, help="key = value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("register", help="register one pair")
    r.add_argument("--rigid", required=True)
    r.add_argument("--nonrigid", default=None)
    r.add_argument("--pair", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mc-passes", type=int, default=0)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=_cmd_register)

    e = sub.add_parser("evaluate", help="evaluate a directory of pairs to CSV")
    e.add_argument("--rigid", required=True)
    e.add_argument("--nonrigid", default=None)
    e.add_argument("--pairs", required=True)
    e.add_argument("--out", required=True, help="CSV path")
    e.set_defaults(func=_cmd_evaluate)

    u = sub.add_parser("uncertainty", help="MC dropout maps for one pair")
    u.add_argument("--model", required=True)
    u.add_argument("--pair", required=True)
    u.add_argument("--passes", type=int, default=DEFAULT_PASSES)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)
    u.add_argument("--slice-axis", type=int, default=2)
    u.add_argument("--slice-index", type=int, default=None)
    u.set_defaults(func=_cmd_uncertainty)

    k = sub.add_parser("inspect-kernels", help="heatmaps, PCA CSV and evolution strips")
    src = k.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--snapshots", help="kernel_snapshots.npz written by train")
    k.add_argument("--out", required=True)
    k.set_defaults(func=_cmd_inspect_kernels)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ArgumentError, ShapeError) as exc:
        print(f"edgereg: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except NumericError as exc:
        print(f"edgereg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DataError, FileNotFoundError) as exc:
        print(f"edgereg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EdgeRegError as exc:
        print(f"edgereg: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
