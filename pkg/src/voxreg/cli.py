"""Command-line entry point: ``voxreg {synth,train,register,evaluate,gradcheck,params}``.

Configuration precedence is defaults < ``--config`` JSON file < flags.  The
resolved configuration is echoed to stderr as JSON.  Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as vio
from .gradcheck import run_suite
from .loss import LossConfig, lncc_map
from .metrics import evaluate_field
from .network import ArchConfig, build_network, param_count
from .synth import RECOVERY_SPEC, SynthSpec, make_pair
from .tensor import ShapeError
from .trainer import (
    NumericError,
    TrainConfig,
    from_checkpoint,
    register,
    to_checkpoint,
    train,
    write_log_csv,
)
from .warp import warp_nearest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("voxreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_arch(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--levels", type=int)
    g.add_argument("--base-channels", type=int)
    g.add_argument("--max-channels", type=int)
    g.add_argument("--branch-channels", type=int)
    g.add_argument("--refine-blocks", type=int)
    g.add_argument("--dilations", type=_int_list, help="e.g. 1,2,4")
    g.add_argument("--merge", choices=["concat", "sum"])


def _add_loss(p):
    g = p.add_argument_group("loss")
    g.add_argument("--alpha", type=float)
    g.add_argument("--window", type=int, help="window half-width (4 -> 9x9x9)")


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON file with defaults for any flag")
    p.add_argument("--threads", type=int, help="cap on kernel threads (env VOXREG_THREADS)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxreg", description="Unsupervised deformable registration of 3D volumes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic fixed/moving pairs with ground truth")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--blobs", type=int)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--pairs", type=int)
    p.add_argument("--preset", choices=["default", "recovery"], help="base phantom settings before overrides")
    p.add_argument("--blob-width", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--label-level", type=float)
    p.add_argument("--texture", type=float)
    p.add_argument("--levels", type=int, help="network depth the dims must be compatible with")

    p = sub.add_parser("train", help="train on a directory of pair_* folders")
    _add_common(p)
    _add_arch(p)
    _add_loss(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--normalize", action="store_true", default=None, help="scale inputs to [0, 1]")

    p = sub.add_parser("register", help="predict a field with a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--out-field", type=Path, required=True)
    p.add_argument("--out-warped", type=Path, required=True)

    p = sub.add_parser("evaluate", help="Dice / FNJ / displacement report")
    _add_common(p)
    _add_loss(p)
    p.add_argument("--field", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--fixed", type=Path)
    p.add_argument("--moving", type=Path)
    p.add_argument("--fixed-labels", type=Path)
    p.add_argument("--moving-labels", type=Path)
    p.add_argument("--out-json", type=Path)
    p.add_argument("--out-csv", type=Path, help="one-row summary table")
    p.add_argument("--out-dice-csv", type=Path, help="per-structure Dice")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")

    p = sub.add_parser("params", help="print the parameter count of an architecture")
    _add_common(p)
    _add_arch(p)
    return parser


_ARCH_FLAGS = {
    "levels": "levels",
    "base_channels": "base_channels",
    "max_channels": "max_channels",
    "branch_channels": "branch_channels",
    "refine_blocks": "refine_blocks",
    "dilations": "dilation_rates",
    "merge": "merge_mode",
}


def _resolve(args) -> dict:
    """Merge defaults, the JSON config file and explicit flags."""
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(args.config.read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command")}
    known = set(vars(args)) - {"config", "command"}
    unknown = set(file_cfg) - known
    if unknown:
        raise UsageError(f"unknown keys in config file: {sorted(unknown)}")
    merged = {**file_cfg, **flags}
    merged.setdefault("seed", 0)
    if "threads" not in merged and os.environ.get("VOXREG_THREADS"):
        merged["threads"] = int(os.environ["VOXREG_THREADS"])
    return merged


def _arch(cfg: dict) -> ArchConfig:
    kwargs = {field: cfg[flag] for flag, field in _ARCH_FLAGS.items() if flag in cfg}
    return ArchConfig(**kwargs)


def _loss_cfg(cfg: dict) -> LossConfig:
    kwargs = {}
    if "alpha" in cfg:
        kwargs["alpha"] = cfg["alpha"]
    if "window" in cfg:
        kwargs["window"] = cfg["window"]
    return LossConfig(**kwargs)


def _echo(command: str, resolved: dict) -> None:
    shown = {k: (str(v) if isinstance(v, Path) else v) for k, v in resolved.items()}
    print(json.dumps({"command": command, "config": shown}, default=list, sort_keys=True), file=sys.stderr)


def cmd_synth(cfg: dict) -> int:
    spec = RECOVERY_SPEC if cfg.get("preset") == "recovery" else SynthSpec()
    keys = ("blobs", "amplitude", "sigma", "seed", "label_level", "texture")
    overrides = {k: cfg[k] for k in keys if k in cfg}
    if "blob_width" in cfg:
        overrides["blob_width"] = tuple(cfg["blob_width"])
    if "dims" in cfg:
        overrides["dims"] = tuple(cfg["dims"])
    if "levels" in cfg:
        overrides["divisor"] = 2 ** (cfg["levels"] - 1)
    spec = replace(spec, **overrides)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.get("pairs", 1)):
        pair = make_pair(replace(spec, seed=spec.seed + i))
        d = out / f"pair_{i:03d}"
        d.mkdir(exist_ok=True)
        vio.save_volume(pair.fixed, d / "fixed")
        vio.save_volume(pair.moving, d / "moving")
        vio.save_field(pair.u_true, d / "u_true")
        vio.save_labels(pair.labels_fixed, d / "labels_fixed")
        vio.save_labels(pair.labels_moving, d / "labels_moving")
        norm = np.linalg.norm(pair.u_true, axis=0)
        sim = float(lncc_map(pair.fixed, pair.moving).mean())
        print(
            f"{d.name}: dims {spec.dims} labels {len(np.unique(pair.labels_fixed)) - 1} "
            f"max|u| {norm.max():.4f} mean|u| {norm.mean():.4f} lncc(f,m)/N {sim:.4f}"
        )
    return EXIT_OK


def _load_pairs(data: Path, normalize: bool):
    dirs = sorted(p for p in data.glob("pair_*") if p.is_dir()) if data.is_dir() else []
    if not dirs:
        raise vio.VolumeIOError(f"no pair_* directories in {data}")
    return [
        (vio.load_volume(d / "fixed", normalize), vio.load_volume(d / "moving", normalize)) for d in dirs
    ]


def cmd_train(cfg: dict) -> int:
    arch = _arch(cfg)
    tcfg = TrainConfig(
        lr=cfg.get("lr", 1e-4),
        # with only --steps given, cycle through the data until the step budget is spent
        epochs=cfg.get("epochs", 1 if "steps" not in cfg else 10**9),
        max_steps=cfg.get("steps"),
        batch_size=cfg.get("batch_size", 1),
        seed=cfg["seed"],
        loss=_loss_cfg(cfg),
        checkpoint_every=cfg.get("checkpoint_every", 0),
    )
    pairs = _load_pairs(Path(cfg["data"]), bool(cfg.get("normalize", True)))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    extra = {"train": {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}}

    def callback(step, params, row):
        if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            vio.save_checkpoint(to_checkpoint(params, None, extra), out / f"checkpoint_{step:06d}.vxrg")

    result = train(pairs, tcfg, arch, callback=callback)
    vio.save_checkpoint(to_checkpoint(result.params, result.state, extra), out / "checkpoint.vxrg")
    write_log_csv(result.log, out / "loss.csv")
    first, last = result.log[0], result.log[-1]
    print(f"trained {last.step} steps: total loss {first.total:.6f} -> {last.total:.6f}")
    print(f"checkpoint: {out / 'checkpoint.vxrg'}")
    return EXIT_OK


def _load_model(path: Path):
    params, _ = from_checkpoint(vio.load_checkpoint(path))
    return params


def cmd_register(cfg: dict) -> int:
    params = _load_model(Path(cfg["checkpoint"]))
    f = vio.load_volume(cfg["fixed"])
    m = vio.load_volume(cfg["moving"])
    t0 = time.perf_counter()
    u, warped = register(params, f, m)
    elapsed = time.perf_counter() - t0
    vio.save_field(u, cfg["out_field"])
    vio.save_volume(warped, cfg["out_warped"])
    print(f"inference time: {elapsed:.3f} s")
    print(f"max|u| {float(np.linalg.norm(u, axis=0).max()):.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    if "field" in cfg:
        u = vio.load_field(cfg["field"])
    elif all(k in cfg for k in ("checkpoint", "fixed", "moving")):
        params = _load_model(Path(cfg["checkpoint"]))
        u, _ = register(params, vio.load_volume(cfg["fixed"]), vio.load_volume(cfg["moving"]))
    else:
        raise UsageError("evaluate needs --field or --checkpoint with --fixed and --moving")
    warped_labels = fixed_labels = None
    if "moving_labels" in cfg and "fixed_labels" in cfg:
        fixed_labels = vio.load_labels(cfg["fixed_labels"])
        warped_labels = warp_nearest(vio.load_labels(cfg["moving_labels"]), u)
    elif "moving_labels" in cfg or "fixed_labels" in cfg:
        raise UsageError("--fixed-labels and --moving-labels must be given together")
    report = evaluate_field(u, warped_labels, fixed_labels)
    if "fixed" in cfg and "moving" in cfg:
        from .loss import sobolev_norm, lncc
        from .tensor import Tensor, no_grad
        from .warp import sample_trilinear

        lcfg = _loss_cfg(cfg)
        f, m = vio.load_volume(cfg["fixed"]), vio.load_volume(cfg["moving"])
        n = float(f.size)
        with no_grad():
            sim = lncc(f, sample_trilinear(m, u), lcfg).item() / n
            reg = sobolev_norm(Tensor(u)).item() / n
        report.losses = {"lncc_term": -sim, "reg_term": lcfg.alpha * reg, "total": -sim + lcfg.alpha * reg}
    text = report.to_json(indent=2)
    print(text)
    if "out_json" in cfg:
        Path(cfg["out_json"]).write_text(text)
    if "out_csv" in cfg:
        Path(cfg["out_csv"]).write_text(report.to_csv_row())
    if "out_dice_csv" in cfg:
        Path(cfg["out_dice_csv"]).write_text(report.dice_csv())
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    failed = 0
    for s in range(cfg["seed"], cfg["seed"] + cfg.get("seeds", 1)):
        print(f"seed {s}")
        for res in run_suite(s):
            print("  " + str(res))
            failed += not res.passed
    print("all checks passed" if not failed else f"{failed} check(s) failed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_params(cfg: dict) -> int:
    params = build_network(_arch(cfg), seed=cfg["seed"])
    print(param_count(params))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by the parser
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
        logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING)
        _echo(args.command, cfg)
        with threadpool_limits(limits=cfg.get("threads")):
            return COMMANDS[args.command](cfg)
    except (UsageError, ValueError, TypeError) as exc:
        if isinstance(exc, (ShapeError, vio.VolumeIOError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, vio.VolumeIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
