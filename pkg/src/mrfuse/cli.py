"""Command-line front end: ``mrfuse <command> ...``.

Every command writes a JSON run manifest next to its outputs before doing
any work and finalises it (status, outputs, timings) when it ends.  Flags
may also come from a ``--config`` file of ``key=value`` lines whose keys
mirror the long flag names; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .meanfield import FusionConfig
from .model import build_model
from .mrf import MRFKernel, format_kernel, format_mrf_net, mrf_overhead_ratio
from .phantom import AugmentationParams, PhantomSpec, generate_phantom
from .studies import (CAPACITY_COLUMNS, capacity_study, convergence_study, oracle_check, regime_splits)
from .tensor import precision_name
from .training import Sample, TrainConfig, TrainingError, evaluate, train, write_metrics_csv
from .volume import VolumeFormatError, VolumeHeader, read_volume, write_volume

logger = logging.getLogger("mrfuse")

IMAGE_SUFFIX = "_image"
LABEL_SUFFIX = "_labels"


class CLIError(Exception):
    """A user-facing failure: bad input, incompatible files, unwritable output."""


# --- manifest ---------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths: Sequence[Path]) -> str:
    """Tree-style hash over the content hashes of every input file (sorted by path)."""
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p])
    h = hashlib.sha1()
    for f in sorted(set(files)):
        h.update(f"{git_blob_hash(f.read_bytes())} {f.name}\n".encode())
    return h.hexdigest()


class RunManifest:
    def __init__(self, path: Path, argv: Sequence[str], config: dict, seed: Optional[int], inputs: Sequence[Path]):
        self.path = Path(path)
        self._t0 = time.perf_counter()
        self.data = {
            "command": ["mrfuse", *argv],
            "config": config,
            "seed": seed,
            "precision": precision_name(),
            "inputs": [str(p) for p in inputs],
            "input_hash": hash_inputs(inputs),
            "outputs": [],
            "status": "running",
            "timings": {"started": datetime.now(timezone.utc).isoformat()},
        }
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")

    def add_output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def finalize(self, status: str, **extra) -> None:
        self.data["status"] = status
        self.data["timings"]["finished"] = datetime.now(timezone.utc).isoformat()
        self.data["timings"]["elapsed_s"] = round(time.perf_counter() - self._t0, 3)
        self.data.update(extra)
        self.write()


# --- helpers ----------------------------------------------------------------

def parse_kv_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CLIError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def parse_int_list(text: str) -> list[int]:
    """``"1,2,5"`` or ``"1..6"``."""
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def parse_grid(text: str) -> tuple[int, int, int]:
    parts = str(text).lower().replace(",", "x").split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"grid must look like 2x2x1, got {text!r}")
    return tuple(int(p) for p in parts)


def parse_shape(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).lower().replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape must be N or D,H,W, got {text!r}")
    return tuple(parts)


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def phantom_spec_from(values: dict[str, str], base: Optional[PhantomSpec] = None) -> PhantomSpec:
    """Build a PhantomSpec from ``key=value`` strings (field names of PhantomSpec)."""
    spec = base or PhantomSpec()
    known = {f.name for f in fields(PhantomSpec)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise CLIError(f"unknown phantom spec key {key!r}")
        if key == "shape":
            updates[key] = parse_shape(raw)
        elif key in ("intensity_mean", "intensity_std"):
            updates[key] = tuple(float(v) for v in raw.split(","))
        elif key == "ood_permutation":
            updates[key] = tuple(int(v) for v in raw.split(",")) if raw else None
        elif key in ("k", "blobs_per_class"):
            updates[key] = int(raw)
        elif key == "regime":
            updates[key] = raw
        else:
            updates[key] = float(raw) if raw else None
    try:
        return replace(spec, **updates)
    except ValueError as exc:
        raise CLIError(f"invalid phantom spec: {exc}") from exc


def save_sample(out_dir: Path, name: str, image: np.ndarray, labels: np.ndarray, k: int) -> list[Path]:
    spatial = image.shape[1:]
    img_paths = write_volume(out_dir / f"{name}{IMAGE_SUFFIX}", image.astype(np.float32),
                             VolumeHeader(spatial, image.shape[0], "f32", role="intensity"))
    lab_paths = write_volume(out_dir / f"{name}{LABEL_SUFFIX}", labels.astype(np.uint8),
                             VolumeHeader(spatial, 1, "u8", role="labels", classes=k))
    return [*img_paths, *lab_paths]


def load_dataset(data_dir, k: Optional[int] = None) -> list[Sample]:
    """Pairs ``<name>_image.vol`` with ``<name>_labels.vol`` in ``data_dir``."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise CLIError(f"data directory {data_dir} does not exist")
    samples = []
    for header in sorted(data_dir.glob(f"*{IMAGE_SUFFIX}.volh")):
        name = header.name[: -len(f"{IMAGE_SUFFIX}.volh")]
        image, _ = read_volume(data_dir / f"{name}{IMAGE_SUFFIX}")
        label_base = data_dir / f"{name}{LABEL_SUFFIX}"
        if not label_base.with_suffix(".volh").exists():
            raise CLIError(f"{name}: no label volume next to the image")
        labels, lab_header = read_volume(label_base)
        if k is not None and lab_header.classes is not None and lab_header.classes != k:
            raise CLIError(f"{name}: labels declare {lab_header.classes} classes, the model has {k}")
        if k is not None and int(labels.max()) >= k:
            raise CLIError(f"{name}: label value {int(labels.max())} is out of range for {k} classes")
        if labels.shape[1:] != image.shape[1:]:
            raise CLIError(f"{name}: image and labels differ in shape")
        samples.append(Sample(image.astype(np.float32), labels, name))
    if not samples:
        raise CLIError(f"no *{IMAGE_SUFFIX}.vol volumes found in {data_dir}")
    return samples


def write_rows_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(row[c])) if isinstance(row[c], (float, np.floating)) else row[c]
                             for c in columns])
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise CLIError(f"cannot read checkpoint {path}: {exc}") from exc


# --- commands ---------------------------------------------------------------

def cmd_phantom(args, manifest: RunManifest) -> int:
    values = parse_kv_file(args.spec) if args.spec else {}
    for key in ("shape", "k", "regime"):
        if getattr(args, key) is not None:
            values[key] = str(getattr(args, key)) if key != "shape" else ",".join(map(str, args.shape))
    spec = phantom_spec_from(values)
    out = Path(args.out_dir)
    children = np.random.SeedSequence(args.seed).spawn(args.count)
    for i, child in enumerate(children):
        image, labels = generate_phantom(spec, int(child.generate_state(1)[0]))
        for p in save_sample(out, f"{args.prefix}{i:03d}", image, labels, spec.k):
            manifest.add_output(p)
    manifest.data["config"]["phantom_spec"] = asdict(spec)
    print(f"wrote {args.count} phantoms ({spec.regime}, shape {spec.shape}, k={spec.k}) to {out}")
    return 0


def _fusion_from(args) -> FusionConfig:
    return FusionConfig(n_iter_test=args.n_iter_test, n_iter_train=(args.n_iter_min, args.n_iter_max),
                        schedule=args.schedule)


def _train_config_from(args) -> TrainConfig:
    aug = AugmentationParams.identity(args.seed) if args.no_augment else AugmentationParams(seed=args.seed)
    return TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed, augmentation=aug)


def cmd_train(args, manifest: RunManifest) -> int:
    train_set = load_dataset(args.data_dir, args.k)
    val_set = load_dataset(args.val_dir, args.k) if args.val_dir else []
    in_channels = train_set[0].image.shape[0]
    model = build_model(j=args.j, k=args.k, seed=args.seed, use_mrf=not args.no_mrf, in_channels=in_channels,
                        fusion=_fusion_from(args))
    counts = model.param_count()
    print(f"UNet parameters: {counts['unet']}; MRF parameters: {counts['mrf']}")
    if model.mrf is not None:
        print(f"MRF overhead ratio: {mrf_overhead_ratio(model.mrf, model.unet.config):.6g}")
    manifest.data["param_count"] = counts
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"

    def on_epoch(rows):
        write_metrics_csv(metrics_path, rows, args.k)

    result = train(model, train_set, val_set, _train_config_from(args), on_epoch=on_epoch)
    ckpt_path = result.best.save(out / "checkpoint.mrfu")
    last_path = Checkpoint.from_model(result.model, epoch=args.epochs, seed=args.seed).save(out / "last.mrfu")
    for p in (metrics_path, ckpt_path, last_path):
        manifest.add_output(p)
    print(f"best checkpoint (epoch {result.best.state['epoch']}, val loss {result.best.state['best_val_loss']}) "
          f"-> {ckpt_path}")
    return 0


EVAL_FIXED = ["sample"]


def _eval_columns(k: int) -> list[str]:
    return EVAL_FIXED + [f"dice_{c}" for c in range(k)] + ["mean_dice"]


def cmd_eval(args, manifest: RunManifest) -> int:
    model = load_checkpoint(args.checkpoint).to_model()
    data = load_dataset(args.data_dir, model.k)
    rows = evaluate(model, data, n_iter=args.n_iter)
    path = write_rows_csv(args.out_csv, rows, _eval_columns(model.k))
    manifest.add_output(path)
    print(f"mean Dice over {len(rows)} samples: {np.mean([r['mean_dice'] for r in rows]):.4f} -> {path}")
    return 0


def _split_dirs(specs: Sequence[str]) -> dict[str, Path]:
    out = {}
    for spec in specs:
        name, _, path = spec.rpartition("=")
        path = Path(path)
        out[name or path.name] = path
    return out


def cmd_convergence(args, manifest: RunManifest) -> int:
    model = load_checkpoint(args.checkpoint).to_model()
    splits = {name: load_dataset(path, model.k) for name, path in _split_dirs(args.data_dir).items()}
    rows = convergence_study(model, splits, args.max_iter)
    columns = ["split", "n_iter"] + [f"dice_{c}" for c in range(model.k)] + ["mean_dice"]
    path = write_rows_csv(args.out_csv, rows, columns)
    manifest.add_output(path)
    for split in splits:
        dice = {r["n_iter"]: r["mean_dice"] for r in rows if r["split"] == split}
        ref = dice.get(min(10, args.max_iter))
        print(f"{split}: Dice(n=0) {dice[0]:.4f}, Dice(n={min(10, args.max_iter)}) {ref:.4f}, "
              f"max {max(dice.values()):.4f}")
    return 0


def cmd_capacity(args, manifest: RunManifest) -> int:
    spec = PhantomSpec(shape=args.shape, k=args.k)
    cfg = _train_config_from(args)
    fusion = _fusion_from(args)
    if args.data_dirs:
        dirs = _split_dirs(args.data_dirs.split(","))
        missing = {"train", "val", "test_in", "test_out"} - set(dirs)
        if missing:
            raise CLIError(f"--data-dirs needs train, val, test_in and test_out; missing {sorted(missing)}")
        fixed = {name: load_dataset(path, args.k) for name, path in dirs.items()}
        splits_for = lambda seed: fixed  # noqa: E731
    else:
        splits_for = lambda seed: regime_splits(spec, args.n_train, args.n_val, args.n_test, seed)  # noqa: E731
    rows = []
    for j in args.j_list:
        for seed in args.seeds:
            rows.extend(capacity_study([j], [seed], spec, cfg, fusion=fusion, splits=splits_for(seed)))
            write_rows_csv(args.out_csv, rows, CAPACITY_COLUMNS)
    path = write_rows_csv(args.out_csv, rows, CAPACITY_COLUMNS)
    manifest.add_output(path)
    for j in args.j_list:
        for model in ("unet", "mrf_unet"):
            out = [r["dice_out"] for r in rows if r["j"] == j and r["model"] == model]
            print(f"j={j} {model}: mean OOD Dice {np.mean(out):.4f} over {len(out)} seeds")
    return 0


def cmd_oracle_check(args, manifest: RunManifest) -> int:
    try:
        rows = oracle_check(args.grid, args.k, args.trials, args.seed)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    print(f"{'check':<18}{'max_deviation':>16}{'tolerance':>12}{'violations':>12}  result")
    for r in rows:
        print(f"{r['check']:<18}{r['max_deviation']:>16.3e}{r['tolerance']:>12.0e}{r['violations']:>12}  "
              f"{'pass' if r['passed'] else 'FAIL'}")
    manifest.data["checks"] = rows
    return 0 if all(r["passed"] for r in rows) else 1


def cmd_show_mrf(args, manifest: RunManifest) -> int:
    model = load_checkpoint(args.checkpoint).to_model()
    if model.mrf is None:
        print("checkpoint has no MRF (plain softmax head)")
    elif isinstance(model.mrf, MRFKernel):
        print(format_kernel(model.mrf))
    else:
        print(format_mrf_net(model.mrf))
    return 0


# --- parser -----------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=4, help="number of classes")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true", help="train without random augmentation")
    p.add_argument("--schedule", choices=("parallel", "checkerboard"), default="parallel")
    p.add_argument("--n-iter-test", type=int, default=10)
    p.add_argument("--n-iter-min", type=int, default=5)
    p.add_argument("--n-iter-max", type=int, default=15)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrfuse", description="UNet + MRF mean-field fusion for 3D segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic labelled volumes")
    p.add_argument("--spec", help="key=value file of phantom settings")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--shape", type=parse_shape)
    p.add_argument("--k", type=int)
    p.add_argument("--regime", choices=("in_dist", "out_dist"))
    p.add_argument("--prefix", default="case")
    p.set_defaults(func=cmd_phantom, manifest_dir="out_dir")

    p = sub.add_parser("train", help="train an MRF-UNet (or the plain UNet with --no-mrf)")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--val-dir")
    p.add_argument("--j", type=int, default=1, help="filter exponent: first level has 2**j filters")
    p.add_argument("--no-mrf", action="store_true", help="plain softmax head (baseline UNet)")
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train, manifest_dir="out")

    p = sub.add_parser("eval", help="per-sample Dice of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--n-iter", type=int, help="mean-field sweeps (default: the checkpoint's test setting)")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_eval, manifest_dir="out_csv")

    p = sub.add_parser("convergence", help="Dice as a function of the number of sweeps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True, action="append", help="[split=]directory; repeatable")
    p.add_argument("--max-iter", type=int, default=20)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_convergence, manifest_dir="out_csv")

    p = sub.add_parser("capacity", help="paired UNet vs MRF-UNet runs over filter counts and seeds")
    p.add_argument("--data-dirs", help="train=DIR,val=DIR,test_in=DIR,test_out=DIR (default: generated phantoms)")
    p.add_argument("--j-list", type=parse_int_list, default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--seeds", type=parse_int_list, default=[0, 1, 2])
    p.add_argument("--shape", type=parse_shape, default=(16, 16, 16))
    p.add_argument("--n-train", type=int, default=6)
    p.add_argument("--n-val", type=int, default=2)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--out-csv", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_capacity, manifest_dir="out_csv")

    p = sub.add_parser("oracle-check", help="mean-field invariants against exact enumeration")
    p.add_argument("--grid", type=parse_grid, default=(2, 2, 1))
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="where to write the run manifest (default: none)")
    p.set_defaults(func=cmd_oracle_check, manifest_dir=None)

    p = sub.add_parser("show-mrf", help="print the learned MRF of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_show_mrf, manifest_dir=None)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", help="key=value file of flag values (flags on the command line win)")
    return parser


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv`` with values from ``--config`` installed as defaults first."""
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    path = _config_path(argv)
    if command is None or path is None:
        return parser.parse_args(argv)
    sub = choices[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in parse_kv_file(path).items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise CLIError(f"config key {key!r} is not a flag of '{command}'")
        if action.nargs == 0:
            if raw.lower() not in _BOOL:
                raise CLIError(f"config key {key!r} expects true/false, got {raw!r}")
            defaults[key] = _BOOL[raw.lower()]
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [v.strip() for v in raw.split(";") if v.strip()]
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CLIError(f"config key {key!r}: {exc}") from exc
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


def _manifest_path(args) -> Optional[Path]:
    if args.command == "oracle-check":
        return Path(args.manifest) if args.manifest else None
    if args.manifest_dir is None:
        return None
    target = Path(getattr(args, args.manifest_dir))
    if args.manifest_dir.startswith("out_csv"):
        return target.with_name(target.stem + ".manifest.json")
    return target / "manifest.json"


def _inputs(args) -> list[Path]:
    paths = []
    for key in ("spec", "config", "data_dir", "val_dir", "checkpoint"):
        value = getattr(args, key, None)
        for v in value if isinstance(value, list) else [value]:
            if v:
                paths.append(Path(v.rpartition("=")[2] if key == "data_dir" else v))
    if getattr(args, "data_dirs", None):
        paths.extend(Path(s.rpartition("=")[2]) for s in args.data_dirs.split(","))
    return [p for p in paths if p.exists()]


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = {k: v for k, v in vars(args).items() if k not in ("func", "manifest_dir")}
    manifest = None
    try:
        path = _manifest_path(args)
        manifest = RunManifest(path, argv, config, getattr(args, "seed", None), _inputs(args)) if path else None
        holder = manifest or _NullManifest(config)
        code = args.func(args, holder)
    except (CLIError, VolumeFormatError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if manifest is not None:
            manifest.finalize("failed", error=str(exc))
        return 2
    if manifest is not None:
        manifest.finalize("ok" if code == 0 else "failed", exit_code=code)
    return code


class _NullManifest:
    """Stand-in when a command runs without a manifest file."""

    def __init__(self, config):
        self.data = {"config": config}

    def add_output(self, path) -> None:
        pass


if __name__ == "__main__":
    sys.exit(main())
