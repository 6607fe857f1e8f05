"""Command line entry points: ``synth``, ``train``, ``fuse`` and ``report``.

Run layout::

    OUT/<run-id>/manifest.json
    OUT/<run-id>/fold_<s>/<network>.predictions.csv
    OUT/<run-id>/fold_<s>/<network>.ckpt.npz
    OUT/<run-id>/fold_<s>/done.json
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataset_io import (
    DatasetError,
    SyntheticSpec,
    generate_synthetic,
    parse_class_mode,
    scan_dataset,
    split_loso,
)
from .metrics import aggregate_folds
from .models import NETWORK_NAMES, build_network, fuse_scores_average, fuse_scores_max, load_checkpoint, save_checkpoint
from .preprocess import DEFAULT_IMAGE_SIZE, DEFAULT_TIMESTEP
from .report import write_report
from .training import (
    FoldResult,
    clips_from_index,
    modalities_for,
    predict_scores,
    preset_plans,
    read_predictions,
    required_networks,
    run_fold,
    write_predictions,
)

log = logging.getLogger("gesturefusion")

FUSION_MODES = {"average": "sl_average", "max": "sl_max"}


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    dataset: str = ""
    class_mode: str = "c14"
    seed: int = 0
    scale: float = 1.0
    timestep: int = DEFAULT_TIMESTEP
    image_size: int = DEFAULT_IMAGE_SIZE
    networks: list[str] = field(default_factory=lambda: ["skeleton_lstm"])
    out: str = "runs"
    run_id: str = ""
    preset: str = "paper"
    plan_overrides: dict[str, dict[str, str]] = field(default_factory=dict)

    def validate(self) -> None:
        self.class_mode = parse_class_mode(self.class_mode)
        if not 0 < self.scale <= 1:
            raise CommandError(f"scale must be in (0, 1], got {self.scale}")
        if self.timestep < 1:
            raise CommandError(f"timestep must be >= 1, got {self.timestep}")
        if self.image_size < 8:
            raise CommandError(f"image size must be >= 8 to survive three 2x2 pools, got {self.image_size}")
        unknown = [n for n in self.networks if n not in NETWORK_NAMES]
        if unknown or not self.networks:
            raise CommandError(f"unknown networks {unknown}; choose from {', '.join(NETWORK_NAMES)}")
        if self.preset != "paper":
            raise CommandError(f"unknown preset {self.preset!r}")
        preset_plans(self.scale, self.timestep, self.plan_overrides)

    def snapshot(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("run_id")
        out.pop("out")
        return out

    def default_run_id(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True).encode()
        return "run-" + hashlib.sha256(blob).hexdigest()[:10]


CONFIG_KEYS = {"dataset": str, "class_mode": str, "seed": int, "scale": float, "timestep": int,
               "image_size": int, "networks": str, "out": str, "run_id": str, "preset": str}


def read_config(path) -> dict:
    """Read ``[experiment]`` keys and ``[plans]`` ``network.key = value`` overrides."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise CommandError(f"cannot read config file {path}")
    values: dict = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in CONFIG_KEYS:
                raise CommandError(f"{path}: unknown key {key!r} in [experiment]")
            values[key] = CONFIG_KEYS[key](raw)
    if parser.has_section("plans"):
        values["plan_overrides"] = _parse_overrides(f"{k}={v}" for k, v in parser.items("plans"))
    return values


def _parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        key, sep, value = item.partition("=")
        network, dot, field_name = key.strip().partition(".")
        if not sep or not dot:
            raise CommandError(f"plan override must look like network.key=value, got {item!r}")
        out.setdefault(network, {})[field_name] = value.strip()
    return out


def _split_networks(value) -> list[str]:
    if isinstance(value, str):
        value = [value]
    return [n.strip() for v in value for n in v.split(",") if n.strip()]


def build_config(args) -> ExperimentConfig:
    values = read_config(args.config) if args.config else {}
    for key in ("dataset", "class_mode", "seed", "scale", "timestep", "image_size", "out", "run_id", "preset"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.networks:
        values["networks"] = args.networks
    if "networks" in values:
        values["networks"] = _split_networks(values["networks"])
    overrides = values.pop("plan_overrides", {})
    for network, kv in _parse_overrides(args.set or []).items():
        overrides.setdefault(network, {}).update(kv)
    cfg = ExperimentConfig(**values, plan_overrides=overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- helpers


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_subjects=args.subjects,
        n_trials=args.trials,
        frame_len_range=(args.min_frames, args.max_frames),
        image_size=(args.height, args.width),
        seed=args.seed,
    )
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise CommandError(f"output path exists and is not a directory: {out}")
    staging = out.parent / f".{out.name}.partial"
    if staging.exists():
        shutil.rmtree(staging)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        generate_synthetic(spec, staging)
    except (OSError, DatasetError) as exc:
        raise CommandError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    n = len(scan_dataset(staging, "c28"))
    if out.exists() and any(out.iterdir()):
        same = tree_digest(out) == tree_digest(staging)
        shutil.rmtree(staging)
        if not same:
            raise CommandError(f"{out} already holds a different dataset; remove it first")
        print(f"{n} sequences; identical tree already present at {out} (generation is deterministic)")
        return 0
    if out.exists():
        out.rmdir()
    staging.rename(out)
    print(f"{n} sequences written to {out}")
    return 0


# ---------------------------------------------------------------- train


def _network_widths(spec) -> dict[str, int]:
    return {l.name: l.width for l in spec.layers if l.width}


def _fold_is_complete(fold_dir: Path, networks: list[str]) -> bool:
    done = fold_dir / "done.json"
    if not done.is_file():
        return False
    try:
        record = json.loads(done.read_text())
    except json.JSONDecodeError:
        return False
    if sorted(record.get("networks", [])) != sorted(networks):
        return False
    for name, digest in record.get("artifacts", {}).items():
        p = fold_dir / name
        if not p.is_file() or sha256_file(p) != digest:
            return False
    return True


def cmd_train(args) -> int:
    cfg = build_config(args)
    plans = preset_plans(cfg.scale, cfg.timestep, cfg.plan_overrides)
    trained = required_networks(cfg.networks, plans)
    n_classes = 14 if cfg.class_mode == "c14" else 28
    specs = {n: build_network(n, n_classes, cfg.timestep, cfg.scale, cfg.image_size) for n in trained}
    run_id = cfg.run_id or cfg.default_run_id()
    run_dir = Path(cfg.out) / run_id
    manifest = {
        "version": __version__,
        "run_id": run_id,
        "config": cfg.snapshot(),
        "plans": {n: plans[n].describe() for n in trained},
        "trained_networks": trained,
        "spec_fingerprints": {n: s.fingerprint() for n, s in specs.items()},
        "widths": {n: _network_widths(s) for n, s in specs.items()},
        "seeds": {"run": cfg.seed},
    }
    print(f"run {run_id}: networks {', '.join(trained)} (scale {cfg.scale}, timestep {cfg.timestep})")
    for n in trained:
        p = plans[n]
        print(f"  {n}: {p.epochs} epochs, batch {p.batch_size}, {json.dumps(p.optimizer.describe())}, init={p.init}")
    if args.dry_run:
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "manifest.json", manifest)
        print(f"plan written to {run_dir / 'manifest.json'}")
        return 0

    if not cfg.dataset:
        raise CommandError("--dataset is required")
    index = scan_dataset(cfg.dataset, cfg.class_mode)
    folds = split_loso(index)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = None
    artifacts = {}
    for fold in folds:
        fold_dir = run_dir / f"fold_{fold.test_subject}"
        if _fold_is_complete(fold_dir, trained):
            print(f"fold {fold.test_subject}: verified outputs present, skipping")
        else:
            if data is None:
                data = clips_from_index(index, cfg.timestep, cfg.image_size, modalities_for(trained))
            _seed_everything(cfg.seed)
            try:
                outputs = run_fold(data, fold, cfg.networks, plans, cfg.seed, cfg.scale, cfg.image_size)
            except Exception as exc:
                raise CommandError(f"fold {fold.test_subject} failed: {exc}") from exc
            fold_dir.mkdir(parents=True, exist_ok=True)
            record = {"fold": fold.test_subject, "networks": trained, "artifacts": {}, "train": {}}
            for name, out in outputs.items():
                pred = write_predictions(fold_dir / f"{name}.predictions.csv", out.result)
                ckpt = fold_dir / f"{name}.ckpt.npz"
                save_checkpoint(ckpt, out.spec, out.params,
                                {"epoch": out.log.epochs, "seed": cfg.seed, "fold": fold.test_subject,
                                 "plan": plans[name].describe()},
                                out.log.optimizer_state)
                for p in (pred, ckpt):
                    record["artifacts"][p.name] = sha256_file(p)
                record["train"][name] = {"losses": out.log.losses, "train_accuracy": out.log.train_accuracy,
                                         "test_accuracy": out.result.accuracy}
                print(f"fold {fold.test_subject}: {name} test accuracy {100 * out.result.accuracy:.2f}%")
            _write_json(fold_dir / "done.json", record)
        for name in trained:
            for p in (fold_dir / f"{name}.predictions.csv", fold_dir / f"{name}.ckpt.npz"):
                artifacts[str(p.relative_to(run_dir))] = sha256_file(p)
    manifest["folds"] = [f.test_subject for f in folds]
    manifest["artifacts"] = artifacts
    _write_json(run_dir / "manifest.json", manifest)
    print(f"run complete: {run_dir}")
    return 0


# ---------------------------------------------------------------- fuse


def fuse_results(a: FoldResult, b: FoldResult, mode: str) -> FoldResult:
    """Score-level fusion of two prediction sets over the same sequences."""
    if mode not in FUSION_MODES:
        raise CommandError(f"unknown fusion mode {mode!r}; expected average or max")
    if a.class_mode != b.class_mode:
        raise CommandError(f"class modes differ: {a.class_mode} vs {b.class_mode}")
    if a.fold != b.fold:
        raise CommandError(f"folds differ: {a.fold} vs {b.fold}")
    ids_a, ids_b = a.sequence_ids, b.sequence_ids
    for i in range(max(len(ids_a), len(ids_b))):
        x = ids_a[i] if i < len(ids_a) else "<missing>"
        y = ids_b[i] if i < len(ids_b) else "<missing>"
        if x != y:
            raise CommandError(f"sequence sets diverge at row {i + 1}: {x} vs {y}")
    if not np.array_equal(a.true, b.true):
        raise CommandError("inputs disagree on true labels")
    fuse = fuse_scores_average if mode == "average" else fuse_scores_max
    return FoldResult(FUSION_MODES[mode], a.fold, a.class_mode, list(a.sequence_ids), a.subjects.copy(),
                      a.true.copy(), fuse(a.scores, b.scores), f"{a.fingerprint}+{b.fingerprint}")


def _fuse_fl_checkpoints(args, run_dir: Path) -> int:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = manifest["config"]
    dataset = args.dataset or cfg["dataset"]
    index = scan_dataset(dataset, cfg["class_mode"])
    n_classes = 14 if cfg["class_mode"] == "c14" else 28
    spec = build_network("fl_concat", n_classes, cfg["timestep"], cfg["scale"], cfg["image_size"])
    count = 0
    for fold_dir in sorted(run_dir.glob("fold_*")):
        ckpt_path = fold_dir / "fl_concat.ckpt.npz"
        if not ckpt_path.is_file():
            continue
        subject = int(fold_dir.name.split("_")[1])
        ckpt = load_checkpoint(ckpt_path, spec)
        data = clips_from_index(index, cfg["timestep"], cfg["image_size"], ("depth", "skeleton"),
                                entries=index.for_subjects([subject]))
        result = FoldResult("fl_concat", subject, data.class_mode, list(data.sequence_ids), data.subjects,
                            data.labels, predict_scores(spec, ckpt.params, data), spec.fingerprint())
        write_predictions(fold_dir / "fl_concat.predictions.csv", result)
        count += 1
    if not count:
        raise CommandError(f"no fl_concat checkpoints under {run_dir}")
    print(f"evaluated fl_concat checkpoints for {count} folds")
    return 0


def cmd_fuse(args) -> int:
    if args.mode == "fl_concat":
        if not args.run:
            raise CommandError("fl_concat mode needs --run")
        return _fuse_fl_checkpoints(args, Path(args.run))
    if args.inputs:
        if len(args.inputs) != 2 or not args.output:
            raise CommandError("give exactly two prediction files and --output")
        fused = fuse_results(read_predictions(args.inputs[0]), read_predictions(args.inputs[1]), args.mode)
        write_predictions(args.output, fused)
        print(f"{FUSION_MODES[args.mode]}: {len(fused.sequence_ids)} sequences -> {args.output}")
        return 0
    if not args.run:
        raise CommandError("give --run or two prediction files")
    first, second = _split_networks(args.networks or "depth_cnn_lstm,skeleton_lstm")[:2]
    run_dir = Path(args.run)
    folds = sorted(run_dir.glob("fold_*"), key=lambda p: int(p.name.split("_")[1]))
    if not folds:
        raise CommandError(f"no fold directories in {run_dir}")
    for fold_dir in folds:
        a = read_predictions(fold_dir / f"{first}.predictions.csv")
        b = read_predictions(fold_dir / f"{second}.predictions.csv")
        write_predictions(fold_dir / f"{FUSION_MODES[args.mode]}.predictions.csv", fuse_results(a, b, args.mode))
    print(f"{FUSION_MODES[args.mode]} written for {len(folds)} folds of {run_dir}")
    return 0


# ---------------------------------------------------------------- report


def collect_predictions(paths) -> dict[str, list[FoldResult]]:
    grouped: dict[str, list[FoldResult]] = {}
    for p in paths:
        r = read_predictions(p)
        grouped.setdefault(r.network, []).append(r)
    return grouped


def _run_prediction_files(run_dir: Path, networks=None) -> list[Path]:
    files = sorted(run_dir.glob("fold_*/*.predictions.csv"))
    if networks:
        files = [f for f in files if f.name.split(".")[0] in networks]
    return files


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.predictions or []]
    if args.run:
        paths += _run_prediction_files(Path(args.run), _split_networks(args.networks) if args.networks else None)
    if not paths:
        raise CommandError("no prediction files given")
    grouped = collect_predictions(paths)
    modes = {r.class_mode for rs in grouped.values() for r in rs}
    if len(modes) > 1:
        raise CommandError(f"prediction files mix class modes {sorted(modes)}")
    expected = sorted({r.fold for rs in grouped.values() for r in rs})
    reports = {name: aggregate_folds(rs, expected) for name, rs in grouped.items()}
    reference = None
    if args.reference14:
        ref = collect_predictions(_run_prediction_files(Path(args.reference14)))
        reference = {name: aggregate_folds(rs).accuracy for name, rs in ref.items()
                     if rs and rs[0].class_mode == "c14"}
    written = write_report(reports, args.out, reference, figures=not args.no_figures)
    print((Path(args.out) / "grain_table.txt").read_text(), end="")
    print((Path(args.out) / "summary.txt").read_text(), end="")
    print(f"{len(written)} report files written to {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gesturefusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset in the DHG-14/28 layout")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-frames", type=int, default=20)
    p.add_argument("--max-frames", type=int, default=48)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="leave-one-subject-out training and evaluation")
    p.add_argument("--config", help="key-value config file ([experiment] and [plans] sections)")
    p.add_argument("--dataset")
    p.add_argument("--class-mode", dest="class_mode", type=parse_class_mode)
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--timestep", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--preset", choices=["paper"])
    p.add_argument("--networks", action="append", help="comma-separated; repeatable")
    p.add_argument("--out")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--set", action="append", metavar="NETWORK.KEY=VALUE", help="override a plan value")
    p.add_argument("--dry-run", action="store_true", help="validate and write the plan manifest only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="score-level fusion of prediction files")
    p.add_argument("--mode", required=True, choices=["average", "max", "fl_concat"])
    p.add_argument("--run")
    p.add_argument("--networks", help="two networks to fuse within --run")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--output")
    p.add_argument("--dataset", help="dataset root for fl_concat re-evaluation")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("report", help="tables and confusion-matrix figures")
    p.add_argument("--run")
    p.add_argument("--networks")
    p.add_argument("--predictions", nargs="+")
    p.add_argument("--reference14", help="14-class run directory for the 14->28 drop decomposition")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
