"""Command-line entry point: ``boicr {gen-data,train,eval,ablate,schedule-dump}``.

Every command takes its randomness from explicit flags and writes a
``manifest.json`` next to its outputs. ``--out`` falls back to the
``BOICR_OUT_DIR`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .ablation import ARMS, format_table, run_arm, summarize
from .data import (DatasetFormatError, SceneSpec, dumps_dataset, dumps_detections, generate, load_dataset,
                   loads_detections, spec_dict)
from .metrics import evaluate
from .schedule import AggregationSchedule, dump_rows
from .trainer import Checkpoint, TrainConfig, TrainingError, format_log, infer, train

OUT_ENV = "BOICR_OUT_DIR"
log = logging.getLogger("boicr")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    dataset_fingerprint: str | None
    seed: int | None
    outputs: list[str] = field(default_factory=list)
    version: str = f"boicr-{__version__}"

    def dumps(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def fingerprint_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise UsageError(f"--out is required (or set {OUT_ENV})")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str, manifest: RunManifest) -> None:
    path.write_text(text)
    manifest.outputs.append(path.name)


def _finish(out: Path, manifest: RunManifest) -> None:
    (out / "manifest.json").write_text(manifest.dumps())


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")
    return value == "on"


def _lambda_mode(value: str) -> tuple[str, float]:
    if value == "adaptive":
        return "adaptive", 0.5
    if value.startswith("fixed:"):
        try:
            lam = float(value.split(":", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad fixed lambda in {value!r}") from None
        return "fixed", lam
    raise argparse.ArgumentTypeError(f"expected adaptive or fixed:<value>, got {value!r}")


def _lr_schedule(value: str) -> list[tuple[int, float]]:
    """``"0:0.01,1400:0.001"`` -> [(0, 0.01), (1400, 0.001)]."""
    try:
        pairs = [item.split(":") for item in value.split(",")]
        return [(int(s), float(lr)) for s, lr in pairs]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected step:lr[,step:lr...], got {value!r}") from None


def _dataset_dir_files(path: Path) -> tuple[Path, Path]:
    return path / "train.jsonl", path / "test.jsonl"


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    spec = SceneSpec(num_classes=args.classes, images_train=args.train, images_test=args.test,
                     part_signal_gain=args.gain, feature_noise_sigma=args.noise, rng_seed=args.seed)
    train_set, test_set = generate(spec)
    manifest = RunManifest("gen-data", spec_dict(spec), None, args.seed)
    train_path, test_path = _dataset_dir_files(out)
    _write(train_path, dumps_dataset(train_set, spec.num_classes, spec.feature_dim), manifest)
    _write(test_path, dumps_dataset(test_set, spec.num_classes, spec.feature_dim), manifest)
    _write(out / "scene.json", json.dumps(spec_dict(spec), sort_keys=True, indent=2) + "\n", manifest)
    manifest.dataset_fingerprint = fingerprint_file(train_path)
    _finish(out, manifest)
    print(f"wrote {len(train_set)} train / {len(test_set)} test images to {out}")
    return 0


def _train_config(args, num_classes: int, raw_dim: int) -> TrainConfig:
    mode, lam = args.lam
    return TrainConfig(num_classes=num_classes, num_agents=args.k, raw_dim=raw_dim, total_steps=args.steps,
                       lr_schedule=args.lr_schedule, lambda_mode=mode, fixed_lambda=lam, l_b=args.lb,
                       lambda_max=args.lambda_max, ignore=args.ignore, distillation=args.distill, seed=args.seed)


def cmd_train(args) -> int:
    out = _out_dir(args)
    samples, header = load_dataset(args.data)
    config = _train_config(args, header["num_classes"], header["feature_dim"])
    manifest = RunManifest("train", config.to_dict(), fingerprint_file(args.data), config.seed)
    ckpt, rows = train(samples, config)
    ckpt.manifest = {"manifest": "manifest.json", "dataset_fingerprint": manifest.dataset_fingerprint,
                     "version": manifest.version}
    _write(out / "loss_log.csv", format_log(rows, config), manifest)
    _write(out / "checkpoint.json", ckpt.dumps(), manifest)
    _finish(out, manifest)
    final = rows[-1]["L_total"] if rows else float("nan")
    print(f"trained {config.total_steps} steps; final batch loss {final:.4f}")
    if rows and not math.isfinite(final):
        return 1
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    samples, header = load_dataset(args.data)
    gt = {s.image_id: s.gt or [] for s in samples}
    if args.detections:
        dets = loads_detections(Path(args.detections).read_text())
        config = {"detections": fingerprint_file(args.detections)}
        seed = None
    else:
        if not args.checkpoint:
            raise UsageError("one of --checkpoint or --detections is required")
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        ckpt = Checkpoint.load(args.checkpoint)
        model = ckpt.to_model()
        dets = {s.image_id: infer(s, model, args.heads, args.nms) for s in samples}
        config = {"checkpoint": fingerprint_file(args.checkpoint), "heads": args.heads, "nms": args.nms}
        seed = ckpt.config.seed
    manifest = RunManifest("eval", config, fingerprint_file(args.data), seed)
    report = evaluate(dets, gt, header["num_classes"], use_11_point=not args.area_ap)
    _write(out / "detections.jsonl", dumps_detections((s.image_id, dets.get(s.image_id, [])) for s in samples), manifest)
    _write(out / "report.csv", report.to_csv(), manifest)
    _write(out / "report.txt", report.to_table(), manifest)
    _finish(out, manifest)
    print(report.to_table(), end="")
    values = list(report.ap.values()) + list(report.corloc.values())
    return 0 if all(math.isfinite(v) for v in values) else 1


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    if args.data:
        train_path, test_path = _dataset_dir_files(Path(args.data))
        train_set, header = load_dataset(train_path)
        test_set, _ = load_dataset(test_path)
        num_classes, raw_dim = header["num_classes"], header["feature_dim"]
        data_fp = fingerprint_file(train_path)
    else:
        spec = SceneSpec(rng_seed=args.data_seed)
        train_set, test_set = generate(spec)
        num_classes, raw_dim = spec.num_classes, spec.feature_dim
        data_fp = hashlib.sha256(dumps_dataset(train_set, num_classes, raw_dim).encode()).hexdigest()
    base = TrainConfig(num_classes=num_classes, raw_dim=raw_dim, total_steps=args.steps)
    arms = [a for a in ARMS if a.arm_id in args.arms]
    results = []
    for seed in range(args.seeds):
        for arm in arms:
            r = run_arm(arm, base, seed, train_set, test_set, args.heads, args.nms)
            log.info("%s seed %d: mAP %.4f CorLoc %.4f", arm.label, seed, r.test.mAP, r.test.corloc_mean)
            results.append(r)
    rows = summarize(results)
    manifest = RunManifest("ablate", {"base": base.to_dict(), "arms": [a.arm_id for a in arms],
                                      "seeds": args.seeds, "heads": args.heads, "nms": args.nms},
                           data_fp, None)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["id"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write(out / "ablation.csv", buf.getvalue(), manifest)
    runs = io.StringIO()
    w = csv.writer(runs, lineterminator="\n")
    w.writerow(["id", "seed", "mAP", "CorLoc", "CorLoc_train"])
    for r in results:
        w.writerow([r.arm.arm_id, r.seed, repr(r.test.mAP), repr(r.test.corloc_mean), repr(r.train_corloc)])
    _write(out / "ablation_runs.csv", runs.getvalue(), manifest)
    table = format_table(rows)
    _write(out / "ablation.txt", table, manifest)
    _finish(out, manifest)
    print(table, end="")
    finite = all(math.isfinite(r[k]) for r in rows for k in ("mAP", "CorLoc", "CorLoc_train"))
    return 0 if finite else 1


def cmd_schedule_dump(args) -> int:
    sched = AggregationSchedule(total_steps=args.steps, l_b=args.lb, lambda_max=args.lambda_max)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "lambda", "lambda_ign"])
    for s, lam, lam_ign in dump_rows(sched, args.every):
        writer.writerow([s, repr(lam), repr(lam_ign)])
    if args.out or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        manifest = RunManifest("schedule-dump", asdict(sched), None, None)
        _write(out / "schedule.csv", buf.getvalue(), manifest)
        _finish(out, manifest)
    else:
        sys.stdout.write(buf.getvalue())
    return 0


# -- parser ------------------------------------------------------------------------


def _arm_ids(value: str) -> list[int]:
    try:
        ids = [int(x) for x in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated arm ids, got {value!r}") from None
    known = {a.arm_id for a in ARMS}
    if not set(ids) <= known:
        raise argparse.ArgumentTypeError(f"unknown arm ids {sorted(set(ids) - known)}")
    return ids


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boicr", description="Weakly supervised detection with refinement agents.")
    parser.add_argument("--version", action="version", version=f"boicr {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_out(p):
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV})")
        return p

    p = with_out(sub.add_parser("gen-data", help="generate the synthetic benchmark"))
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--gain", type=float, default=SceneSpec.part_signal_gain, help="part signal gain")
    p.add_argument("--noise", type=float, default=SceneSpec.feature_noise_sigma, help="feature noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = with_out(sub.add_parser("train", help="train a model on a dataset file"))
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--k", type=int, default=3, help="number of refinement agents")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lambda", dest="lam", type=_lambda_mode, default=("adaptive", 0.5),
                   help="adaptive or fixed:<value>")
    p.add_argument("--ignore", type=_on_off, default=True, help="on|off")
    p.add_argument("--distill", type=_on_off, default=True, help="on|off")
    p.add_argument("--lb", type=float, default=100.0)
    p.add_argument("--lambda-max", type=float, default=0.51)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-schedule", type=_lr_schedule, default=None, help="step:lr pairs, e.g. 0:0.01,1400:0.001")
    p.set_defaults(func=cmd_train)

    p = with_out(sub.add_parser("eval", help="score a checkpoint (or a detections file) on a dataset"))
    p.add_argument("--data", required=True, help="evaluation dataset file")
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="evaluate these detections instead of running a model")
    p.add_argument("--heads", choices=("agents_only", "agents_plus_distill"), default="agents_plus_distill")
    p.add_argument("--nms", type=float, default=0.3)
    p.add_argument("--area-ap", action="store_true", help="all-point AP instead of 11-point")
    p.set_defaults(func=cmd_eval)

    p = with_out(sub.add_parser("ablate", help="run the five ablation arms"))
    p.add_argument("--data", help="directory holding train.jsonl and test.jsonl (default: generate)")
    p.add_argument("--data-seed", type=int, default=0, help="benchmark seed when --data is absent")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--arms", type=_arm_ids, default=[a.arm_id for a in ARMS])
    p.add_argument("--heads", choices=("agents_only", "agents_plus_distill"), default="agents_plus_distill")
    p.add_argument("--nms", type=float, default=0.3)
    p.set_defaults(func=cmd_ablate)

    p = with_out(sub.add_parser("schedule-dump", help="write (step, lambda, lambda_ign) as CSV"))
    p.add_argument("--steps", type=int, default=2000, help="total steps S")
    p.add_argument("--lb", type=float, default=100.0)
    p.add_argument("--lambda-max", type=float, default=0.51)
    p.add_argument("--every", type=int, default=1, help="row stride; the last step is always included")
    p.set_defaults(func=cmd_schedule_dump)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (TrainingError, DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"boicr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
