"""Training loop, combined loss, checkpoints and inference."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .distill import average_agent_scores
from .geometry import Box, Detection, nms_arrays
from .midn import ImageSample, TrainingView
from .model import ForwardPass, Model
from .numcore import Node, Tape, grad_check, sgd_step
from .refine import SupervisionTarget, build_supervision
from .schedule import AggregationSchedule

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "boicr-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    num_classes: int
    num_agents: int = 3
    raw_dim: int = 32
    trunk_dim: int = 64
    total_steps: int = 2000
    batch_size: int = 2
    # (first step, lr) pairs; None -> 0.01, then 0.001 from 70% of the run
    lr_schedule: list[tuple[int, float]] | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_mode: str = "adaptive"
    fixed_lambda: float = 0.5
    l_b: float = 100.0
    lambda_max: float = 0.51
    lambda_floor: float = 0.0
    distillation: bool = True
    ignore: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.num_agents < 0 or self.batch_size < 1:
            raise ValueError("num_agents must be >= 0 and batch_size >= 1")
        if self.lr_schedule is None:
            drop = int(round(0.7 * self.total_steps))
            self.lr_schedule = [(0, 0.01)] + ([(drop, 0.001)] if drop > 0 else [])
        self.lr_schedule = [(int(s), float(lr)) for s, lr in self.lr_schedule]
        starts = [s for s, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"lr schedule must start at step 0 with strictly increasing steps: {self.lr_schedule}")

    def lr_at(self, step: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if step >= start:
                lr = value
        return lr

    def schedule(self) -> AggregationSchedule:
        return AggregationSchedule(
            total_steps=max(1, self.total_steps), l_b=self.l_b, lambda_max=self.lambda_max,
            mode=self.lambda_mode, fixed_lambda=self.fixed_lambda, floor=self.lambda_floor,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_schedule"] = [tuple(x) for x in d["lr_schedule"]]
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def build_model(self) -> Model:
        return Model(self.num_classes, self.num_agents, self.raw_dim, self.trunk_dim,
                     distill=self.distillation, seed=self.seed)


@dataclass
class LossBreakdown:
    total: Node
    nodes: dict[str, Node]
    terms: dict[str, float]
    supervision: dict[str, SupervisionTarget]
    tape: Tape


def mine_supervision(
    forward: ForwardPass, sample: TrainingView, lam: float, lam_ign: float, ignore_enabled: bool,
) -> dict[str, SupervisionTarget]:
    """Supervision for every agent (and the distillation head) from live scores."""
    sup = {}
    prev = forward.midn.x_R.value
    for k, node in enumerate(forward.agents):
        sup[f"agent{k + 1}"] = build_supervision(prev, sample.proposals, sample.labels, lam, lam_ign, ignore_enabled)
        prev = node.value
    if forward.distill is not None and forward.agents:
        x_D = average_agent_scores([n.value for n in forward.agents])
        sup["distill"] = build_supervision(x_D, sample.proposals, sample.labels, lam, lam_ign, ignore_enabled)
    return sup


def total_loss(
    sample: TrainingView | ImageSample,
    model: Model,
    lam: float,
    lam_ign: float,
    ignore_enabled: bool = True,
    supervision: dict[str, SupervisionTarget] | None = None,
) -> LossBreakdown:
    """Image loss: classification + every agent + distillation (when present).

    ``supervision`` freezes the mined targets; by default they are mined from
    the current forward pass. Either way they are constants for backward.
    """
    if isinstance(sample, ImageSample):
        sample = sample.training_view()
    tape = Tape()
    fwd = model.forward(tape, sample.features)
    if supervision is None:
        supervision = mine_supervision(fwd, sample, lam, lam_ign, ignore_enabled)
    nodes = {"L_class": tape.image_cross_entropy(fwd.midn.phi, sample.labels)}
    for k, node in enumerate(fwd.agents):
        sup = supervision[f"agent{k + 1}"]
        nodes[f"L_agent_{k + 1}"] = tape.weighted_nll(node, sup.labels, sup.weights)
    if fwd.distill is not None and fwd.agents:
        sup = supervision["distill"]
        nodes["L_distill"] = tape.weighted_nll(fwd.distill, sup.labels, sup.weights)
    total = tape.add(*nodes.values())
    terms = {name: float(n.value) for name, n in nodes.items()}
    terms["L_total"] = float(total.value)
    return LossBreakdown(total=total, nodes=nodes, terms=terms, supervision=supervision, tape=tape)


def total_loss_at_step(sample, model: Model, config: TrainConfig, step: int) -> LossBreakdown:
    sched = config.schedule()
    return total_loss(sample, model, sched.lambda_at(step), sched.lambda_ign_at(step), config.ignore)


def check_gradients(model: Model, sample, lam: float, lam_ign: float, ignore_enabled: bool = True,
                    epsilon: float = 1e-5) -> float:
    """Max relative error of the full-loss gradient against central differences.

    Supervision is mined once at the current parameters and held fixed.
    """
    params = model.parameters()
    for p in params:
        p.zero_grad()
    base = total_loss(sample, model, lam, lam_ign, ignore_enabled)
    base.tape.backward(base.total)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    frozen = base.supervision

    def loss_fn():
        return total_loss(sample, model, lam, lam_ign, ignore_enabled, supervision=frozen).terms["L_total"]

    return grad_check(loss_fn, params, epsilon, analytic=analytic)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    params: dict[str, np.ndarray]
    manifest: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    @classmethod
    def from_model(cls, model: Model, config: TrainConfig, step: int, manifest: dict | None = None) -> "Checkpoint":
        return cls(config=config, step=step, params=model.state(), manifest=dict(manifest or {}))

    def to_model(self) -> Model:
        model = self.config.build_model()
        model.load_state(self.params)
        return model

    def dumps(self) -> str:
        blocks = [{"name": n, "shape": list(v.shape), "data": v.reshape(-1).tolist()}
                  for n, v in self.params.items()]
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "config_fingerprint": self.fingerprint,
            "config": self.config.to_dict(),
            "manifest": self.manifest,
            "params": blocks,
        }
        return json.dumps(doc, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint {doc.get('format')!r} v{doc.get('version')}")
        config = TrainConfig.from_dict(doc["config"])
        if config.fingerprint() != doc["config_fingerprint"]:
            raise ValueError("checkpoint config fingerprint mismatch")
        params = {}
        for block in doc["params"]:
            data = np.array(block["data"], dtype=np.float64)
            params[block["name"]] = data.reshape(block["shape"])
        return cls(config=config, step=doc["step"], params=params, manifest=doc.get("manifest", {}))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.loads(Path(path).read_text())


# -- training ----------------------------------------------------------------


def log_columns(config: TrainConfig) -> list[str]:
    return (["step", "lambda", "lambda_ign", "lr", "L_class"]
            + [f"L_agent_{k + 1}" for k in range(config.num_agents)]
            + ["L_distill", "L_total"])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order: list[int] = []
    while True:
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = rng.permutation(n).tolist()
            batch.append(order.pop(0))
        yield batch


def train(dataset: Sequence[ImageSample], config: TrainConfig, model: Model | None = None):
    """Run ``config.total_steps`` SGD steps over shuffled mini-batches.

    Returns:
        ``(checkpoint, log_rows)``; one log row per step holding the thresholds,
        learning rate and batch-mean loss terms.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    views = [s.training_view() for s in dataset]
    for v in views:
        if not np.any(v.labels):
            raise ValueError(f"training image {v.image_id} has no positive label")
    if model is None:
        model = config.build_model()
    params = model.parameters()
    sched = config.schedule()
    batches = _batches(len(views), config.batch_size, np.random.default_rng([config.seed, 1]))
    columns = log_columns(config)
    rows = []
    for step in range(config.total_steps):
        lam, lam_ign = sched.lambda_at(step), sched.lambda_ign_at(step)
        lr = config.lr_at(step)
        batch = next(batches)
        sums = dict.fromkeys(columns[4:], 0.0)
        for i in batch:
            out = total_loss(views[i], model, lam, lam_ign, config.ignore)
            for name, value in out.terms.items():
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite {name} at step {step} (image {views[i].image_id})")
                sums[name] += value / len(batch)
            out.tape.backward(out.tape.scale(out.total, 1.0 / len(batch)))
        sgd_step(params, lr, config.momentum, config.weight_decay)
        rows.append({"step": step, "lambda": lam, "lambda_ign": lam_ign, "lr": lr, **sums})
    return Checkpoint.from_model(model, config, config.total_steps), rows


def format_log(rows: list[dict], config: TrainConfig) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    columns = log_columns(config)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row[c] if c == "step" else repr(float(row[c])) for c in columns])
    return buf.getvalue()


# -- inference -----------------------------------------------------------------


def head_tables(model: Model, features: np.ndarray, heads: str = "agents_plus_distill") -> list[np.ndarray]:
    """Score tables averaged at test time.

    ``agents_plus_distill`` uses the distillation head too when the model has one.
    """
    if heads not in ("agents_only", "agents_plus_distill"):
        raise ValueError(f"unknown head selection {heads!r}")
    tables = model.score_tables(features)
    chosen = [tables[f"agent{k + 1}"] for k in range(model.num_agents)]
    if heads == "agents_plus_distill" and "distill" in tables:
        chosen.append(tables["distill"])
    if not chosen:
        raise ValueError("model has no refinement heads to score with")
    return chosen


def detections_from_scores(proposals: np.ndarray, class_scores: np.ndarray, nms_threshold: float = 0.3) -> list[Detection]:
    """Per-class NMS over a C x |R| score table, sorted by descending score."""
    found = []
    for c in range(class_scores.shape[0]):
        keep = nms_arrays(proposals, class_scores[c], nms_threshold)
        for j in keep:
            found.append((-class_scores[c, j], c, int(j)))
    found.sort()
    return [Detection(Box(*proposals[j]), c + 1, float(-neg)) for neg, c, j in found]


def infer(sample: ImageSample | TrainingView, model: Model, heads: str = "agents_plus_distill",
          nms_threshold: float = 0.3) -> list[Detection]:
    tables = head_tables(model, sample.features, heads)
    mean = np.mean(np.stack(tables), axis=0)
    return detections_from_scores(sample.proposals, mean[:-1], nms_threshold)
