"""The five-arm ablation: fixed vs adaptive thresholds, ignore band, distillation, depth."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .metrics import EvalReport, evaluate
from .midn import ImageSample
from .trainer import TrainConfig, infer, train


@dataclass(frozen=True)
class Arm:
    arm_id: int
    num_agents: int
    lambda_mode: str
    ignore: bool
    distillation: bool

    @property
    def label(self) -> str:
        lam = "0.5" if self.lambda_mode == "fixed" else "adaptive"
        ign = "adaptive" if self.ignore else "0"
        return f"ID{self.arm_id} K={self.num_agents} lambda={lam} lambda_ign={ign} distill={'yes' if self.distillation else 'no'}"


ARMS = (
    Arm(1, 3, "fixed", False, False),
    Arm(2, 3, "adaptive", False, False),
    Arm(3, 3, "adaptive", True, False),
    Arm(4, 3, "adaptive", True, True),
    Arm(5, 4, "adaptive", True, False),
)


def arm_config(arm: Arm, base: TrainConfig, seed: int) -> TrainConfig:
    return replace(base, num_agents=arm.num_agents, lambda_mode=arm.lambda_mode, fixed_lambda=0.5,
                   ignore=arm.ignore, distillation=arm.distillation, seed=seed)


def detect_all(samples: Sequence[ImageSample], model, heads: str, nms_threshold: float):
    return {s.image_id: infer(s, model, heads, nms_threshold) for s in samples}


@dataclass
class ArmResult:
    arm: Arm
    seed: int
    test: EvalReport
    train_corloc: float


def run_arm(arm: Arm, base: TrainConfig, seed: int, train_set: Sequence[ImageSample],
            test_set: Sequence[ImageSample], heads: str = "agents_plus_distill",
            nms_threshold: float = 0.3) -> ArmResult:
    config = arm_config(arm, base, seed)
    ckpt, _ = train(train_set, config)
    model = ckpt.to_model()
    test_report = evaluate(detect_all(test_set, model, heads, nms_threshold),
                           {s.image_id: s.gt for s in test_set}, config.num_classes)
    train_report = evaluate(detect_all(train_set, model, heads, nms_threshold),
                            {s.image_id: s.gt for s in train_set}, config.num_classes)
    return ArmResult(arm, seed, test_report, train_report.corloc_mean)


def summarize(results: Sequence[ArmResult]) -> list[dict]:
    rows = []
    for arm in ARMS:
        mine = [r for r in results if r.arm == arm]
        if not mine:
            continue
        rows.append({
            "id": arm.arm_id,
            "K": arm.num_agents,
            "lambda": "0.5" if arm.lambda_mode == "fixed" else "adaptive",
            "lambda_ign": "adaptive" if arm.ignore else "0",
            "distillation": "Yes" if arm.distillation else "No",
            "seeds": len(mine),
            "mAP": float(np.median([r.test.mAP for r in mine])),
            "CorLoc": float(np.median([r.test.corloc_mean for r in mine])),
            "CorLoc_train": float(np.median([r.train_corloc for r in mine])),
        })
    return rows


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'ID':<3}| {'K':>2} {'lambda':>9} {'lambda_ign':>10} {'distill':>8} | {'mAP':>6} {'CorLoc':>7} {'CorLoc(tr)':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['id']:<3}| {r['K']:>2} {r['lambda']:>9} {r['lambda_ign']:>10} {r['distillation']:>8} | "
                     f"{100 * r['mAP']:6.2f} {100 * r['CorLoc']:7.2f} {100 * r['CorLoc_train']:10.2f}")
    return "\n".join(lines) + "\n"
