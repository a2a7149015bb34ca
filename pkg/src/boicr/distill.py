"""Distillation head supervision: the mean of all refinement agents' tables."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .refine import AgentScores, SupervisionTarget, agent_loss, build_supervision


def average_agent_scores(agent_tables: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of K equally shaped (C+1) x |R| tables."""
    if len(agent_tables) == 0:
        raise ValueError("need at least one agent table to average")
    shape = np.shape(agent_tables[0])
    for k, t in enumerate(agent_tables):
        if np.shape(t) != shape:
            raise ValueError(f"agent table {k} has shape {np.shape(t)}, expected {shape}")
    return np.mean(np.stack(agent_tables), axis=0)


def distillation_supervision(
    x_D: np.ndarray,
    proposals: np.ndarray,
    image_labels: np.ndarray,
    lam: float,
    lam_ign: float,
    ignore_enabled: bool = True,
) -> SupervisionTarget:
    return build_supervision(x_D, proposals, image_labels, lam, lam_ign, ignore_enabled)


def distillation_loss(distill_scores: AgentScores | np.ndarray, sup: SupervisionTarget) -> float:
    return agent_loss(distill_scores, sup)
