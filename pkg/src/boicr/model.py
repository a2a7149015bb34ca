"""Parameter container wiring the trunk, instance classifier and agent heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .midn import MidnOutput, MidnParams, TrunkParams, midn_forward, trunk_forward
from .numcore import Node, ParamTensor, Tape
from .refine import agent_forward

HEAD_STD = 0.01


@dataclass
class ForwardPass:
    midn: MidnOutput
    agents: list[Node]  # K tables, (C+1) x |R|
    distill: Node | None


class Model:
    """Trunk + two-stream classifier + K refinement heads (+ distillation head).

    Heads start from N(0, 0.01) weights and zero biases. The trunk stands in
    for pretrained layers, so it gets He-scaled weights instead.
    """

    def __init__(self, num_classes: int, num_agents: int = 3, raw_dim: int = 32, trunk_dim: int = 64,
                 distill: bool = True, seed: int = 0):
        if num_agents < 0:
            raise ValueError(f"num_agents must be >= 0, got {num_agents}")
        self.num_classes = num_classes
        self.num_agents = num_agents
        self.raw_dim = raw_dim
        self.trunk_dim = trunk_dim
        rng = np.random.default_rng(seed)

        def he(name, fan_in, fan_out):
            return ParamTensor(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))

        def head(name, fan_out):
            return (ParamTensor(f"{name}.w", rng.normal(0.0, HEAD_STD, size=(trunk_dim, fan_out))),
                    ParamTensor(f"{name}.b", np.zeros(fan_out)))

        self.trunk = TrunkParams(
            w1=he("trunk.fc1.w", raw_dim, trunk_dim), b1=ParamTensor("trunk.fc1.b", np.zeros(trunk_dim)),
            w2=he("trunk.fc2.w", trunk_dim, trunk_dim), b2=ParamTensor("trunk.fc2.b", np.zeros(trunk_dim)),
        )
        w_cls, b_cls = head("midn.cls", num_classes)
        w_det, _ = head("midn.det", num_classes)
        self.midn = MidnParams(w_cls, b_cls, w_det)
        self.agents = [head(f"agent{k + 1}", num_classes + 1) for k in range(num_agents)]
        self.distill = head("distill", num_classes + 1) if distill else None

    @property
    def has_distill(self) -> bool:
        return self.distill is not None

    def parameters(self) -> list[ParamTensor]:
        params = self.trunk.tensors() + self.midn.tensors()
        for w, b in self.agents:
            params += [w, b]
        if self.distill is not None:
            params += list(self.distill)
        return params

    def forward(self, tape: Tape, raw_features: np.ndarray) -> ForwardPass:
        feats = trunk_forward(tape, tape.constant(raw_features), self.trunk)
        midn = midn_forward(tape, feats, self.midn)
        agents = [agent_forward(tape, feats, w, b) for w, b in self.agents]
        distill = agent_forward(tape, feats, *self.distill) if self.distill is not None else None
        return ForwardPass(midn=midn, agents=agents, distill=distill)

    def score_tables(self, raw_features: np.ndarray) -> dict[str, np.ndarray]:
        """Forward-only scores: ``midn`` (C x |R|), ``agent1..K`` and ``distill``."""
        out = self.forward(Tape(), raw_features)
        tables = {"midn": out.midn.x_R.value}
        for k, node in enumerate(out.agents):
            tables[f"agent{k + 1}"] = node.value
        if out.distill is not None:
            tables["distill"] = out.distill.value
        return tables

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name!r}")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"{p.name}: stored shape {value.shape} != model shape {p.value.shape}")
            p.value[...] = value
