"""Dense kernels, a restricted reverse-mode tape, SGD and gradient checking.

Matrices are float64 numpy arrays. The tape only knows the handful of ops the
detector needs (affine, relu, the two softmaxes, elementwise product, sums and
the two loss forms); anything else is a programming error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12
IGNORE = -1


@dataclass(eq=False)
class ParamTensor:
    """A trainable matrix with its gradient and momentum buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    momentum_buffer: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


# -- plain kernels ---------------------------------------------------------


def _softmax(m: np.ndarray, axis: int) -> np.ndarray:
    z = m - m.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_over_classes(m: np.ndarray) -> np.ndarray:
    """Softmax down each column of a [classes, proposals] matrix."""
    return _softmax(np.asarray(m, dtype=np.float64), axis=0)


def softmax_over_proposals(m: np.ndarray) -> np.ndarray:
    """Softmax along each row of a [classes, proposals] matrix."""
    return _softmax(np.asarray(m, dtype=np.float64), axis=1)


def image_cross_entropy(phi: np.ndarray, labels: np.ndarray) -> float:
    """Multi-label binary cross entropy on image-level scores (clamped)."""
    p = np.clip(phi, LOG_EPS, 1.0 - LOG_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def weighted_nll(scores: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Per-proposal weighted log loss averaged over *all* proposals.

    Proposals labelled ``IGNORE`` add nothing to the sum but still count in the
    divisor.
    """
    n = scores.shape[1]
    keep = labels != IGNORE
    if not keep.any():
        return 0.0
    cols = np.nonzero(keep)[0]
    picked = np.maximum(scores[labels[keep], cols], LOG_EPS)
    return float(-np.sum(weights[keep] * np.log(picked)) / n)


# -- tape ------------------------------------------------------------------


class Node:
    __slots__ = ("value", "grad", "_backward", "param")

    def __init__(self, value, backward=None, param=None):
        self.value = value
        self.grad = None
        self._backward = backward
        self.param = param

    @property
    def shape(self):
        return np.shape(self.value)

    def _accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class Tape:
    """Records one forward pass and replays it backwards.

    Supervision targets passed to the loss ops are plain arrays, so nothing
    flows back through them.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._consumed = False

    def _push(self, value, backward=None, param=None) -> Node:
        node = Node(value, backward, param)
        self._nodes.append(node)
        return node

    def param(self, p: ParamTensor) -> Node:
        return self._push(p.value, param=p)

    def constant(self, value) -> Node:
        return self._push(np.asarray(value, dtype=np.float64))

    def linear(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """``x @ w + b`` for x [N, D_in], w [D_in, D_out], b [D_out] or None."""
        if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ValueError(f"linear: input shape {x.shape} incompatible with weights {w.shape}")
        if b is not None and b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} incompatible with weights {w.shape}")
        value = x.value @ w.value
        out = self._push(value if b is None else value + b.value)

        def backward():
            g = out.grad
            x._accumulate(g @ w.value.T)
            w._accumulate(x.value.T @ g)
            if b is not None:
                b._accumulate(g.sum(axis=0))

        out._backward = backward
        return out

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        out = self._push(np.maximum(x.value, 0.0))  # keeps NaN visible

        def backward():
            x._accumulate(out.grad * mask)

        out._backward = backward
        return out

    def transpose(self, x: Node) -> Node:
        out = self._push(x.value.T)

        def backward():
            x._accumulate(out.grad.T)

        out._backward = backward
        return out

    def _softmax(self, x: Node, axis: int) -> Node:
        y = _softmax(x.value, axis)
        out = self._push(y)

        def backward():
            g = out.grad
            x._accumulate(y * (g - np.sum(g * y, axis=axis, keepdims=True)))

        out._backward = backward
        return out

    def softmax_over_classes(self, x: Node) -> Node:
        return self._softmax(x, axis=0)

    def softmax_over_proposals(self, x: Node) -> Node:
        return self._softmax(x, axis=1)

    def hadamard(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ValueError(f"hadamard: shapes {a.shape} and {b.shape} differ")
        out = self._push(a.value * b.value)

        def backward():
            a._accumulate(out.grad * b.value)
            b._accumulate(out.grad * a.value)

        out._backward = backward
        return out

    def sum(self, x: Node, axis: int | None = None) -> Node:
        out = self._push(np.sum(x.value, axis=axis))

        def backward():
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            x._accumulate(np.broadcast_to(g, x.shape))

        out._backward = backward
        return out

    def scale(self, x: Node, k: float) -> Node:
        out = self._push(x.value * k)

        def backward():
            x._accumulate(out.grad * k)

        out._backward = backward
        return out

    def add(self, *xs: Node) -> Node:
        out = self._push(sum((x.value for x in xs[1:]), start=np.copy(xs[0].value)))

        def backward():
            for x in xs:
                x._accumulate(out.grad)

        out._backward = backward
        return out

    def image_cross_entropy(self, phi: Node, labels: np.ndarray) -> Node:
        y = np.asarray(labels, dtype=np.float64)
        out = self._push(np.float64(image_cross_entropy(phi.value, y)))

        def backward():
            p = phi.value
            inside = (p > LOG_EPS) & (p < 1.0 - LOG_EPS)
            pc = np.clip(p, LOG_EPS, 1.0 - LOG_EPS)
            phi._accumulate(out.grad * inside * (-y / pc + (1.0 - y) / (1.0 - pc)))

        out._backward = backward
        return out

    def weighted_nll(self, scores: Node, labels: np.ndarray, weights: np.ndarray) -> Node:
        labels = np.asarray(labels)
        weights = np.asarray(weights, dtype=np.float64)
        out = self._push(np.float64(weighted_nll(scores.value, labels, weights)))

        def backward():
            x = scores.value
            n = x.shape[1]
            g = np.zeros_like(x)
            cols = np.nonzero(labels != IGNORE)[0]
            rows = labels[cols]
            picked = x[rows, cols]
            live = picked > LOG_EPS
            g[rows[live], cols[live]] = -weights[cols[live]] / (n * picked[live])
            scores._accumulate(out.grad * g)

        out._backward = backward
        return out

    def backward(self, root: Node) -> None:
        """Back-propagate from scalar ``root`` into every recorded parameter."""
        if not self._nodes or root not in self._nodes:
            raise RuntimeError("backward called before a forward pass recorded this node")
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward")
        if np.ndim(root.value) != 0:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        root.grad = np.float64(1.0)
        for node in reversed(self._nodes):
            if node.grad is None:
                continue
            if node._backward is not None:
                node._backward()
            elif node.param is not None:
                node.param.grad += node.grad
        self._consumed = True


def linear_forward(tape: Tape, x: Node, weights: ParamTensor, bias: ParamTensor | None = None) -> Node:
    return tape.linear(x, tape.param(weights), None if bias is None else tape.param(bias))


def relu_forward(tape: Tape, x: Node) -> Node:
    return tape.relu(x)


def backward(tape: Tape, root: Node) -> None:
    tape.backward(root)


# -- optimisation ----------------------------------------------------------


def sgd_step(params: Iterable[ParamTensor], lr: float, momentum: float, weight_decay: float) -> None:
    """One SGD update with heavy-ball momentum and L2 weight decay.

    ``v <- momentum*v + grad + weight_decay*value``; ``value <- value - lr*v``.
    Gradients are zeroed afterwards.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        v = p.momentum_buffer
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.value
        p.value -= lr * v
        p.zero_grad()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(
    loss_fn: Callable[[], float],
    params: Sequence[ParamTensor],
    epsilon: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Args:
        loss_fn: evaluates the loss at the current parameter values. It must not
            touch the parameters' gradient buffers.
        params: parameters to perturb, one entry at a time.
        epsilon: central-difference step.
        analytic: gradients to check; defaults to each parameter's ``grad``.

    Returns:
        The largest relative error over every entry of every parameter.
    """
    if analytic is None:
        analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn()
            flat[i] = orig - epsilon
            down = loss_fn()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * epsilon)
        worst = max(worst, float(np.max(relative_error(a, numeric), initial=0.0)))
    return worst
