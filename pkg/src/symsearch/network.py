"""Symbolic networks: feed-forward nets whose units are algebraic operators.

A network is described by an :class:`Architecture` (operator list per layer).
Each hidden layer applies an affine map and then its operator units: a layer
with ``u`` unary and ``v`` binary units consumes an ``m = u + 2v`` dimensional
intermediate vector and emits ``n = u + v`` outputs (unary units take the
first ``u`` components, binary units the remaining components in consecutive
pairs). A final affine read-out with no operator units produces the scalar
prediction.

Training is two-stage full-batch gradient descent on an autodiff tape: stage
one minimizes plain MSE, stage two adds the smoothed square-root-magnitude
penalty to drive weights toward zero, after which :func:`prune` zeroes
everything below threshold and :func:`extract` turns the surviving wiring
into an expression tree.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import expressions as ex
from .autodiff import Tape, guarded_div, guarded_eval
from .seeding import rng_for

__all__ = [
    "UNARY_OPERATORS",
    "BINARY_OPERATORS",
    "DEFAULT_OPERATOR_LIBRARY",
    "Architecture",
    "SymbolicNetwork",
    "TrainConfig",
    "TrainResult",
    "layer_dims",
    "split_operators",
    "instantiate",
    "forward",
    "train",
    "prune",
    "extract",
    "adaptive_clip_threshold",
    "network_to_json",
    "network_from_json",
]

UNARY_OPERATORS = ("id", "sin", "cos", "tan", "exp", "log", "cosh", "square")
BINARY_OPERATORS = ("add", "sub", "mul", "div")

# Sampling library: the ten standard operators plus the identity unit.
# Division is available but off by default (guarded denominator when used).
DEFAULT_OPERATOR_LIBRARY = (
    "add", "sub", "mul", "sin", "cos", "tan", "exp", "log", "cosh", "square", "id",
)

MAX_LAYERS = 5
MAX_UNITS_PER_LAYER = 6


def split_operators(ops) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Partition a layer's operator list into (unary, binary), order kept."""
    unary = tuple(op for op in ops if op in UNARY_OPERATORS)
    binary = tuple(op for op in ops if op in BINARY_OPERATORS)
    return unary, binary


def layer_dims(ops) -> tuple[int, int]:
    """(m, n) for one layer: m = u + 2v affine outputs, n = u + v unit outputs."""
    unary, binary = split_operators(ops)
    u, v = len(unary), len(binary)
    return u + 2 * v, u + v


@dataclass(frozen=True)
class Architecture:
    """Sampled network description: one operator tuple per hidden layer."""

    layers: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not 1 <= len(self.layers) <= MAX_LAYERS:
            raise ValueError(f"layer count must be in 1..{MAX_LAYERS}, got {len(self.layers)}")
        for ops in self.layers:
            if not 1 <= len(ops) <= MAX_UNITS_PER_LAYER:
                raise ValueError(f"units per layer must be in 1..{MAX_UNITS_PER_LAYER}, got {len(ops)}")
            for op in ops:
                if op not in UNARY_OPERATORS and op not in BINARY_OPERATORS:
                    raise ValueError(f"unknown operator {op!r}")

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def describe(self) -> str:
        return "; ".join(",".join(ops) for ops in self.layers)


@dataclass
class SymbolicNetwork:
    """Weights for one architecture. ``weights[-1]`` is the (1, n) read-out."""

    architecture: Architecture
    input_dim: int
    weights: list[np.ndarray]
    biases: Optional[list[np.ndarray]] = None

    @property
    def add_bias(self) -> bool:
        return self.biases is not None

    def parameter_groups(self):
        """Per-layer parameter lists [(W, b?), ...] including the read-out."""
        if self.biases is None:
            return [(w,) for w in self.weights]
        return [(w, b) for w, b in zip(self.weights, self.biases)]

    def zero_weight_fraction(self) -> float:
        total = sum(w.size for group in self.parameter_groups() for w in group)
        zeros = sum(int(np.sum(w == 0.0)) for group in self.parameter_groups() for w in group)
        return zeros / total


def instantiate(arch: Architecture, input_dim: int, seed: int, add_bias: bool = False) -> SymbolicNetwork:
    """Create a network with Glorot-normal weights, deterministic in ``seed``."""
    if input_dim < 1:
        raise ValueError(f"input_dim must be >= 1, got {input_dim}")
    rng = rng_for(seed, "init")
    weights, biases = [], []
    prev = input_dim
    for ops in arch.layers:
        m, n = layer_dims(ops)
        weights.append(rng.normal(0.0, np.sqrt(2.0 / (prev + m)), size=(m, prev)))
        biases.append(np.zeros(m))
        prev = n
    weights.append(rng.normal(0.0, np.sqrt(2.0 / (prev + 1)), size=(1, prev)))
    biases.append(np.zeros(1))
    return SymbolicNetwork(arch, input_dim, weights, biases if add_bias else None)


def _apply_units(z: np.ndarray, unary, binary, guarded: bool) -> np.ndarray:
    u = len(unary)
    out = np.empty((z.shape[0], u + len(binary)))
    for i, op in enumerate(unary):
        out[:, i] = guarded_eval(op, z[:, i]) if guarded else ex._PLAIN_UNARY[op](z[:, i])
    for j, op in enumerate(binary):
        left, right = z[:, u + 2 * j], z[:, u + 2 * j + 1]
        if op == "add":
            out[:, u + j] = left + right
        elif op == "sub":
            out[:, u + j] = left - right
        elif op == "mul":
            out[:, u + j] = left * right
        else:
            out[:, u + j] = guarded_div(left, right) if guarded else left / right
    return out


def forward(net: SymbolicNetwork, X: np.ndarray, guarded: bool = True) -> np.ndarray:
    """Run the network on rows of X; returns the (n,) prediction vector."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ValueError(f"expected X of shape (n, {net.input_dim}), got {np.shape(X)}")
    h = X
    with np.errstate(all="ignore"):
        for idx, ops in enumerate(net.architecture.layers):
            z = h @ net.weights[idx].T
            if net.biases is not None:
                z = z + net.biases[idx]
            unary, binary = split_operators(ops)
            h = _apply_units(z, unary, binary, guarded)
        out = h @ net.weights[-1].T
        if net.biases is not None:
            out = out + net.biases[-1]
    return out[:, 0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Hyperparameters for two-stage network training."""

    learning_rate: float = 0.1
    reg_weight: float = 0.005
    n1: int = 10000
    n2: int = 10000
    adaptive_clip: bool = True
    clip_factor: float = 0.1
    clip_window: int = 50
    prune_threshold: float = 0.01
    smooth_a: float = 0.05
    add_bias: bool = False


@dataclass
class TrainResult:
    network: SymbolicNetwork
    losses_stage1: list[float] = field(default_factory=list)
    losses_stage2: list[float] = field(default_factory=list)
    failed: bool = False


def adaptive_clip_threshold(norm_window, clip_factor: float, capacity: int) -> float:
    """Clipping threshold from a window of recent total gradient norms.

    The average always divides by the window *capacity*, so a part-filled
    queue yields a smaller (more conservative) threshold.
    """
    return clip_factor * float(np.sum(norm_window)) / capacity


def _build_training_graph(tape: Tape, net: SymbolicNetwork, X, y, cfg: TrainConfig):
    x_leaf = tape.leaf(X)
    y_leaf = tape.leaf(np.asarray(y, dtype=float))
    w_leaves = [tape.leaf(w.copy()) for w in net.weights]
    b_leaves = [tape.leaf(b.copy()) for b in net.biases] if net.biases is not None else None

    h = x_leaf
    for idx, ops in enumerate(net.architecture.layers):
        b = b_leaves[idx] if b_leaves is not None else None
        z = tape.affine(h, w_leaves[idx], b)
        h = tape.apply("sym_layer", z, attr=split_operators(ops))
    readout = tape.affine(h, w_leaves[-1], b_leaves[-1] if b_leaves is not None else None)
    pred = tape.apply("squeeze", readout)
    mse = tape.apply("mse", pred, y_leaf)

    param_leaves = list(w_leaves) + (list(b_leaves) if b_leaves is not None else [])
    reg = tape.apply("l05sum", param_leaves[0], attr=cfg.smooth_a)
    for leaf in param_leaves[1:]:
        reg = reg + tape.apply("l05sum", leaf, attr=cfg.smooth_a)
    total = mse + cfg.reg_weight * reg
    return mse, total, w_leaves, b_leaves


def train(net: SymbolicNetwork, X, y, cfg: TrainConfig) -> TrainResult:
    """Two-stage full-batch gradient descent with adaptive gradient clipping.

    Stage one (``n1`` epochs) minimizes the MSE alone; stage two (``n2``
    epochs) adds ``reg_weight`` times the smoothed sparsity penalty. Every
    step clips the gradient to the moving-window threshold, then applies a
    plain descent update. A non-finite loss aborts and marks the result
    failed (downstream reward 0).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError(f"bad training data shapes X{np.shape(X)} y{np.shape(y)}")

    tape = Tape()
    mse, total, w_leaves, b_leaves = _build_training_graph(tape, net, X, y, cfg)
    param_leaves = list(w_leaves) + (list(b_leaves) if b_leaves is not None else [])
    n_layers = len(w_leaves)

    result = TrainResult(network=net)
    queue: deque = deque(maxlen=cfg.clip_window)
    lr = cfg.learning_rate
    values = tape.values

    with np.errstate(all="ignore"):
        for epoch in range(cfg.n1 + cfg.n2):
            stage2 = epoch >= cfg.n1
            root = total if stage2 else mse
            loss = values[root.index]
            (result.losses_stage2 if stage2 else result.losses_stage1).append(loss)
            if not np.isfinite(loss):
                result.failed = True
                break

            tape.backward(root)
            grads = [tape.grad(leaf) for leaf in param_leaves]
            total_norm = 0.0
            for group in groups:
                sq = 0.0
                for leaf in group:
                    g = tape.grad(leaf)
                    sq += float(np.sum(g * g))
                total_norm += np.sqrt(sq)
            if not np.isfinite(total_norm):
                result.failed = True
                break

            if cfg.adaptive_clip:
                queue.append(total_norm)
                gamma = adaptive_clip_threshold(queue, cfg.clip_factor, cfg.clip_window)
                if total_norm > gamma and total_norm > 0.0:
                    scale = gamma / total_norm
                    grads = [g * scale for g in grads]

            for leaf, g in zip(param_leaves, grads):
                values[leaf.index] -= lr * g
            tape.recompute()

    trained_w = [values[leaf.index].copy() for leaf in w_leaves]
    trained_b = [values[leaf.index].copy() for leaf in b_leaves] if b_leaves is not None else None
    if not result.failed and not all(np.all(np.isfinite(w)) for w in trained_w):
        result.failed = True
    result.network = SymbolicNetwork(net.architecture, net.input_dim, trained_w, trained_b)
    return result


def prune(net: SymbolicNetwork, threshold: float) -> SymbolicNetwork:
    """Zero every parameter with magnitude below ``threshold``. Idempotent."""
    if threshold < 0:
        raise ValueError("prune threshold must be >= 0")
    weights = [np.where(np.abs(w) < threshold, 0.0, w) for w in net.weights]
    biases = None
    if net.biases is not None:
        biases = [np.where(np.abs(b) < threshold, 0.0, b) for b in net.biases]
    return SymbolicNetwork(net.architecture, net.input_dim, weights, biases)


# ---------------------------------------------------------------------------
# Expression extraction (symbolic forward pass)
# ---------------------------------------------------------------------------

def _affine_expression(row: np.ndarray, inputs: list, bias: float) -> ex.Expression:
    terms = []
    for w, sub in zip(row, inputs):
        if w == 0.0:
            continue
        terms.append(sub if w == 1.0 else ex.Binary("mul", ex.Constant(float(w)), sub))
    if not terms:
        return ex.Constant(float(bias))
    acc = terms[0]
    for t in terms[1:]:
        acc = ex.Binary("add", acc, t)
    if bias != 0.0:
        acc = ex.Binary("add", acc, ex.Constant(float(bias)))
    return acc


def extract(net: SymbolicNetwork) -> ex.Expression:
    """Symbolic forward pass through a (pruned) network, then simplify.

    Zero-weight terms are dropped as the affine combinations are built, so a
    sparse network yields a compact tree whose guarded evaluation matches
    ``forward`` on the same inputs.
    """
    inputs: list[ex.Expression] = [ex.Variable(i) for i in range(net.input_dim)]
    for idx, ops in enumerate(net.architecture.layers):
        W = net.weights[idx]
        b = net.biases[idx] if net.biases is not None else np.zeros(W.shape[0])
        z = [_affine_expression(W[k], inputs, float(b[k])) for k in range(W.shape[0])]
        unary, binary = split_operators(ops)
        u = len(unary)
        outputs = [ex.Unary(op, z[i]) if op != "id" else z[i] for i, op in enumerate(unary)]
        for j, op in enumerate(binary):
            outputs.append(ex.Binary(op, z[u + 2 * j], z[u + 2 * j + 1]))
        inputs = outputs
    W = net.weights[-1]
    b = net.biases[-1] if net.biases is not None else np.zeros(1)
    return ex.simplify(_affine_expression(W[0], inputs, float(b[0])))


# ---------------------------------------------------------------------------
# Serialization (debugging / reproducibility)
# ---------------------------------------------------------------------------

def network_to_json(net: SymbolicNetwork) -> dict:
    doc = {
        "architecture": [list(ops) for ops in net.architecture.layers],
        "input_dim": net.input_dim,
        "weights": [w.tolist() for w in net.weights],
    }
    if net.biases is not None:
        doc["biases"] = [b.tolist() for b in net.biases]
    return doc


def network_from_json(doc) -> SymbolicNetwork:
    if isinstance(doc, str):
        doc = json.loads(doc)
    arch = Architecture(tuple(tuple(ops) for ops in doc["architecture"]))
    weights = [np.asarray(w, dtype=float) for w in doc["weights"]]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]] if "biases" in doc else None
    return SymbolicNetwork(arch, int(doc["input_dim"]), weights, biases)
