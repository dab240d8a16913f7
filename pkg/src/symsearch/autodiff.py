"""Reverse-mode automatic differentiation on an explicit tape.

A :class:`Tape` records primitive operations as they execute (a Wengert
list): each node stores its op name, parent indices, and forward value.
``backward`` from a scalar root fills one adjoint per node; leaf gradients
are then read off with :meth:`Tape.grad`. Because the node list is ordered,
a recorded graph can also be re-executed cheaply with new leaf values
(:meth:`Tape.recompute`), which is what the network training loop does
instead of re-recording the same static graph every epoch.

Unary operators come in "guarded" form: log, exp and tan (and the other
potentially exploding ops) are clamped so any finite input yields a finite
output. The guard constants live here so that network evaluation, expression
evaluation and training all share one set of semantics.

Tapes are single-threaded; independent tapes can be used from independent
threads or processes freely.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Value",
    "ShapeError",
    "guarded_eval",
    "guarded_grad",
    "UNARY_OPS",
    "LOG_FLOOR",
    "EXP_CAP",
    "TAN_CLAMP",
    "COSH_CAP",
    "SQUARE_CAP",
    "DIV_FLOOR",
]

# Guard constants. log/exp/tan values follow the numeric-safety scheme used
# during training; the remaining caps make every unary op total on finite
# inputs (cosh/sinh overflow past ~710, squares past ~1e154).
LOG_FLOOR = 1e-10
EXP_CAP = 20.0
TAN_CLAMP = 1e10
COSH_CAP = 20.0
SQUARE_CAP = 1e150
DIV_FLOOR = 1e-6


class ShapeError(ValueError):
    """Raised when an op is applied to operands of incompatible shape."""


# ---------------------------------------------------------------------------
# Guarded unary semantics (shared by tape, network forward, expression eval)
# ---------------------------------------------------------------------------

def guarded_eval(op: str, x):
    """Evaluate unary operator ``op`` with numeric guards.

    Total on finite inputs: log uses ``log(max(|x|, 1e-10))``, exp caps its
    argument at 20, tan is clamped to ±1e10, cosh/sinh clip their argument to
    ±20, square clips to ±1e150. sin/cos/id/abs/sqrt pass through.
    """
    if op == "sin":
        return np.sin(x)
    if op == "cos":
        return np.cos(x)
    if op == "tan":
        return np.clip(np.tan(x), -TAN_CLAMP, TAN_CLAMP)
    if op == "exp":
        return np.exp(np.minimum(x, EXP_CAP))
    if op == "log":
        return np.log(np.maximum(np.abs(x), LOG_FLOOR))
    if op == "cosh":
        return np.cosh(np.clip(x, -COSH_CAP, COSH_CAP))
    if op == "sinh":
        return np.sinh(np.clip(x, -COSH_CAP, COSH_CAP))
    if op == "square":
        return np.square(np.clip(x, -SQUARE_CAP, SQUARE_CAP))
    if op == "id":
        return np.asarray(x) if isinstance(x, np.ndarray) else x
    if op == "sqrt":
        return np.sqrt(x)
    if op == "abs":
        return np.abs(x)
    raise ValueError(f"unknown unary operator {op!r}")


def guarded_grad(op: str, x):
    """d/dx of :func:`guarded_eval`; zero on the clamped plateaus."""
    if op == "sin":
        return np.cos(x)
    if op == "cos":
        return -np.sin(x)
    if op == "tan":
        t = np.tan(x)
        return np.where(np.abs(t) <= TAN_CLAMP, 1.0 + t * t, 0.0)
    if op == "exp":
        return np.where(x <= EXP_CAP, np.exp(np.minimum(x, EXP_CAP)), 0.0)
    if op == "log":
        safe = np.where(np.abs(x) >= LOG_FLOOR, x, 1.0)
        return np.where(np.abs(x) >= LOG_FLOOR, 1.0 / safe, 0.0)
    if op == "cosh":
        return np.where(np.abs(x) <= COSH_CAP, np.sinh(np.clip(x, -COSH_CAP, COSH_CAP)), 0.0)
    if op == "sinh":
        return np.where(np.abs(x) <= COSH_CAP, np.cosh(np.clip(x, -COSH_CAP, COSH_CAP)), 0.0)
    if op == "square":
        return np.where(np.abs(x) <= SQUARE_CAP, 2.0 * x, 0.0)
    if op == "id":
        return np.ones_like(x) if isinstance(x, np.ndarray) else 1.0
    if op == "sqrt":
        return 0.5 / np.sqrt(x)
    if op == "abs":
        return np.sign(x)  # subgradient 0 at 0
    raise ValueError(f"unknown unary operator {op!r}")


UNARY_OPS = ("sin", "cos", "tan", "exp", "log", "cosh", "sinh", "square", "id", "sqrt", "abs")


def guarded_div(num, den):
    """num / den with the denominator pushed away from zero (±1e-6 floor)."""
    den = np.where(np.abs(den) < DIV_FLOOR, np.copysign(DIV_FLOOR, den), den)
    return num / den


def l05_star(w, a: float):
    """Smoothed square-root-magnitude penalty, elementwise.

    ``|w|^(1/2)`` for ``|w| >= a``; below the transition point the quartic
    smoothing ``(-w^4/(8a^3) + 3w^2/(4a) + 3a/8)^(1/2)`` removes the gradient
    singularity at 0. C1 at ``|w| = a`` and symmetric in ``w``.
    """
    if a <= 0:
        raise ValueError(f"transition point must be positive, got {a}")
    w = np.asarray(w, dtype=float)
    aw = np.abs(w)
    smooth = np.sqrt(-(w ** 4) / (8 * a ** 3) + 3 * w ** 2 / (4 * a) + 3 * a / 8)
    out = np.where(aw >= a, np.sqrt(aw), smooth)
    return float(out) if out.ndim == 0 else out


def l05_star_grad(w, a: float):
    """Elementwise derivative of :func:`l05_star`."""
    if a <= 0:
        raise ValueError(f"transition point must be positive, got {a}")
    w = np.asarray(w, dtype=float)
    aw = np.abs(w)
    outer = np.sign(w) * 0.5 / np.sqrt(np.maximum(aw, a))
    inner = -(w ** 4) / (8 * a ** 3) + 3 * w ** 2 / (4 * a) + 3 * a / 8
    dinner = -(w ** 3) / (2 * a ** 3) + 3 * w / (2 * a)
    smooth = dinner / (2 * np.sqrt(inner))
    out = np.where(aw >= a, outer, smooth)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Value:
    """Handle to one tape node. Supports +, -, * with Values and floats."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return np.shape(self.tape.values[self.index])

    def __add__(self, other):
        return self.tape.apply("add", self, self.tape.lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.apply("sub", self, self.tape.lift(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self.tape.lift(other), self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, self.tape.lift(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Value(#{self.index}, {self.value!r})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if np.shape(grad) == shape:
        return grad
    if shape == ():
        return float(np.sum(grad))
    g = np.asarray(grad)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# Forward rules: fn(values, parents, attr) -> value
def _fw_add(v, p, a):
    return v[p[0]] + v[p[1]]


def _fw_sub(v, p, a):
    return v[p[0]] - v[p[1]]


def _fw_mul(v, p, a):
    return v[p[0]] * v[p[1]]


def _fw_div(v, p, a):
    return v[p[0]] / v[p[1]]


def _fw_gdiv(v, p, a):
    return guarded_div(v[p[0]], v[p[1]])


def _fw_neg(v, p, a):
    return -v[p[0]]


def _fw_pow(v, p, a):
    return v[p[0]] ** a


def _fw_tanh(v, p, a):
    return np.tanh(v[p[0]])


def _fw_sigmoid(v, p, a):
    x = v[p[0]]
    out = np.empty_like(x, dtype=float) if isinstance(x, np.ndarray) else None
    if out is None:
        return 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1.0 + np.exp(x))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_sum(v, p, a):
    return float(np.sum(v[p[0]]))


def _fw_mean(v, p, a):
    return float(np.mean(v[p[0]]))


def _fw_mse(v, p, a):
    d = v[p[0]] - v[p[1]]
    return float(np.mean(d * d))


def _fw_linear(v, p, a):
    return v[p[0]] @ v[p[1]].T


def _fw_affine(v, p, a):
    return v[p[0]] @ v[p[1]].T + v[p[2]]


def _fw_matvec(v, p, a):
    return v[p[0]] @ v[p[1]]


def _fw_squeeze(v, p, a):
    return v[p[0]][:, 0]


def _fw_pad(v, p, a):
    x = v[p[0]]
    out = np.zeros(a, dtype=float)
    out[: x.shape[0]] = x
    return out


def _fw_softmax(v, p, a):
    x = v[p[0]]
    e = np.exp(x - np.max(x))
    return e / e.sum()


def _fw_logprob(v, p, a):
    return float(np.log(v[p[0]][a]))


def _fw_entropy(v, p, a):
    prob = v[p[0]]
    return float(-np.sum(prob * np.log(np.maximum(prob, 1e-300))))


def _fw_l05sum(v, p, a):
    return float(np.sum(l05_star(v[p[0]], a)))


def _make_fw_unary(op):
    def fw(v, p, a, _op=op):
        return guarded_eval(_op, v[p[0]])

    return fw


def _fw_sym_layer(v, p, a):
    unary_ops, binary_ops = a
    z = v[p[0]]
    u = len(unary_ops)
    out = np.empty((z.shape[0], u + len(binary_ops)))
    for i, op in enumerate(unary_ops):
        out[:, i] = guarded_eval(op, z[:, i])
    for j, op in enumerate(binary_ops):
        left, right = z[:, u + 2 * j], z[:, u + 2 * j + 1]
        if op == "add":
            out[:, u + j] = left + right
        elif op == "sub":
            out[:, u + j] = left - right
        elif op == "mul":
            out[:, u + j] = left * right
        elif op == "div":
            out[:, u + j] = guarded_div(left, right)
        else:
            raise ValueError(f"unknown binary operator {op!r}")
    return out


_FORWARD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "div": _fw_div,
    "gdiv": _fw_gdiv,
    "neg": _fw_neg,
    "pow_const": _fw_pow,
    "tanh": _fw_tanh,
    "sigmoid": _fw_sigmoid,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "mse": _fw_mse,
    "linear": _fw_linear,
    "affine": _fw_affine,
    "matvec": _fw_matvec,
    "squeeze": _fw_squeeze,
    "pad": _fw_pad,
    "softmax": _fw_softmax,
    "logprob": _fw_logprob,
    "entropy": _fw_entropy,
    "l05sum": _fw_l05sum,
    "sym_layer": _fw_sym_layer,
}
for _op in UNARY_OPS:
    _FORWARD[_op] = _make_fw_unary(_op)


# Backward rules: fn(values, parents, attr, adj_of_node, acc) where acc(idx, g)
# accumulates g into the adjoint of node idx.
def _bw_add(v, p, a, g, acc):
    acc(p[0], _unbroadcast(g, np.shape(v[p[0]])))
    acc(p[1], _unbroadcast(g, np.shape(v[p[1]])))


def _bw_sub(v, p, a, g, acc):
    acc(p[0], _unbroadcast(g, np.shape(v[p[0]])))
    acc(p[1], _unbroadcast(-g, np.shape(v[p[1]])))


def _bw_mul(v, p, a, g, acc):
    x, y = v[p[0]], v[p[1]]
    acc(p[0], _unbroadcast(g * y, np.shape(x)))
    acc(p[1], _unbroadcast(g * x, np.shape(y)))


def _bw_div(v, p, a, g, acc):
    x, y = v[p[0]], v[p[1]]
    acc(p[0], _unbroadcast(g / y, np.shape(x)))
    acc(p[1], _unbroadcast(-g * x / (y * y), np.shape(y)))


def _bw_gdiv(v, p, a, g, acc):
    x, y = v[p[0]], v[p[1]]
    safe = np.where(np.abs(y) < DIV_FLOOR, np.copysign(DIV_FLOOR, y), y)
    acc(p[0], _unbroadcast(g / safe, np.shape(x)))
    dy = np.where(np.abs(y) < DIV_FLOOR, 0.0, -g * x / (safe * safe))
    acc(p[1], _unbroadcast(dy, np.shape(y)))


def _bw_neg(v, p, a, g, acc):
    acc(p[0], -g)


def _bw_pow(v, p, a, g, acc):
    acc(p[0], g * a * v[p[0]] ** (a - 1))


def _bw_tanh(v, p, a, g, acc):
    t = np.tanh(v[p[0]])
    acc(p[0], g * (1.0 - t * t))


def _bw_sigmoid(v, p, a, g, acc):
    s = _fw_sigmoid(v, p, a)
    acc(p[0], g * s * (1.0 - s))


def _bw_sum(v, p, a, g, acc):
    x = v[p[0]]
    acc(p[0], g * np.ones_like(x) if isinstance(x, np.ndarray) else g)


def _bw_mean(v, p, a, g, acc):
    x = v[p[0]]
    if isinstance(x, np.ndarray):
        acc(p[0], np.full_like(x, g / x.size))
    else:
        acc(p[0], g)


def _bw_mse(v, p, a, g, acc):
    x, y = v[p[0]], v[p[1]]
    d = x - y
    scale = 2.0 * g / d.size
    acc(p[0], scale * d)
    acc(p[1], -scale * d)


def _bw_linear(v, p, a, g, acc):
    x, w = v[p[0]], v[p[1]]
    acc(p[0], g @ w)
    acc(p[1], g.T @ x)


def _bw_affine(v, p, a, g, acc):
    x, w = v[p[0]], v[p[1]]
    acc(p[0], g @ w)
    acc(p[1], g.T @ x)
    acc(p[2], g.sum(axis=0))


def _bw_matvec(v, p, a, g, acc):
    m, x = v[p[0]], v[p[1]]
    acc(p[0], np.outer(g, x))
    acc(p[1], m.T @ g)


def _bw_squeeze(v, p, a, g, acc):
    acc(p[0], np.asarray(g)[:, None])


def _bw_pad(v, p, a, g, acc):
    acc(p[0], g[: v[p[0]].shape[0]])


def _bw_softmax(v, p, a, g, acc):
    e = np.exp(v[p[0]] - np.max(v[p[0]]))
    prob = e / e.sum()
    acc(p[0], prob * (g - np.dot(g, prob)))


def _bw_logprob(v, p, a, g, acc):
    prob = v[p[0]]
    d = np.zeros_like(prob)
    d[a] = g / prob[a]
    acc(p[0], d)


def _bw_entropy(v, p, a, g, acc):
    prob = np.maximum(v[p[0]], 1e-300)
    acc(p[0], g * (-np.log(prob) - 1.0))


def _bw_l05sum(v, p, a, g, acc):
    acc(p[0], g * l05_star_grad(v[p[0]], a))


def _make_bw_unary(op):
    def bw(v, p, a, g, acc, _op=op):
        acc(p[0], g * guarded_grad(_op, v[p[0]]))

    return bw


def _bw_sym_layer(v, p, a, g, acc):
    unary_ops, binary_ops = a
    z = v[p[0]]
    u = len(unary_ops)
    dz = np.zeros_like(z)
    for i, op in enumerate(unary_ops):
        dz[:, i] = g[:, i] * guarded_grad(op, z[:, i])
    for j, op in enumerate(binary_ops):
        go = g[:, u + j]
        left, right = z[:, u + 2 * j], z[:, u + 2 * j + 1]
        if op == "add":
            dz[:, u + 2 * j] = go
            dz[:, u + 2 * j + 1] = go
        elif op == "sub":
            dz[:, u + 2 * j] = go
            dz[:, u + 2 * j + 1] = -go
        elif op == "mul":
            dz[:, u + 2 * j] = go * right
            dz[:, u + 2 * j + 1] = go * left
        elif op == "div":
            safe = np.where(np.abs(right) < DIV_FLOOR, np.copysign(DIV_FLOOR, right), right)
            dz[:, u + 2 * j] = go / safe
            dz[:, u + 2 * j + 1] = np.where(np.abs(right) < DIV_FLOOR, 0.0, -go * left / (safe * safe))
    acc(p[0], dz)


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "gdiv": _bw_gdiv,
    "neg": _bw_neg,
    "pow_const": _bw_pow,
    "tanh": _bw_tanh,
    "sigmoid": _bw_sigmoid,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "mse": _bw_mse,
    "linear": _bw_linear,
    "affine": _bw_affine,
    "matvec": _bw_matvec,
    "squeeze": _bw_squeeze,
    "pad": _bw_pad,
    "softmax": _bw_softmax,
    "logprob": _bw_logprob,
    "entropy": _bw_entropy,
    "l05sum": _bw_l05sum,
    "sym_layer": _bw_sym_layer,
}
for _op in UNARY_OPS:
    _BACKWARD[_op] = _make_bw_unary(_op)

# Shape contracts checked at record time: (op, arity) -> validator
_BINARY_ELEMWISE = ("add", "sub", "mul", "div", "gdiv")


def _check_shapes(op, vals):
    shapes = [np.shape(x) for x in vals]
    if op in _BINARY_ELEMWISE:
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            raise ShapeError(f"{op}: operands not broadcastable, shapes {shapes}") from None
    elif op == "linear" or op == "affine":
        x, w = shapes[0], shapes[1]
        if len(x) != 2 or len(w) != 2 or x[1] != w[1]:
            raise ShapeError(f"{op}: expected (n,k) @ (m,k)^T, got {shapes}")
        if op == "affine" and shapes[2] != (w[0],):
            raise ShapeError(f"affine: bias shape {shapes[2]} does not match output dim {w[0]}")
    elif op == "matvec":
        m, x = shapes[0], shapes[1]
        if len(m) != 2 or len(x) != 1 or m[1] != x[0]:
            raise ShapeError(f"matvec: expected (r,c) @ (c,), got {shapes}")
    elif op == "squeeze":
        if len(shapes[0]) != 2 or shapes[0][1] != 1:
            raise ShapeError(f"squeeze: expected (n,1), got {shapes[0]}")
    elif op in ("softmax", "logprob", "entropy", "pad"):
        if len(shapes[0]) != 1:
            raise ShapeError(f"{op}: expected a vector, got shape {shapes[0]}")


class Tape:
    """An append-only record of primitive ops over scalars and dense arrays."""

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.attrs: list = []
        self.values: list = []
        self.adjoints: list = []
        self._fwd: list = []

    def __len__(self):
        return len(self.ops)

    def leaf(self, value) -> Value:
        """Record an input node (weight, constant, data array)."""
        if isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=float)
        else:
            value = float(value)
        self.ops.append("leaf")
        self.parents.append(())
        self.attrs.append(None)
        self.values.append(value)
        self._fwd.append(None)
        return Value(self, len(self.ops) - 1)

    def lift(self, x) -> Value:
        return x if isinstance(x, Value) else self.leaf(x)

    def apply(self, op: str, *inputs: Value, attr=None) -> Value:
        """Record primitive ``op`` over ``inputs`` and compute its value."""
        fwd = _FORWARD.get(op)
        if fwd is None:
            raise ValueError(f"unknown primitive {op!r}")
        parents = tuple(v.index for v in inputs)
        _check_shapes(op, [self.values[i] for i in parents])
        self.ops.append(op)
        self.parents.append(parents)
        self.attrs.append(attr)
        try:
            value = fwd(self.values, parents, attr)
        except ValueError as exc:
            self.ops.pop(), self.parents.pop(), self.attrs.pop()
            raise ShapeError(f"{op}: {exc}") from exc
        self.values.append(value)
        self._fwd.append(fwd)
        return Value(self, len(self.ops) - 1)

    def set_leaf(self, v: Value, value) -> None:
        """Replace a leaf's value before :meth:`recompute`."""
        if self.ops[v.index] != "leaf":
            raise ValueError("set_leaf on a non-leaf node")
        self.values[v.index] = value

    def recompute(self) -> None:
        """Re-execute the recorded graph with current leaf values."""
        values, parents, attrs = self.values, self.parents, self.attrs
        for i, fwd in enumerate(self._fwd):
            if fwd is not None:
                values[i] = fwd(values, parents[i], attrs[i])

    def backward(self, root: Value) -> None:
        """Populate adjoints of every node reachable from scalar ``root``.

        Resets all adjoints first, so repeated calls (possibly from different
        roots) are independent and deterministic.
        """
        if np.shape(self.values[root.index]) != ():
            raise ShapeError(
                f"backward root must be scalar, got shape {np.shape(self.values[root.index])}"
            )
        n = len(self.ops)
        adj = [None] * n
        adj[root.index] = 1.0

        def acc(idx, g):
            cur = adj[idx]
            adj[idx] = g if cur is None else cur + g

        values, parents, attrs, ops = self.values, self.parents, self.attrs, self.ops
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = ops[i]
            if op == "leaf":
                continue
            _BACKWARD[op](values, parents[i], attrs[i], g, acc)
        self.adjoints = adj

    def grad(self, v: Value):
        """Adjoint of ``v`` after :meth:`backward` (zeros if unreachable)."""
        g = self.adjoints[v.index]
        if g is None:
            val = self.values[v.index]
            return np.zeros_like(val) if isinstance(val, np.ndarray) else 0.0
        return g

    # Convenience wrappers used throughout the package.
    def unary(self, op: str, x: Value) -> Value:
        return self.apply(op, x)

    def affine(self, x: Value, w: Value, b: Value | None = None) -> Value:
        """x @ w.T (+ b): the linear map of one network layer."""
        if b is None:
            return self.apply("linear", x, w)
        return self.apply("affine", x, w, b)
