"""Dense float64 tensors with a define-by-run tape and reverse-mode gradients.

Every op is a pair (forward, vjp) registered in ``OPS``.  A ``Tensor`` that
carries a tape node records the ops applied to it; tensors without a node are
constants.  ``Tape.backward`` walks the recorded nodes once in reverse order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "OPS",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_check",
    "grad_check_report",
    "GradCheckError",
]


class GradCheckError(ValueError):
    """Raised when a finite-difference probe produces a non-finite value."""


@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., tuple[np.ndarray, Any]]
    vjp: Callable[[np.ndarray, Any], tuple[np.ndarray | None, ...]]


OPS: dict[str, OpDef] = {}


def _register(name: str, forward, vjp) -> None:
    OPS[name] = OpDef(forward, vjp)


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    attrs: dict[str, Any]
    saved: Any
    value: np.ndarray


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        data = np.asarray(data)
        # extended precision passes through for gradient-check probes
        if data.dtype != np.longdouble:
            data = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = data if data.flags.c_contiguous else data.copy()
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Append-only record of ops; parameters are named leaf nodes."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self.recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        for i in node.inputs:
            if i is not None and i >= len(self.nodes):
                raise RuntimeError("tape node references a later node")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already on tape")
        t = Tensor(value)
        t.tape = self
        t.node = self._append(Node("leaf", (), {"name": name}, None, t.data))
        self.params[name] = t.node
        return t

    def params_from(self, values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in values.items()}

    def leaf(self, value) -> Tensor:
        """Untrainable but tracked input (used by replay)."""
        t = Tensor(value)
        t.tape = self
        t.node = self._append(Node("leaf", (), {"name": None}, None, t.data))
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)

    def replay(self, overrides: Mapping[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every recorded forward op, optionally with new parameter values."""
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                name = node.attrs["name"]
                v = overrides.get(name, node.value) if name is not None else node.value
                values.append(np.asarray(v, dtype=np.float64))
                continue
            args = [values[i] if i is not None else c
                    for i, c in zip(node.inputs, node.attrs["_consts"])]
            out, _ = OPS[node.kind].forward(*args, **_op_attrs(node.attrs))
            values.append(out)
        return values


def _op_attrs(attrs: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in attrs.items() if not k.startswith("_")}


def _apply(kind: str, inputs: Sequence[Any], **attrs) -> Tensor:
    tensors = [as_tensor(x) for x in inputs]
    out, saved = OPS[kind].forward(*(t.data for t in tensors), **attrs)
    tape = next((t.tape for t in tensors if t.node is not None), None)
    if tape is None or not tape.recording:
        return Tensor(out)
    for t in tensors:
        if t.node is not None and t.tape is not tape:
            raise ValueError("inputs recorded on different tapes")
    node_attrs = dict(attrs)
    # constants are kept so replay can re-evaluate the op
    node_attrs["_consts"] = tuple(None if t.node is not None else t.data for t in tensors)
    node = Node(kind, tuple(t.node for t in tensors), node_attrs, saved, out)
    out_t = Tensor(out)
    out_t.tape = tape
    out_t.node = tape._append(node)
    return out_t


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every parameter on ``tape``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[str, np.ndarray] = {
        name: np.zeros_like(tape.nodes[i].value) for name, i in tape.params.items()
    }
    if loss.node is None or loss.tape is not tape:
        return grads
    adj: list[np.ndarray | None] = [None] * (loss.node + 1)
    adj[loss.node] = np.ones((), dtype=np.float64)
    for i in range(loss.node, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.kind == "leaf":
            name = node.attrs["name"]
            if name is not None:
                grads[name] = grads[name] + g
            continue
        in_grads = OPS[node.kind].vjp(g, node.saved)
        for j, gj in zip(node.inputs, in_grads):
            if j is None or gj is None:
                continue
            adj[j] = gj if adj[j] is None else adj[j] + gj
        adj[i] = None
    return grads


# --------------------------------------------------------------------------
# op implementations


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_vjp(g, s):
    return _unbroadcast(g, s[0]), _unbroadcast(g, s[1])


def _sub_fwd(a, b):
    _check_broadcast("subtract", a, b)
    return a - b, (a.shape, b.shape)


def _sub_vjp(g, s):
    return _unbroadcast(g, s[0]), -_unbroadcast(g, s[1])


def _mul_fwd(a, b):
    _check_broadcast("multiply", a, b)
    return a * b, (a, b)


def _mul_vjp(g, s):
    a, b = s
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    return a @ b, (a, b)


def _matmul_vjp(g, s):
    a, b = s
    if b.ndim == 2:
        # shared right operand: fold the batch into one 2-D product
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    if a.ndim == 2:
        # shared left operand: (K, n) @ (B, n, p)
        ga = np.tensordot(g, b, axes=(list(range(g.ndim - 2)) + [g.ndim - 1],
                                      list(range(b.ndim - 2)) + [b.ndim - 1]))
        return ga, a.T @ g
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _scale_fwd(a, c):
    return a * c, c


def _scale_vjp(g, c):
    return (g * c,)


def _exp_fwd(a):
    y = np.exp(a)
    return y, y


def _exp_vjp(g, y):
    return (g * y,)


def _log_fwd(a):
    if np.any(a <= 0):
        raise ValueError("log: input must be strictly positive")
    return np.log(a), a


def _log_vjp(g, a):
    return (g / a,)


def _sigmoid_fwd(a):
    y = expit(a)
    return y, y


def _sigmoid_vjp(g, y):
    return (g * y * (1.0 - y),)


def _softplus_fwd(a):
    return np.logaddexp(0.0, a), a


def _softplus_vjp(g, a):
    return (g * expit(a),)


def _tanh_fwd(a):
    y = np.tanh(a)
    return y, y


def _tanh_vjp(g, y):
    return (g * (1.0 - y * y),)


def _softmax_fwd(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_vjp(g, y):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _transpose_fwd(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            raise ValueError(f"transpose: need at least 2 dims, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return np.transpose(a, axes), np.argsort(axes)


def _transpose_vjp(g, inv):
    return (np.transpose(g, inv),)


def _reshape_fwd(a, shape):
    return a.reshape(shape), a.shape


def _reshape_vjp(g, shape):
    return (g.reshape(shape),)


def _concat_fwd(*arrays, axis=0):
    out = np.concatenate(arrays, axis=axis)
    return out, (axis, [x.shape[axis] for x in arrays])


def _concat_vjp(g, s):
    axis, sizes = s
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _slice_fwd(a, idx):
    return np.array(a[idx]), (a.shape, idx)


def _slice_vjp(g, s):
    shape, idx = s
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return (out,)


def _gather_fwd(a, index):
    # flat integer gather; the adjoint is a bincount, much faster than add.at
    index = np.asarray(index, dtype=np.intp)
    return a.reshape(-1)[index], (a.shape, index)


def _gather_vjp(g, s):
    shape, index = s
    flat = np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=int(np.prod(shape)))
    return (flat.reshape(shape),)


def _pair_sqdist_fwd(a, left, right):
    # rows of a (N, D); one squared distance per (left[p], right[p]) pair
    diff = a[left] - a[right]
    return np.einsum("pd,pd->p", diff, diff), (a, left, right)


def _pair_sqdist_vjp(g, s):
    a, left, right = s
    N = a.shape[0]
    # W[i, j] accumulates g over pairs (i, j); the adjoint is then two small matmuls
    # instead of a scatter of every pair difference
    W = np.bincount(left * N + right, weights=g, minlength=N * N).reshape(N, N).astype(a.dtype)
    deg = W.sum(axis=1) + W.sum(axis=0)
    return (2.0 * (deg[:, None] * a - W @ a - W.T @ a),)


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_vjp(g, s):
    shape, axis, keepdims = s
    return (np.array(_expand_reduced(g, shape, axis, keepdims)),)


def _mean_fwd(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return np.mean(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims, n)


def _mean_vjp(g, s):
    shape, axis, keepdims, n = s
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / n,)


def _sqnorm_fwd(a, axis=None):
    return np.sum(a * a, axis=axis), (a, axis)


def _sqnorm_vjp(g, s):
    a, axis = s
    return (2.0 * a * _expand_reduced(g, a.shape, axis, False),)


def _broadcast_fwd(a, shape):
    if a.size != 1:
        raise ValueError(f"broadcast: only scalars broadcast, got shape {a.shape}")
    return np.full(shape, a.reshape(()).item()), a.shape


def _broadcast_vjp(g, shape):
    return (np.full(shape, g.sum()),)


def _clamp_fwd(a, lo, hi):
    mask = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), mask


def _clamp_vjp(g, mask):
    return (g * mask,)


for _name, _f, _b in [
    ("add", _add_fwd, _add_vjp),
    ("subtract", _sub_fwd, _sub_vjp),
    ("multiply", _mul_fwd, _mul_vjp),
    ("matmul", _matmul_fwd, _matmul_vjp),
    ("scale", _scale_fwd, _scale_vjp),
    ("exp", _exp_fwd, _exp_vjp),
    ("log", _log_fwd, _log_vjp),
    ("sigmoid", _sigmoid_fwd, _sigmoid_vjp),
    ("softplus", _softplus_fwd, _softplus_vjp),
    ("tanh", _tanh_fwd, _tanh_vjp),
    ("softmax", _softmax_fwd, _softmax_vjp),
    ("transpose", _transpose_fwd, _transpose_vjp),
    ("reshape", _reshape_fwd, _reshape_vjp),
    ("concat", _concat_fwd, _concat_vjp),
    ("slice", _slice_fwd, _slice_vjp),
    ("gather", _gather_fwd, _gather_vjp),
    ("pair_sqdist", _pair_sqdist_fwd, _pair_sqdist_vjp),
    ("sum", _sum_fwd, _sum_vjp),
    ("mean", _mean_fwd, _mean_vjp),
    ("sqnorm", _sqnorm_fwd, _sqnorm_vjp),
    ("broadcast", _broadcast_fwd, _broadcast_vjp),
    ("clamp", _clamp_fwd, _clamp_vjp),
]:
    _register(_name, _f, _b)


# --------------------------------------------------------------------------
# public op functions


def add(a, b) -> Tensor:
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    return _apply("subtract", (a, b))


def mul(a, b) -> Tensor:
    return _apply("multiply", (a, b))


def matmul(a, b) -> Tensor:
    return _apply("matmul", (a, b))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (a,), c=float(c))


def exp(a) -> Tensor:
    return _apply("exp", (a,))


def log(a) -> Tensor:
    return _apply("log", (a,))


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", (a,))


def softplus(a) -> Tensor:
    return _apply("softplus", (a,))


def tanh(a) -> Tensor:
    return _apply("tanh", (a,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    return _apply("softmax", (a,))


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    return _apply("transpose", (a,), axes=axes)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    return _apply("reshape", (a,), shape=tuple(shape))


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    return _apply("concat", tuple(tensors), axis=axis)


def slice_(a, idx) -> Tensor:
    return _apply("slice", (a,), idx=idx)


def gather(a, index) -> Tensor:
    """Pick entries of the flattened tensor at integer positions ``index``."""
    return _apply("gather", (a,), index=np.asarray(index, dtype=np.intp))


def pair_sqdist(a, left, right) -> Tensor:
    """Squared distances between rows ``left[p]`` and ``right[p]`` of a 2-d tensor."""
    return _apply("pair_sqdist", (a,), left=np.asarray(left, dtype=np.intp),
                  right=np.asarray(right, dtype=np.intp))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("mean", (a,), axis=axis, keepdims=keepdims)


def sqnorm(a, axis=None) -> Tensor:
    """Sum of squares; over everything (Frobenius) when ``axis`` is None."""
    return _apply("sqnorm", (a,), axis=axis)


def broadcast(a, shape: tuple[int, ...]) -> Tensor:
    return _apply("broadcast", (a,), shape=tuple(shape))


def clamp(a, lo: float, hi: float) -> Tensor:
    return _apply("clamp", (a,), lo=float(lo), hi=float(hi))


def stack_last(tensors: Sequence[Any]) -> Tensor:
    """Stack equally shaped tensors along a new trailing axis."""
    parts = [reshape(t, as_tensor(t).shape + (1,)) for t in tensors]
    return concat(parts, axis=-1)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, int] | None = None
    per_param: dict[str, float] = field(default_factory=dict)


def grad_check(f, params, step: float = 1e-5, **kw) -> float:
    """Max relative error of tape gradients vs central differences."""
    return grad_check_report(f, params, step, **kw).max_rel_error


def grad_check_report(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    names: Sequence[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    probe_dtype=np.longdouble,
) -> GradCheckResult:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` receives a fresh tape and the parameters as tape tensors and must
    return a scalar tensor.  The error for each coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.  With
    ``max_coords`` only a random subset of coordinates per parameter is probed.

    The probes run in ``probe_dtype`` (extended precision by default) so the
    round-off of ``f(x +- step)`` stays far below small true derivatives;
    the analytic pass is always float64.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    loss = f(tape, tape.params_from(params))
    analytic = backward(tape, loss)

    probe = {k: v.astype(probe_dtype) for k, v in params.items()}

    def value(trial: dict[str, np.ndarray]):
        t = Tape()
        t.recording = False
        return f(t, {k: Tensor(v) for k, v in trial.items()}).data[()]

    result = GradCheckResult(0.0)
    for name in names if names is not None else list(params):
        p = probe[name]
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(p.size, max_coords, replace=False)
        worst_here = 0.0
        for c in coords:
            flat = p.reshape(-1)
            orig = flat[c]
            try:
                flat[c] = orig + step
                fp = value(probe)
                flat[c] = orig - step
                fm = value(probe)
            except (ValueError, FloatingPointError) as exc:
                raise GradCheckError(f"probe of {name}[{int(c)}] failed: {exc}") from exc
            finally:
                flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite loss probing {name}[{int(c)}]")
            num = float((fp - fm) / (2 * (orig + step - orig)))
            ana = analytic[name].reshape(-1)[c]
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            if err > worst_here:
                worst_here = err
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (name, int(c))
        result.per_param[name] = worst_here
    return result
