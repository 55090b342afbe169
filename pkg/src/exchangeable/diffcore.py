"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the handful of primitives needed by the set encoders and the PPO
objective are provided.  Everything is float64.  Operations evaluated while a
:class:`Tape` is active (``with Tape() as tape:``) are recorded so that
:func:`backward` can replay them in reverse; outside a tape the same functions
are plain numpy evaluations, which is what rollout workers use.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step sees NaN/Inf; ``report`` lists the offenders."""

    def __init__(self, report: list[str]):
        self.report = report
        super().__init__("non-finite gradient rejected:\n  " + "\n  ".join(report))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


class Tape:
    """Ordered record of primitive evaluations.

    Nodes are appended as operations execute, so the list is already in
    topological order; :func:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out leading axes and axes that were broadcast from extent 1
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def affine(weights: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """``x @ weights.T + bias`` over the last axis of ``x`` (any leading batch axes)."""
    weights, bias, x = as_tensor(weights), as_tensor(bias), as_tensor(x)
    if (
        weights.ndim != 2
        or bias.shape != (weights.shape[0],)
        or x.ndim < 1
        or x.shape[-1] != weights.shape[1]
    ):
        raise DimensionError(
            f"affine: weights {weights.shape}, bias {bias.shape} incompatible with x {x.shape}"
        )
    W, xd = weights.data, x.data
    out = xd @ W.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return g2.T @ x2, g2.sum(axis=0), g @ W

    return _result(out, (weights, bias, x), backward, "affine")


def tanh_activation(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def softmax(v: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax along ``axis``.

    ``mask`` (broadcastable to ``v``) marks valid entries; masked entries get
    weight 0.  A slice with no valid entries yields all zeros rather than NaN,
    which is how empty object sets are pooled to the zero vector.
    """
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise DomainError(f"softmax over an empty axis (shape {v.shape})")
    x = v.data
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        w = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        top = np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x - top, 0.0)), 0.0)
        total = e.sum(axis=axis, keepdims=True)
        w = e / np.where(total > 0.0, total, 1.0)

    def backward(g):
        return (w * (g - (g * w).sum(axis=axis, keepdims=True)),)

    return _result(w, (v,), backward, "softmax")


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"reduce_sum: axis {axis} out of range for shape {x.shape}")
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    shape = x.shape
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),), "mean"
    )


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _result(ad / bd, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with a straight zero gradient outside ``[lo, hi]``."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    # ties route the gradient to ``a``
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def backward(g):
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        )

    return _result(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ax = axis if axis >= 0 else tensors[0].ndim + axis
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- gradients


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on through ``tape``.

    Gradients add into existing ``.grad`` buffers, so call :func:`zero_grad`
    on parameters between independent passes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grads_of(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``.

    Nothing is modified if any gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    bad = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: grad {g.shape} for param {p.shape}")
        n_bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        if n_bad:
            bad.append(f"{p.name or f'param[{i}]'} shape={p.shape}: {n_bad} non-finite entries")
    if bad:
        raise NonFiniteGradientError(bad)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------- checking


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    Each entry's error is ``|a - fd| / max(|a|, |fd|, floor)``. The floor keeps
    exactly-zero gradients (e.g. a bias the softmax is blind to) from turning
    central-difference roundoff (~1e-11) into a large relative error.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Pass ``analytic`` to check externally supplied gradients instead of the
    ones computed here.
    """
    if h <= 0:
        raise DomainError("finite-difference step must be positive")
    if analytic is None:
        zero_grad(params)
        with Tape() as tape:
            loss = loss_fn()
        backward(loss, tape)
        analytic = grads_of(params)
        zero_grad(params)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = np.asarray(a).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, abs(a_flat[i] - fd) / max(abs(a_flat[i]), abs(fd), floor))
    return worst


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, named: dict[str, np.ndarray]) -> None:
    """Write parameters as plain-text blocks: ``name``, ``shape``, ``values``."""
    lines = []
    for name, arr in named.items():
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"name {name}")
        lines.append("shape " + " ".join(str(n) for n in arr.shape))
        lines.append("values " + " ".join(repr(float(x)) for x in arr.reshape(-1)))
        lines.append("")
    Path(path).write_text("\n".join(lines))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    name = shape = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        if key == "name":
            name = rest.strip()
        elif key == "shape":
            shape = tuple(int(s) for s in rest.split())
        elif key == "values":
            if name is None or shape is None:
                raise ValueError(f"{path}:{lineno}: values before name/shape")
            vals = np.array([float(s) for s in rest.split()], dtype=np.float64)
            if vals.size != math.prod(shape):
                raise ValueError(f"{path}:{lineno}: {vals.size} values for shape {shape}")
            out[name] = vals.reshape(shape)
            name = shape = None
        else:
            raise ValueError(f"{path}:{lineno}: unexpected line {line[:40]!r}")
    return out
