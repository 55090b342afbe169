"""Set encoders over exchangeable objects.

The attention encoder scores every object with a scalar filter network,
softmax-normalises the scores across the set and pools the per-object
embeddings with those weights.  Deep Sets (sum pooling) and a plain ordered
concatenation are provided as baselines, and :func:`encode_multiclass`
composes one encoder per object class with an ego context vector.

Single-set functions take an ``(m, d)`` array.  The ``*_batch`` functions take
padded ``(B, M, d)`` values plus a ``(B, M)`` validity mask and are what the
policy uses during training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor


class EmptySetError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------- networks


class MLP:
    """tanh multilayer perceptron with a linear output layer."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        out_scale: float = 1.0,
        name: str = "mlp",
    ):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers: list[tuple[Tensor, Tensor]] = []
        n_layers = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = (out_scale if i == n_layers - 1 else 1.0) / np.sqrt(fan_in)
            W = Tensor(rng.normal(0.0, scale, (fan_out, fan_in)), True, f"{name}.{i}.weight")
            b = Tensor(np.zeros(fan_out), True, f"{name}.{i}.bias")
            self.layers.append((W, b))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def __call__(self, x) -> Tensor:
        h = dc.as_tensor(x)
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = dc.affine(W, b, h)
            if i < last:
                h = dc.tanh_activation(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]


def _check_objects(objects, d: int) -> np.ndarray:
    arr = objects.data if isinstance(objects, Tensor) else np.asarray(objects, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != d:
        raise DimensionError(f"expected (m, {d}) object array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptySetError("encoding an empty object set")
    return arr


# ---------------------------------------------------------------- attention


@dataclass
class AttentionEncoderParams:
    filter_net: MLP
    input_net: MLP
    k: int

    def __post_init__(self):
        if self.filter_net.out_dim != 1:
            raise ConfigurationError(f"filter net must output 1 value, not {self.filter_net.out_dim}")
        if self.input_net.out_dim != self.k:
            raise ConfigurationError(f"input net width {self.input_net.out_dim} != k={self.k}")
        if self.filter_net.in_dim != self.input_net.in_dim:
            raise ConfigurationError("filter and input nets disagree on object dimension")

    @classmethod
    def init(cls, d: int, k: int = 64, hidden: Sequence[int] = (64, 64), rng=None, name="attn"):
        rng = np.random.default_rng(rng)
        return cls(
            MLP([d, *hidden, 1], rng, name=f"{name}.filter"),
            MLP([d, *hidden, k], rng, name=f"{name}.inputs"),
            k,
        )

    @property
    def d(self) -> int:
        return self.filter_net.in_dim

    @property
    def out_dim(self) -> int:
        return self.k

    def parameters(self) -> list[Tensor]:
        return self.filter_net.parameters() + self.input_net.parameters()


@dataclass
class AttentionTrace:
    y: np.ndarray  # (m,) raw filter scores
    w: np.ndarray  # (m,) softmax weights
    z: np.ndarray  # (m, k) weighted contributions
    s_star: np.ndarray  # (k,)


def attention_batch(params: AttentionEncoderParams, values, mask=None):
    """Pool ``values`` of shape ``(..., M, d)``; returns ``(s_star, y, w, z)`` tensors.

    Sets whose mask is all False pool to the zero vector.
    """
    values = dc.as_tensor(values)
    y = params.filter_net(values)  # (..., M, 1)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None]
    w = dc.softmax(y, axis=-2, mask=mask)
    z = dc.mul(w, params.input_net(values))  # (..., M, k)
    return dc.reduce_sum(z, axis=-2), y, w, z


def encode_attention(params: AttentionEncoderParams, objects) -> tuple[Tensor, AttentionTrace]:
    _check_objects(objects, params.d)
    s_star, y, w, z = attention_batch(params, objects)
    trace = AttentionTrace(y.data[:, 0], w.data[:, 0], z.data, s_star.data)
    return s_star, trace


def attention_as_sum_form(params: AttentionEncoderParams, objects) -> np.ndarray:
    """Attention pooling written as ``rho(sum_j phi(s_j))``.

    ``phi(s) = (exp(f(s) - c) * g(s), exp(f(s) - c))`` and ``rho(a, b) = a / b``
    with ``c`` the largest filter score.  Evaluated without the tape.
    """
    arr = _check_objects(objects, params.d)
    scores = params.filter_net(arr).data[:, 0]
    embed = params.input_net(arr).data
    c = scores.max()
    a = np.zeros(params.k)
    b = 0.0
    for score, row in zip(scores, embed):
        weight = np.exp(score - c)
        a += weight * row
        b += weight
    return a / b


# ---------------------------------------------------------------- deep sets


@dataclass
class DeepSetsParams:
    phi_net: MLP
    rho_net: MLP

    def __post_init__(self):
        if self.phi_net.out_dim != self.rho_net.in_dim:
            raise ConfigurationError(
                f"phi width {self.phi_net.out_dim} != rho input {self.rho_net.in_dim}"
            )

    @classmethod
    def init(cls, d: int, k: int = 64, hidden: Sequence[int] = (64, 64), p: int | None = None, rng=None, name="deepsets"):
        rng = np.random.default_rng(rng)
        p = hidden[-1] if p is None else p
        return cls(
            MLP([d, *hidden, p], rng, name=f"{name}.phi"),
            MLP([p, hidden[-1], k], rng, name=f"{name}.rho"),
        )

    @property
    def d(self) -> int:
        return self.phi_net.in_dim

    @property
    def out_dim(self) -> int:
        return self.rho_net.out_dim

    def parameters(self) -> list[Tensor]:
        return self.phi_net.parameters() + self.rho_net.parameters()


def deepsets_batch(params: DeepSetsParams, values, mask=None) -> Tensor:
    phi = params.phi_net(values)
    if mask is not None:
        phi = dc.mul(phi, np.asarray(mask, dtype=np.float64)[..., None])
    return params.rho_net(dc.reduce_sum(phi, axis=-2))


def encode_deepsets(params: DeepSetsParams, objects) -> Tensor:
    _check_objects(objects, params.d)
    return deepsets_batch(params, objects)


# ---------------------------------------------------------------- ordered


@dataclass
class OrderedParams:
    """Weightless slot layout for the ordered-concatenation baseline."""

    d: int
    max_slots: int

    @property
    def out_dim(self) -> int:
        return self.d * self.max_slots

    def parameters(self) -> list[Tensor]:
        return []


def encode_ordered(objects, max_slots: int) -> np.ndarray:
    """Concatenate rows in the given order, zero-padded to ``max_slots`` rows."""
    arr = np.asarray(objects, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected (m, d) object array, got shape {arr.shape}")
    m, d = arr.shape
    if m > max_slots:
        raise CapacityError(f"{m} objects exceed {max_slots} slots")
    out = np.zeros(max_slots * d)
    out[: m * d] = arr.reshape(-1)
    return out


def ordered_batch(params: OrderedParams, values, mask=None) -> Tensor:
    vals = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    B, M, d = vals.shape
    if M > params.max_slots:
        raise CapacityError(f"{M} slots exceed {params.max_slots}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        # valid rows first, relative order kept
        order = np.argsort(~mask, axis=1, kind="stable")
        vals = np.take_along_axis(vals, order[..., None], axis=1)
        vals = vals * np.take_along_axis(mask, order, axis=1)[..., None]
    out = np.zeros((B, params.max_slots * d))
    out[:, : M * d] = vals.reshape(B, M * d)
    return Tensor(out)


# ---------------------------------------------------------------- multi-class

EncoderParams = Union[AttentionEncoderParams, DeepSetsParams, OrderedParams]


@dataclass
class ObjectSet:
    """Objects grouped by class; each class holds an ``(m_c, d_c)`` array.

    Class order is the insertion order of ``classes``.  ``ego`` is the
    non-exchangeable context vector appended after pooling.
    """

    classes: dict[str, np.ndarray]
    ego: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.classes = {
            name: np.asarray(v, dtype=np.float64).reshape(-1, np.shape(v)[-1])
            for name, v in self.classes.items()
        }
        self.ego = np.asarray(self.ego, dtype=np.float64).reshape(-1)

    def count(self, name: str) -> int:
        return self.classes[name].shape[0]

    def dim(self, name: str) -> int:
        return self.classes[name].shape[1]

    def permuted(self, rng: np.random.Generator) -> "ObjectSet":
        """Random within-class reordering."""
        return ObjectSet(
            {name: v[rng.permutation(v.shape[0])] for name, v in self.classes.items()},
            self.ego.copy(),
        )

    def to_batch(self, capacities: Mapping[str, int] | None = None) -> "ObjectBatch":
        values, masks = {}, {}
        for name, v in self.classes.items():
            cap = v.shape[0] if capacities is None else capacities[name]
            if v.shape[0] > cap:
                raise CapacityError(f"class {name!r}: {v.shape[0]} objects exceed capacity {cap}")
            padded = np.zeros((1, cap, v.shape[1]))
            padded[0, : v.shape[0]] = v
            mask = np.zeros((1, cap), dtype=bool)
            mask[0, : v.shape[0]] = True
            values[name], masks[name] = padded, mask
        return ObjectBatch(values, masks, self.ego[None, :])


@dataclass
class ObjectBatch:
    """Padded batch of object sets: per class ``(B, M_c, d_c)`` values and ``(B, M_c)`` masks."""

    values: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    ego: np.ndarray  # (B, d_ego)

    def __len__(self) -> int:
        return self.ego.shape[0]

    def take(self, idx) -> "ObjectBatch":
        return ObjectBatch(
            {k: v[idx] for k, v in self.values.items()},
            {k: m[idx] for k, m in self.masks.items()},
            self.ego[idx],
        )

    @staticmethod
    def stack(batches: Sequence["ObjectBatch"]) -> "ObjectBatch":
        first = batches[0]
        return ObjectBatch(
            {k: np.concatenate([b.values[k] for b in batches]) for k in first.values},
            {k: np.concatenate([b.masks[k] for b in batches]) for k in first.masks},
            np.concatenate([b.ego for b in batches]),
        )

    def object_set(self, i: int) -> ObjectSet:
        return ObjectSet(
            {k: v[i][self.masks[k][i]] for k, v in self.values.items()}, self.ego[i].copy()
        )


def pool_batch(params: EncoderParams, values, mask=None) -> Tensor:
    if isinstance(params, AttentionEncoderParams):
        return attention_batch(params, values, mask)[0]
    if isinstance(params, DeepSetsParams):
        out = deepsets_batch(params, values, mask)
        if mask is not None:
            # an empty class encodes to zeros regardless of rho's bias
            out = dc.mul(out, np.asarray(mask, dtype=bool).any(axis=-1, keepdims=True).astype(float))
        return out
    if isinstance(params, OrderedParams):
        return ordered_batch(params, values, mask)
    raise ConfigurationError(f"unknown encoder params {type(params).__name__}")


def encode_multiclass_batch(encoders: Mapping[str, EncoderParams], batch: ObjectBatch) -> Tensor:
    """``(B, sum_c k_c + d_ego)`` features: pooled classes in class order, then ego."""
    parts = []
    for name, vals in batch.values.items():
        mask = batch.masks[name]
        enc = encoders.get(name)
        if enc is None:
            if mask.any():
                raise ConfigurationError(f"no encoder configured for populated class {name!r}")
            continue
        if vals.shape[-1] != enc.d:
            raise DimensionError(f"class {name!r}: objects have d={vals.shape[-1]}, encoder expects {enc.d}")
        parts.append(pool_batch(enc, vals, mask))
    if batch.ego.shape[-1]:
        parts.append(Tensor(batch.ego))
    return dc.concat(parts, axis=-1) if len(parts) > 1 else parts[0]


def encode_multiclass(encoders: Mapping[str, EncoderParams], objects: ObjectSet, d_ego: int | None = None) -> Tensor:
    if d_ego is not None and objects.ego.shape[0] != d_ego:
        raise DimensionError(f"ego vector has length {objects.ego.shape[0]}, expected {d_ego}")
    caps = {
        name: enc.max_slots if isinstance(enc, OrderedParams) else max(objects.count(name), 1)
        for name, enc in encoders.items()
        if name in objects.classes
    }
    for name in objects.classes:
        caps.setdefault(name, max(objects.count(name), 1))
    out = encode_multiclass_batch(encoders, objects.to_batch(caps))
    return dc.reshape(out, (out.shape[-1],))


def build_encoders(
    kind: str,
    class_dims: Mapping[str, int],
    capacities: Mapping[str, int],
    k: int = 64,
    hidden: Sequence[int] = (64, 64),
    rng=None,
) -> dict[str, EncoderParams]:
    rng = np.random.default_rng(rng)
    out: dict[str, EncoderParams] = {}
    for name, d in class_dims.items():
        if kind == "attention":
            out[name] = AttentionEncoderParams.init(d, k, hidden, rng, name=f"enc.{name}")
        elif kind == "deepsets":
            out[name] = DeepSetsParams.init(d, k, hidden, rng=rng, name=f"enc.{name}")
        elif kind == "ordered":
            out[name] = OrderedParams(d, capacities[name])
        else:
            raise ConfigurationError(f"unknown encoder type {kind!r}")
    return out
