"""Property suite behind ``exchangeable verify``.

Each check returns a :class:`PropertyResult`; :func:`run_suite` runs them all.
``fault="skip-softmax"`` swaps in an encoder that pools raw filter scores
instead of softmax weights, which is still order-free but no longer matches the
sum-decomposition, so only that property should fail.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .analysis import reduction_factor, space_sizes
from .encoder import (
    AttentionEncoderParams,
    DeepSetsParams,
    ObjectSet,
    attention_as_sum_form,
    encode_attention,
    encode_deepsets,
    encode_multiclass,
    encode_ordered,
)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    worst: float
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:<28} worst={self.worst:.3e}  {self.detail}  ({self.seconds:.2f}s)"


def _encode_correct(params: AttentionEncoderParams, objects: np.ndarray) -> np.ndarray:
    return encode_attention(params, objects)[0].data


def _encode_skip_softmax(params: AttentionEncoderParams, objects: np.ndarray) -> np.ndarray:
    y = params.filter_net(objects).data  # (m, 1), used without normalisation
    return (y * params.input_net(objects).data).sum(axis=0)


FAULTS: dict[str, Callable[[AttentionEncoderParams, np.ndarray], np.ndarray]] = {
    "none": _encode_correct,
    "skip-softmax": _encode_skip_softmax,
}


def random_draw(rng: np.random.Generator, m_range=(2, 6), d_choices=(2, 3), k=8, hidden=(16, 16)):
    m = int(rng.integers(m_range[0], m_range[1] + 1))
    d = int(rng.choice(d_choices))
    params = AttentionEncoderParams.init(d, k, hidden, rng)
    objects = rng.normal(0.0, 1.0, (m, d))
    return params, objects


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    return wrapper


@_timed
def check_attention_invariance(trials=1000, tol=1e-9, seed=0, encode=_encode_correct) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        params, objects = random_draw(rng)
        base = encode(params, objects)
        perm = encode(params, objects[rng.permutation(len(objects))])
        worst = max(worst, float(np.abs(base - perm).max()))
    return PropertyResult("attention permutation", worst <= tol, worst, f"{trials} draws, m in 2..6, tol {tol:g}")


@_timed
def check_sum_form(trials=1000, tol=1e-9, seed=0, encode=_encode_correct) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        params, objects = random_draw(rng)
        rng.permutation(len(objects))  # keep the draw stream aligned with the invariance check
        worst = max(worst, float(np.abs(encode(params, objects) - attention_as_sum_form(params, objects)).max()))
    return PropertyResult("sum decomposition", worst <= tol, worst, f"{trials} draws vs rho(sum phi)")


@_timed
def check_deepsets_invariance(trials=200, tol=1e-9, seed=0) -> PropertyResult:
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(2, 7))
        params = DeepSetsParams.init(2, 8, (16, 16), rng=rng)
        objects = rng.normal(size=(m, 2))
        a = encode_deepsets(params, objects).data
        b = encode_deepsets(params, objects[rng.permutation(m)]).data
        worst = max(worst, float(np.abs(a - b).max()))
    return PropertyResult("deep sets permutation", worst <= tol, worst, f"{trials} draws")


@_timed
def check_multiclass(trials=200, tol=1e-9, seed=0) -> PropertyResult:
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    sensitive = 0
    for _ in range(trials):
        enc = {
            "a": AttentionEncoderParams.init(2, 4, (8,), rng, name="a"),
            "b": AttentionEncoderParams.init(2, 4, (8,), rng, name="b"),
        }
        objs = ObjectSet(
            {"a": rng.normal(size=(int(rng.integers(2, 5)), 2)), "b": rng.normal(size=(int(rng.integers(2, 5)), 2))},
            rng.normal(size=2),
        )
        base = encode_multiclass(enc, objs, 2).data
        worst = max(worst, float(np.abs(base - encode_multiclass(enc, objs.permuted(rng), 2).data).max()))
        moved = ObjectSet(
            {"a": objs.classes["a"][1:], "b": np.vstack([objs.classes["b"], objs.classes["a"][:1]])}, objs.ego
        )
        sensitive += int(np.abs(base - encode_multiclass(enc, moved, 2).data).max() > 1e-6)
    ok = worst <= tol and sensitive == trials
    return PropertyResult(
        "multi-class composition", ok, worst, f"{trials} draws, class moves detected {sensitive}/{trials}"
    )


@_timed
def check_ordered_witness(trials=100, seed=0) -> PropertyResult:
    rng = np.random.default_rng(seed + 3)
    found = 0
    for _ in range(trials):
        m = int(rng.integers(2, 7))
        objects = rng.normal(size=(m, 2))
        a = encode_ordered(objects, 6)
        b = encode_ordered(objects[::-1], 6)
        found += int(np.abs(a - b).max() > 0)
    return PropertyResult("ordered non-invariance", found == trials, float(found), f"witness in {found}/{trials} draws")


@_timed
def check_gradients(instances=5, tol=1e-4, seed=0) -> PropertyResult:
    rng = np.random.default_rng(seed + 4)
    worst = 0.0
    for _ in range(instances):
        params, objects = random_draw(rng, k=4, hidden=(6,))
        readout = rng.normal(size=params.k)

        def loss():
            s_star, _ = encode_attention(params, objects)
            return dc.reduce_sum(dc.mul(s_star, readout))

        worst = max(worst, dc.finite_difference_check(loss, params.parameters(), h=1e-5))
    return PropertyResult("encoder gradients", worst <= tol, worst, f"{instances} instances, central differences h=1e-5")


@_timed
def check_space_sizes(n_max=30) -> PropertyResult:
    bad = []
    for n in range(1, n_max + 1):
        for m in range(1, n + 1):
            r = space_sizes(n, m)
            if r.ordered_size != r.invariant_size * math.factorial(m) or r.ratio != reduction_factor(m):
                bad.append((n, m))
    spot = space_sizes(5, 2)
    ok = not bad and (spot.ordered_size, spot.invariant_size, spot.ratio) == (20, 10, 2)
    return PropertyResult("exact space sizes", ok, float(len(bad)), f"all 1<=m<=n<={n_max}; n=5,m=2 -> 20,10,2")


def run_suite(trials=1000, tol=1e-9, seed=0, fault="none") -> list[PropertyResult]:
    encode = FAULTS[fault]
    return [
        check_attention_invariance(trials, tol, seed, encode),
        check_sum_form(trials, tol, seed, encode),
        check_deepsets_invariance(max(1, trials // 5), tol, seed),
        check_multiclass(max(1, trials // 5), tol, seed),
        check_ordered_witness(100, seed),
        check_gradients(5, 1e-4, seed),
        check_space_sizes(30),
    ]


def exhaustive_permutation_spread(encode_fn, objects: np.ndarray) -> float:
    """Max deviation of ``encode_fn`` over every ordering of ``objects`` (m! evaluations)."""
    outs = [np.asarray(encode_fn(objects[list(p)])) for p in itertools.permutations(range(len(objects)))]
    ref = outs[0]
    return max(float(np.abs(o - ref).max()) for o in outs)
