"""Scavenger and convoy environments.

Both worlds are square arenas ``[-half_width, half_width]^2`` with a single
controllable agent whose action is a 2-D velocity command, clipped to the
agent's speed cap.  Observations group the non-ego objects by class (food,
poison, convoy member, attacker) as relative positions, with the agent's
absolute position as the ego context.

The functional core (:func:`reset`, :func:`scavenger_step`,
:func:`convoy_step`, :func:`observe`) mutates state records in place;
:class:`Env` wraps it for rollout collection.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Union

import numpy as np

from .encoder import ConfigurationError, ObjectBatch, ObjectSet


class ProtocolError(RuntimeError):
    pass


SCAVENGER_CAUSES = ("food", "poison", "timeout")
CONVOY_CAUSES = ("arrived", "destroyed", "mixed", "timeout")


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class ScavengerConfig:
    num_food: int = 1
    include_poison: bool = False
    half_width: float = 1.0
    reach_radius: float = 0.06
    step_limit: int = 100
    speed_cap: float = 0.1
    food_reward: float = 1.0
    poison_reward: float = -1.0
    step_reward: float = -0.05

    def validate(self) -> "ScavengerConfig":
        if self.num_food < 1:
            raise ConfigurationError(f"num_food must be >= 1, got {self.num_food}")
        if not 0 < self.reach_radius < self.half_width:
            raise ConfigurationError(
                f"need 0 < reach_radius < half_width, got {self.reach_radius}, {self.half_width}"
            )
        if self.step_limit < 1:
            raise ConfigurationError(f"step_limit must be >= 1, got {self.step_limit}")
        if self.speed_cap <= 0:
            raise ConfigurationError(f"speed_cap must be positive, got {self.speed_cap}")
        return self


@dataclass(frozen=True)
class ConvoyConfig:
    convoy_size: int = 3
    path: tuple[tuple[float, float], ...] = ((-1.0, 0.0), (1.0, 0.0))
    half_width: float = 1.0
    convoy_speed: float = 0.01
    attacker_speed: float = 0.02
    defender_speed: float = 0.04
    spawn_prob: float = 0.05
    block_radius: float = 0.08
    attack_radius: float = 0.05
    step_limit: int = 400
    max_attackers: int = 8
    member_spacing: float = 0.1
    block_reward: float = 0.1
    loss_penalty: float = -1.0
    arrival_reward: float = 1.0
    survival_bonus: float = 0.01

    def validate(self) -> "ConvoyConfig":
        if self.convoy_size < 1:
            raise ConfigurationError(f"convoy_size must be >= 1, got {self.convoy_size}")
        if len(self.path) < 2:
            raise ConfigurationError("convoy path needs at least two waypoints")
        if not self.defender_speed > self.attacker_speed > self.convoy_speed > 0:
            raise ConfigurationError(
                "speeds must satisfy defender > attacker > convoy > 0, got "
                f"{self.defender_speed}, {self.attacker_speed}, {self.convoy_speed}"
            )
        if self.block_radius <= 0 or self.attack_radius <= 0:
            raise ConfigurationError("block_radius and attack_radius must be positive")
        if not 0.0 <= self.spawn_prob <= 1.0:
            raise ConfigurationError(f"spawn_prob must lie in [0, 1], got {self.spawn_prob}")
        if self.step_limit < 1 or self.max_attackers < 1:
            raise ConfigurationError("step_limit and max_attackers must be >= 1")
        return self


Config = Union[ScavengerConfig, ConvoyConfig]

ENV_NAMES = ("scavenger1", "scavenger2", "convoy")


def make_config(name: str, **overrides: Any) -> Config:
    """Default config for ``scavenger1``, ``scavenger2`` or ``convoy`` with overrides."""
    if name == "scavenger1":
        cfg: Config = ScavengerConfig(include_poison=False)
    elif name == "scavenger2":
        cfg = ScavengerConfig(include_poison=True)
    elif name == "convoy":
        cfg = ConvoyConfig()
    else:
        raise ConfigurationError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    known = {f.name for f in fields(cfg)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigurationError(f"unknown {name} setting(s): {', '.join(sorted(unknown))}")
    return replace(cfg, **overrides).validate()


# ---------------------------------------------------------------- states


@dataclass
class ScavengerState:
    config: ScavengerConfig
    agent: np.ndarray
    food: np.ndarray  # (m, 2)
    poison: np.ndarray  # (m, 2) or (0, 2)
    rng: np.random.Generator
    elapsed: int = 0
    done: bool = False


@dataclass
class ConvoyState:
    config: ConvoyConfig
    defender: np.ndarray
    progress: np.ndarray  # arc length of each member along the path
    alive: np.ndarray
    arrived: np.ndarray
    attackers: np.ndarray  # (n, 2)
    attacker_ids: np.ndarray  # (n,)
    rng: np.random.Generator
    elapsed: int = 0
    done: bool = False
    next_attacker_id: int = 0
    blocked_ids: list[int] = field(default_factory=list)

    @property
    def members(self) -> np.ndarray:
        return _path_points(self.config.path, self.progress)

    @property
    def in_transit(self) -> np.ndarray:
        return self.alive & ~self.arrived


State = Union[ScavengerState, ConvoyState]


@dataclass
class Observation:
    """Padded per-class object arrays plus the ego vector.

    ``values[c]`` is ``(capacity_c, d_c)`` and ``masks[c]`` marks real rows.
    """

    values: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    ego: np.ndarray

    @property
    def objects(self) -> ObjectSet:
        return ObjectSet({c: v[self.masks[c]] for c, v in self.values.items()}, self.ego)

    @property
    def flat(self) -> np.ndarray:
        parts = []
        for c, v in self.values.items():
            slots = np.zeros_like(v)
            real = v[self.masks[c]]
            slots[: len(real)] = real
            parts.append(slots.reshape(-1))
        parts.append(self.ego)
        return np.concatenate(parts)

    def as_batch(self) -> ObjectBatch:
        return ObjectBatch(
            {c: v[None] for c, v in self.values.items()},
            {c: m[None] for c, m in self.masks.items()},
            self.ego[None],
        )


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict[str, Any]


# ---------------------------------------------------------------- helpers


def _clip_norm(v: np.ndarray, cap: float) -> np.ndarray:
    n = math.hypot(v[0], v[1])
    return v * (cap / n) if n > cap else v


@functools.lru_cache(maxsize=32)
def _path_lengths(path) -> tuple[np.ndarray, np.ndarray]:
    # cached per (hashable) path tuple; callers must not mutate the arrays
    pts = np.asarray(path, dtype=np.float64)
    seg = np.hypot(*(pts[1:] - pts[:-1]).T)
    return pts, np.concatenate([[0.0], np.cumsum(seg)])


def _path_points(path, arc: np.ndarray) -> np.ndarray:
    pts, cum = _path_lengths(path)
    arc = np.clip(arc, 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(pts) - 2)
    seg_len = cum[idx + 1] - cum[idx]
    t = np.where(seg_len > 0, (arc - cum[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    return pts[idx] + t[:, None] * (pts[idx + 1] - pts[idx])


def path_length(path) -> float:
    return float(_path_lengths(path)[1][-1])


def _perimeter_point(rng: np.random.Generator, hw: float) -> np.ndarray:
    side = rng.integers(4)
    u = rng.uniform(-hw, hw)
    return np.array([(u, -hw), (hw, u), (u, hw), (-hw, u)][side], dtype=np.float64)


# ---------------------------------------------------------------- reset


def reset(config: Config, seed: int | None) -> tuple[State, Observation]:
    config.validate()
    rng = np.random.default_rng(seed)
    if isinstance(config, ScavengerConfig):
        state: State = _reset_scavenger(config, rng)
    elif isinstance(config, ConvoyConfig):
        state = _reset_convoy(config, rng)
    else:
        raise ConfigurationError(f"unsupported config {type(config).__name__}")
    return state, observe(state)


def _reset_scavenger(cfg: ScavengerConfig, rng: np.random.Generator) -> ScavengerState:
    hw, r = cfg.half_width, cfg.reach_radius
    agent = np.zeros(2)
    food = np.empty((cfg.num_food, 2))
    for i in range(cfg.num_food):
        while True:
            p = rng.uniform(-hw, hw, 2)
            if math.hypot(*(p - agent)) > r:
                break
        food[i] = p
    poison = np.empty((cfg.num_food if cfg.include_poison else 0, 2))
    for i in range(len(poison)):
        while True:
            p = rng.uniform(-hw, hw, 2)
            if math.hypot(*(p - agent)) > r and np.hypot(*(food - p).T).min() > 2 * r:
                break
        poison[i] = p
    return ScavengerState(cfg, agent, food, poison, rng)


def _reset_convoy(cfg: ConvoyConfig, rng: np.random.Generator) -> ConvoyState:
    n = cfg.convoy_size
    progress = (n - 1 - np.arange(n)) * cfg.member_spacing
    return ConvoyState(
        config=cfg,
        defender=np.zeros(2),
        progress=progress.astype(np.float64),
        alive=np.ones(n, dtype=bool),
        arrived=np.zeros(n, dtype=bool),
        attackers=np.zeros((0, 2)),
        attacker_ids=np.zeros(0, dtype=np.int64),
        rng=rng,
    )


# ---------------------------------------------------------------- observe


def observe(state: State) -> Observation:
    if isinstance(state, ScavengerState):
        values = {"food": state.food - state.agent}
        masks = {"food": np.ones(len(state.food), dtype=bool)}
        if state.config.include_poison:
            values["poison"] = state.poison - state.agent
            masks["poison"] = np.ones(len(state.poison), dtype=bool)
        return Observation(values, masks, state.agent.copy())

    cfg = state.config
    members = np.zeros((cfg.convoy_size, 3))
    members[:, :2] = state.members - state.defender
    members[:, 2] = state.arrived
    attackers = np.zeros((cfg.max_attackers, 2))
    n = len(state.attackers)
    attackers[:n] = state.attackers - state.defender
    attacker_mask = np.zeros(cfg.max_attackers, dtype=bool)
    attacker_mask[:n] = True
    return Observation(
        {"convoy": members, "attacker": attackers},
        {"convoy": state.alive.copy(), "attacker": attacker_mask},
        state.defender.copy(),
    )


def class_layout(config: Config) -> tuple[dict[str, int], dict[str, int], int]:
    """``(class dims, class capacities, ego dim)`` of the observations."""
    if isinstance(config, ScavengerConfig):
        dims = {"food": 2}
        caps = {"food": config.num_food}
        if config.include_poison:
            dims["poison"] = 2
            caps["poison"] = config.num_food
        return dims, caps, 2
    return (
        {"convoy": 3, "attacker": 2},
        {"convoy": config.convoy_size, "attacker": config.max_attackers},
        2,
    )


# ---------------------------------------------------------------- dynamics


def _check_action(state: State, action) -> np.ndarray:
    if state.done:
        raise ProtocolError("step() called on a finished episode; call reset() first")
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be a finite 2-vector, got {action!r}")
    return a


def scavenger_step(state: ScavengerState, action) -> StepResult:
    cfg = state.config
    a = _clip_norm(_check_action(state, action), cfg.speed_cap)
    state.agent = np.clip(state.agent + a, -cfg.half_width, cfg.half_width)
    state.elapsed += 1

    cause = None
    if np.hypot(*(state.food - state.agent).T).min() <= cfg.reach_radius:
        reward, cause = cfg.food_reward, "food"
    elif len(state.poison) and np.hypot(*(state.poison - state.agent).T).min() <= cfg.reach_radius:
        reward, cause = cfg.poison_reward, "poison"
    else:
        reward = cfg.step_reward
        if state.elapsed >= cfg.step_limit:
            cause = "timeout"
    state.done = cause is not None
    info = {"elapsed": state.elapsed}
    if cause:
        info["cause"] = cause
    return StepResult(observe(state), reward, state.done, info)


def convoy_step(state: ConvoyState, action) -> StepResult:
    cfg = state.config
    a = _clip_norm(_check_action(state, action), cfg.defender_speed)
    hw = cfg.half_width
    state.defender = np.clip(state.defender + a, -hw, hw)
    reward = 0.0
    info: dict[str, Any] = {"blocked": 0, "lost": 0, "arrived": 0}

    # convoy advances
    moving = state.in_transit
    state.progress = np.where(moving, state.progress + cfg.convoy_speed, state.progress)
    newly_arrived = moving & (state.progress >= path_length(cfg.path))
    state.arrived |= newly_arrived
    info["arrived"] = int(newly_arrived.sum())
    reward += cfg.arrival_reward * info["arrived"]

    # attackers chase the nearest member still in transit
    targets_mask = state.in_transit
    if len(state.attackers) and targets_mask.any():
        targets = state.members[targets_mask]
        diff = targets[None, :, :] - state.attackers[:, None, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        nearest = dist.argmin(axis=1)
        d = dist[np.arange(len(dist)), nearest]
        heading = diff[np.arange(len(dist)), nearest]
        step = np.minimum(cfg.attacker_speed, d) / np.where(d > 0, d, 1.0)
        state.attackers = state.attackers + heading * step[:, None]

    # blocking happens before attacks land
    if len(state.attackers):
        blocked = np.hypot(*(state.attackers - state.defender).T) <= cfg.block_radius
        if blocked.any():
            state.blocked_ids.extend(int(i) for i in state.attacker_ids[blocked])
            state.attackers = state.attackers[~blocked]
            state.attacker_ids = state.attacker_ids[~blocked]
            info["blocked"] = int(blocked.sum())
            reward += cfg.block_reward * info["blocked"]

    if len(state.attackers) and state.in_transit.any():
        members = state.members
        spent = np.zeros(len(state.attackers), dtype=bool)
        for j in np.flatnonzero(state.in_transit):
            d = np.hypot(*(state.attackers - members[j]).T)
            d[spent] = np.inf
            hit = int(d.argmin())
            if d[hit] <= cfg.attack_radius:
                state.alive[j] = False
                spent[hit] = True
                info["lost"] += 1
        state.attackers = state.attackers[~spent]
        state.attacker_ids = state.attacker_ids[~spent]
        reward += cfg.loss_penalty * info["lost"]

    if state.rng.random() < cfg.spawn_prob and len(state.attackers) < cfg.max_attackers:
        state.attackers = np.vstack([state.attackers, _perimeter_point(state.rng, hw)])
        state.attacker_ids = np.append(state.attacker_ids, state.next_attacker_id)
        state.next_attacker_id += 1

    if state.in_transit.any():
        reward += cfg.survival_bonus
    state.elapsed += 1

    cause = None
    if not state.in_transit.any():
        if state.arrived.all():
            cause = "arrived"
        elif not state.arrived.any():
            cause = "destroyed"
        else:
            cause = "mixed"
    elif state.elapsed >= cfg.step_limit:
        cause = "timeout"
    state.done = cause is not None
    info["elapsed"] = state.elapsed
    if cause:
        info["cause"] = cause
    return StepResult(observe(state), reward, state.done, info)


def step(state: State, action) -> StepResult:
    if isinstance(state, ScavengerState):
        return scavenger_step(state, action)
    return convoy_step(state, action)


class Env:
    """Stateful wrapper used by rollout workers."""

    def __init__(self, config: Config):
        self.config = config.validate()
        self.class_dims, self.capacities, self.ego_dim = class_layout(config)
        self.action_dim = 2
        self.state: State | None = None

    def reset(self, seed: int | None = None) -> Observation:
        self.state, obs = reset(self.config, seed)
        return obs

    def step(self, action) -> StepResult:
        if self.state is None:
            raise ProtocolError("step() before reset()")
        return step(self.state, action)

    @property
    def flat_dim(self) -> int:
        return sum(self.class_dims[c] * self.capacities[c] for c in self.class_dims) + self.ego_dim
