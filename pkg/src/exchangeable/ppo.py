"""Clipped-surrogate PPO over any set encoder and environment.

Rollout workers are independent environment copies stepped in lockstep so a
single batched forward pass serves all of them; each worker owns its own
random stream seeded ``seed + worker_index``.
"""
from __future__ import annotations

import copy
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .analysis import MetricRecord
from .diffcore import AdamState, Tape, Tensor
from .encoder import MLP, EncoderParams, ObjectBatch, ObjectSet, build_encoders, encode_multiclass_batch
from .envs import Env, Observation, ProtocolError

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DiagnosticsError(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    """Iteration hit a non-finite loss; the policy was rolled back to ``last_good``."""

    def __init__(self, message: str, last_good: dict[str, np.ndarray]):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class PPOHyperparams:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    rollout_steps: int = 2048
    update_epochs: int = 10
    minibatch_size: int = 256
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    iters: int = 500
    max_grad_norm: float = 0.5
    target_kl: float = 0.02
    init_log_std: float = 0.0
    trunk_hidden: tuple[int, ...] = (64, 64)

    def validate(self) -> "PPOHyperparams":
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.clip_eps <= 0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        for name in ("rollout_steps", "update_epochs", "minibatch_size", "iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        return self


# ---------------------------------------------------------------- policy


class Policy:
    """Set encoder -> shared tanh trunk -> Gaussian mean head and value head.

    The log standard deviation is a state-independent parameter, clamped to
    ``[-5, 2]`` when used.
    """

    def __init__(
        self,
        encoders: dict[str, EncoderParams],
        ego_dim: int,
        action_dim: int = 2,
        trunk_hidden: Sequence[int] = (64, 64),
        init_log_std: float = 0.0,
        rng=None,
    ):
        rng = np.random.default_rng(rng)
        self.encoders = encoders
        self.ego_dim = ego_dim
        self.action_dim = action_dim
        self.feature_dim = sum(e.out_dim for e in encoders.values()) + ego_dim
        self.trunk = MLP([self.feature_dim, *trunk_hidden], rng, name="trunk")
        width = trunk_hidden[-1]
        self.mean_head = MLP([width, action_dim], rng, out_scale=0.01, name="mean_head")
        self.value_head = MLP([width, 1], rng, name="value_head")
        self.log_std = Tensor(np.full(action_dim, float(init_log_std)), True, "log_std")

    @classmethod
    def for_env(cls, env: Env, encoder: str = "attention", k: int = 64, hidden=(64, 64), trunk_hidden=(64, 64), init_log_std=0.0, seed=None) -> "Policy":
        rng = np.random.default_rng(seed)
        encoders = build_encoders(encoder, env.class_dims, env.capacities, k, hidden, rng)
        return cls(encoders, env.ego_dim, env.action_dim, trunk_hidden, init_log_std, rng)

    def parameters(self) -> list[Tensor]:
        params = []
        for enc in self.encoders.values():
            params += enc.parameters()
        return (
            params
            + self.trunk.parameters()
            + self.mean_head.parameters()
            + self.value_head.parameters()
            + [self.log_std]
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"checkpoint block {name}: shape {state[name].shape}, expected {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def forward(self, obs: ObjectBatch) -> tuple[Tensor, Tensor, Tensor]:
        """``(mean (B, A), clamped log_std (A,), value (B,))``."""
        feats = encode_multiclass_batch(self.encoders, obs)
        h = dc.tanh_activation(self.trunk(feats))
        mean = self.mean_head(h)
        value = dc.reshape(self.value_head(h), (len(obs),))
        return mean, dc.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX), value

    def act(self, obs: ObjectBatch, rng: np.random.Generator | None = None, deterministic: bool = False):
        """Sample (or take the mean) action; returns ``(actions, log_probs, values)`` arrays."""
        mean, log_std, value = self.forward(obs)
        mu, ls = mean.data, log_std.data
        if deterministic or rng is None:
            actions = mu.copy()
        else:
            actions = mu + np.exp(ls) * rng.standard_normal(mu.shape)
        return actions, gaussian_log_prob(actions, mu, ls), value.data


def gaussian_log_prob(actions, mean, log_std) -> np.ndarray:
    z = (actions - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - _HALF_LOG_2PI).sum(axis=-1)


class GreedyPursuitPolicy:
    """Scripted oracle: head straight for the nearest object of ``target_class``."""

    def __init__(self, target_class: str = "food", speed: float = 1.0):
        self.target_class = target_class
        self.speed = speed

    def act(self, obs: ObjectBatch, rng=None, deterministic: bool = True):
        rel = obs.values[self.target_class]
        dist = np.hypot(rel[..., 0], rel[..., 1])
        dist = np.where(obs.masks[self.target_class], dist, np.inf)
        nearest = dist.argmin(axis=1)
        heading = rel[np.arange(len(rel)), nearest]
        norm = np.maximum(np.hypot(heading[:, 0], heading[:, 1]), 1e-12)
        actions = heading / norm[:, None] * np.minimum(self.speed, norm)[:, None]
        zeros = np.zeros(len(rel))
        return actions, zeros, zeros


# ---------------------------------------------------------------- rollouts


class Transition(NamedTuple):
    observation: ObjectSet
    action: np.ndarray
    reward: float
    done: bool
    log_prob: float
    value: float


@dataclass
class RolloutBatch:
    """Transitions laid out worker-major, so each worker's episodes are contiguous."""

    obs: ObjectBatch
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    last_values: np.ndarray  # bootstrap value per worker
    workers: int
    steps: int
    episode_returns: list[float] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)
    episode_causes: list[str] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def transition(self, i: int) -> "Transition":
        return Transition(
            self.obs.object_set(i),
            self.actions[i],
            float(self.rewards[i]),
            bool(self.dones[i]),
            float(self.log_probs[i]),
            float(self.values[i]),
        )


def collect_rollouts(
    policy,
    env_factory: Callable[[], Env],
    steps: int,
    workers: int = 1,
    seed: int = 0,
) -> RolloutBatch:
    """Gather exactly ``steps`` transitions from each of ``workers`` environments."""
    if steps < 1 or workers < 1:
        raise ValueError("steps and workers must be >= 1")
    envs = [env_factory() for _ in range(workers)]
    rngs = [np.random.default_rng(seed + w) for w in range(workers)]
    obs: list[Observation] = [env.reset(int(rng.integers(2**31))) for env, rng in zip(envs, rngs)]
    running = np.zeros(workers)
    lengths = np.zeros(workers, dtype=np.int64)

    first = obs[0]
    obs_values = {c: np.zeros((workers, steps, *v.shape)) for c, v in first.values.items()}
    obs_masks = {c: np.zeros((workers, steps, *m.shape), dtype=bool) for c, m in first.masks.items()}
    obs_ego = np.zeros((workers, steps, first.ego.shape[0]))
    actions = np.zeros((workers, steps, 2))
    rewards = np.zeros((workers, steps))
    dones = np.zeros((workers, steps), dtype=bool)
    log_probs = np.zeros((workers, steps))
    values = np.zeros((workers, steps))
    ep_returns, ep_lengths, ep_causes = [], [], []

    for t in range(steps):
        for w, o in enumerate(obs):
            for c in obs_values:
                obs_values[c][w, t] = o.values[c]
                obs_masks[c][w, t] = o.masks[c]
            obs_ego[w, t] = o.ego
        batch = ObjectBatch(
            {c: v[:, t] for c, v in obs_values.items()},
            {c: m[:, t] for c, m in obs_masks.items()},
            obs_ego[:, t],
        )
        mu, _, val = policy.act(batch, None, deterministic=True)
        log_std = _policy_log_std(policy)
        # each worker draws from its own stream, so worker w's data does not depend on the worker count
        act = mu + np.exp(log_std) * np.stack([rng.standard_normal(mu.shape[1]) for rng in rngs])
        lp = gaussian_log_prob(act, mu, log_std)
        for w, env in enumerate(envs):
            try:
                res = env.step(act[w])
            except ProtocolError as exc:
                raise ProtocolError(f"worker {w}: {exc}") from exc
            rewards[w, t] = res.reward
            dones[w, t] = res.done
            running[w] += res.reward
            lengths[w] += 1
            if res.done:
                ep_returns.append(float(running[w]))
                ep_lengths.append(int(lengths[w]))
                ep_causes.append(res.info.get("cause", ""))
                running[w] = 0.0
                lengths[w] = 0
                obs[w] = env.reset(int(rngs[w].integers(2**31)))
            else:
                obs[w] = res.observation
        actions[:, t] = act
        log_probs[:, t] = lp
        values[:, t] = val

    final = ObjectBatch.stack([o.as_batch() for o in obs])
    _, _, last_values = policy.act(final, None, deterministic=True)
    flat_obs = ObjectBatch(
        {c: v.reshape(workers * steps, *v.shape[2:]) for c, v in obs_values.items()},
        {c: m.reshape(workers * steps, *m.shape[2:]) for c, m in obs_masks.items()},
        obs_ego.reshape(workers * steps, -1),
    )
    return RolloutBatch(
        flat_obs,
        actions.reshape(-1, 2),
        rewards.reshape(-1),
        dones.reshape(-1),
        log_probs.reshape(-1),
        values.reshape(-1),
        np.asarray(last_values, dtype=np.float64),
        workers,
        steps,
        ep_returns,
        ep_lengths,
        ep_causes,
    )


def _policy_log_std(policy) -> np.ndarray:
    return np.clip(policy.log_std.data, LOG_STD_MIN, LOG_STD_MAX)


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Generalised advantage estimates and returns for one contiguous trajectory.

    ``last_value`` bootstraps the step after the final transition when that
    transition is not terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not len(rewards) == len(values) == len(dones):
        raise dc.ContractError(
            f"compute_gae: lengths differ (rewards {len(rewards)}, values {len(values)}, dones {len(dones)})"
        )
    adv = np.zeros_like(rewards)
    next_adv = 0.0
    next_value = last_value
    for t in range(len(rewards) - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def finish_batch(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """Fill in per-worker GAE advantages and returns."""
    adv = np.zeros(len(batch))
    ret = np.zeros(len(batch))
    for w in range(batch.workers):
        sl = slice(w * batch.steps, (w + 1) * batch.steps)
        adv[sl], ret[sl] = compute_gae(
            batch.rewards[sl], batch.values[sl], batch.dones[sl], gamma, lam, batch.last_values[w]
        )
    batch.advantages, batch.returns = adv, ret
    return batch


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = adv - adv.mean()
    var = adv.var()
    return adv / math.sqrt(var) if var >= 1e-8 else adv


# ---------------------------------------------------------------- loss


@dataclass
class LossStats:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


def ppo_loss(
    obs: ObjectBatch,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    policy: Policy,
    clip_eps: float = 0.2,
    vf_coef: float = 0.5,
    ent_coef: float = 0.01,
) -> tuple[Tensor, LossStats]:
    """Clipped surrogate + value MSE - entropy bonus, as a scalar tensor."""
    mean, log_std, value = policy.forward(obs)
    z = dc.div(dc.sub(actions, mean), dc.exp(log_std))
    log_prob = dc.reduce_sum(
        dc.sub(dc.mul(dc.square(z), -0.5), dc.add(log_std, _HALF_LOG_2PI)), axis=-1
    )
    ratio = dc.exp(dc.sub(log_prob, old_log_probs))
    if not np.all(np.isfinite(ratio.data)):
        bad = int(np.flatnonzero(~np.isfinite(ratio.data))[0])
        raise DiagnosticsError(
            f"non-finite likelihood ratio at transition {bad}: "
            f"log_prob={log_prob.data[bad]!r}, behaviour={old_log_probs[bad]!r}"
        )
    surr = dc.minimum(dc.mul(ratio, advantages), dc.mul(dc.clip(ratio, 1 - clip_eps, 1 + clip_eps), advantages))
    policy_loss = dc.mul(dc.mean(surr), -1.0)
    value_loss = dc.mean(dc.square(dc.sub(value, returns)))
    entropy = dc.reduce_sum(dc.add(log_std, 0.5 + _HALF_LOG_2PI))
    loss = dc.sub(dc.add(policy_loss, dc.mul(value_loss, vf_coef)), dc.mul(entropy, ent_coef))

    r = ratio.data
    stats = LossStats(
        float(policy_loss.data),
        float(value_loss.data),
        float(entropy.data),
        float(np.mean((r - 1.0) - np.log(r))),
        float(np.mean(np.abs(r - 1.0) > clip_eps)),
    )
    return loss, stats


# ---------------------------------------------------------------- training


def train_iteration(
    policy: Policy,
    batch: RolloutBatch,
    hyper: PPOHyperparams,
    optimizer: AdamState,
    rng: np.random.Generator,
    *,
    run_id: str = "",
    seed: int = 0,
    iteration: int = 0,
    env_steps: int = 0,
    started: float | None = None,
) -> MetricRecord:
    """Shuffled minibatch Adam passes over ``batch`` (advantages already filled in)."""
    if len(batch) == 0:
        raise ValueError("empty rollout batch")
    if batch.advantages is None:
        finish_batch(batch, hyper.gamma, hyper.lam)
    adv = normalize_advantages(batch.advantages)
    params = policy.parameters()
    last_good = policy.state_dict()
    n = len(batch)
    mb = min(hyper.minibatch_size, n)
    history: list[LossStats] = []
    optimizer.lr = hyper.lr

    stop = False
    for _ in range(hyper.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start : start + mb]
            dc.zero_grad(params)
            with Tape() as tape:
                loss, stats = ppo_loss(
                    batch.obs.take(idx),
                    batch.actions[idx],
                    batch.log_probs[idx],
                    adv[idx],
                    batch.returns[idx],
                    policy,
                    hyper.clip_eps,
                    hyper.vf_coef,
                    hyper.ent_coef,
                )
            if not np.isfinite(loss.data):
                policy.load_state_dict(last_good)
                raise TrainingAborted(f"non-finite loss at iteration {iteration}", last_good)
            dc.backward(loss, tape)
            grads, _ = dc.clip_grad_norm(dc.grads_of(params), hyper.max_grad_norm)
            try:
                dc.adam_step(params, grads, optimizer)
            except dc.NonFiniteGradientError as exc:
                policy.load_state_dict(last_good)
                raise TrainingAborted(str(exc), last_good) from exc
            history.append(stats)
            if stats.approx_kl > hyper.target_kl:
                stop = True
                break
        if stop:
            break
    dc.zero_grad(params)

    rets = np.asarray(batch.episode_returns)
    return MetricRecord(
        run_id=run_id,
        seed=seed,
        iteration=iteration,
        env_steps=env_steps,
        mean_return=float(rets.mean()) if rets.size else float("nan"),
        std_return=float(rets.std()) if rets.size else float("nan"),
        mean_length=float(np.mean(batch.episode_lengths)) if batch.episode_lengths else float("nan"),
        policy_loss=float(np.mean([s.policy_loss for s in history])),
        value_loss=float(np.mean([s.value_loss for s in history])),
        entropy=float(np.mean([s.entropy for s in history])),
        approx_kl=float(np.mean([s.approx_kl for s in history])),
        clip_fraction=float(np.mean([s.clip_fraction for s in history])),
        wall_seconds=0.0 if started is None else time.perf_counter() - started,
    )


class Trainer:
    """Rollout/update loop shared by the CLI, tests and demo scripts."""

    def __init__(
        self,
        policy: Policy,
        env_factory: Callable[[], Env],
        hyper: PPOHyperparams | None = None,
        seed: int = 0,
        workers: int = 1,
        run_id: str = "run",
        timing: bool = True,
    ):
        self.policy = policy
        self.env_factory = env_factory
        self.hyper = (hyper or PPOHyperparams()).validate()
        self.seed = seed
        self.workers = workers
        self.run_id = run_id
        self.timing = timing
        self.optimizer = AdamState.for_params(policy.parameters(), lr=self.hyper.lr)
        self.rng = np.random.default_rng([seed, 1])
        self.iteration = 0
        self.env_steps = 0
        self._started = time.perf_counter()

    def step(self) -> MetricRecord:
        steps = max(1, self.hyper.rollout_steps // self.workers)
        # distinct, reproducible worker seeds per iteration
        base = self.seed * 1_000_003 + self.iteration * self.workers
        batch = collect_rollouts(self.policy, self.env_factory, steps, self.workers, base)
        finish_batch(batch, self.hyper.gamma, self.hyper.lam)
        self.iteration += 1
        self.env_steps += len(batch)
        return train_iteration(
            self.policy,
            batch,
            self.hyper,
            self.optimizer,
            self.rng,
            run_id=self.run_id,
            seed=self.seed,
            iteration=self.iteration,
            env_steps=self.env_steps,
            started=self._started if self.timing else None,
        )

    def train(self, iters: int | None = None, callback=None) -> list[MetricRecord]:
        records = []
        for _ in range(self.hyper.iters if iters is None else iters):
            rec = self.step()
            records.append(rec)
            if callback is not None:
                callback(self, rec)
        return records


# ---------------------------------------------------------------- evaluation


class EvalResult(NamedTuple):
    mean_return: float
    std_return: float
    mean_length: float
    causes: Counter


def evaluate_policy(
    policy,
    env_factory: Callable[[], Env],
    episodes: int,
    seed: int = 0,
    deterministic: bool = True,
) -> EvalResult:
    """Run ``episodes`` complete episodes (stepped side by side) and summarise them."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    reset_seeds = rng.integers(2**31, size=episodes)
    envs = [env_factory() for _ in range(episodes)]
    obs = [env.reset(int(s)) for env, s in zip(envs, reset_seeds)]
    active = list(range(episodes))
    totals = np.zeros(episodes)
    lengths = np.zeros(episodes, dtype=np.int64)
    causes: Counter = Counter()
    while active:
        batch = ObjectBatch.stack([obs[i].as_batch() for i in active])
        actions, _, _ = policy.act(batch, rng, deterministic=deterministic)
        still = []
        for a, i in zip(actions, active):
            res = envs[i].step(a)
            totals[i] += res.reward
            lengths[i] += 1
            if res.done:
                causes[res.info.get("cause", "")] += 1
            else:
                obs[i] = res.observation
                still.append(i)
        active = still
    return EvalResult(float(totals.mean()), float(totals.std()), float(lengths.mean()), causes)


def snapshot(policy: Policy) -> Policy:
    """Independent read-only copy for concurrent evaluation."""
    return copy.deepcopy(policy)
