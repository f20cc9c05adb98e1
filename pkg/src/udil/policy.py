"""Linear-Gaussian learner policy, fixed-length rollouts and a CEM optimiser.

Actions are ``tanh(gain @ s + bias + eps)`` with ``eps ~ N(0, exp(log_std)^2)``.
Rollouts never terminate early: every episode has exactly ``horizon`` steps.

Reward functions passed to :func:`cem_update` are vectorised over
transitions: ``reward_fn(s, s_next)`` takes two arrays of shape ``(..., dim)``
and returns rewards of shape ``(...)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN = -10.0


@dataclass
class PolicyParams:
    gain: np.ndarray  # (action_dim, state_dim)
    bias: np.ndarray  # (action_dim,)
    log_std: np.ndarray  # (action_dim,)
    seed: int | None = None

    def __post_init__(self):
        self.gain = np.array(self.gain, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        self.log_std = np.array(self.log_std, dtype=np.float64).reshape(-1)
        a = self.gain.shape[0]
        if self.bias.shape != (a,) or self.log_std.shape != (a,):
            raise ValueError("bias and log_std need one entry per action dim")
        if not (np.isfinite(self.gain).all() and np.isfinite(self.bias).all()
                and np.isfinite(self.log_std).all()):
            raise ValueError("policy parameters must be finite")

    @classmethod
    def zeros(cls, state_dim, action_dim=1, log_std=0.0, seed=None) -> "PolicyParams":
        return cls(np.zeros((action_dim, state_dim)), np.zeros(action_dim),
                   np.full(action_dim, float(log_std)), seed)

    @property
    def state_dim(self):
        return self.gain.shape[1]

    @property
    def action_dim(self):
        return self.gain.shape[0]

    def flat(self) -> np.ndarray:
        """Mean parameters ``[gain.ravel(), bias]`` (log_std excluded)."""
        return np.concatenate([self.gain.ravel(), self.bias])

    def with_flat(self, theta, log_std=None) -> "PolicyParams":
        a, s = self.gain.shape
        theta = np.asarray(theta, dtype=np.float64)
        return PolicyParams(theta[: a * s].reshape(a, s), theta[a * s:],
                            self.log_std if log_std is None else log_std, self.seed)

    def deterministic(self) -> "PolicyParams":
        return PolicyParams(self.gain, self.bias, np.full(self.action_dim, LOG_STD_MIN), self.seed)

    def to_dict(self) -> dict:
        return {"gain": self.gain.tolist(), "bias": self.bias.tolist(),
                "log_std": self.log_std.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "PolicyParams":
        return cls(np.array(d["gain"]), np.array(d["bias"]), np.array(d["log_std"]), d.get("seed"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _std(log_std):
    # the clamp makes log_std = -10 (or lower) the deterministic mode
    log_std = np.asarray(log_std, dtype=np.float64)
    return np.where(log_std <= LOG_STD_MIN, 0.0, np.exp(log_std))


def policy_act(p: PolicyParams, s, rng) -> np.ndarray:
    """Sample actions for one state ``(state_dim,)`` or a batch ``(n, state_dim)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != p.state_dim:
        raise ValueError(f"policy expects state dim {p.state_dim}, got {s.shape[-1]}")
    mean = s @ p.gain.T + p.bias
    eps = rng.standard_normal(mean.shape) * _std(p.log_std)
    return np.tanh(mean + eps)


@dataclass
class Episode:
    states: np.ndarray  # (horizon + 1, state_dim)
    actions: np.ndarray  # (horizon, action_dim)
    rewards: np.ndarray  # (horizon,)


@dataclass
class RolloutBatch:
    states: np.ndarray  # (n, horizon + 1, state_dim)
    actions: np.ndarray  # (n, horizon, action_dim)
    rewards: np.ndarray  # (n, horizon)

    @property
    def horizon(self):
        return self.actions.shape[1]

    @property
    def episodes(self):
        return [Episode(s, a, r) for s, a, r in zip(self.states, self.actions, self.rewards)]

    def transitions(self) -> np.ndarray:
        """All one-step transitions, shape ``(n * horizon, 2, state_dim)``."""
        s = self.states
        return np.stack([s[:, :-1], s[:, 1:]], axis=2).reshape(-1, 2, s.shape[-1])

    def relabel(self, reward_fn) -> "RolloutBatch":
        r = np.asarray(reward_fn(self.states[:, :-1], self.states[:, 1:]), dtype=np.float64)
        if r.shape != self.rewards.shape:
            raise ValueError(f"reward_fn returned shape {r.shape}, expected {self.rewards.shape}")
        return RolloutBatch(self.states, self.actions, r)


def rollout_many(env, gains, biases, log_stds, horizon, rng, env_seed=None) -> RolloutBatch:
    """Roll out ``n`` policies side by side, one episode each.

    ``gains`` is ``(n, action_dim, state_dim)``; ``biases`` and ``log_stds`` are
    ``(n, action_dim)``.  The environment is reset with ``env_seed`` (drawn
    from ``rng`` if omitted).
    """
    gains = np.asarray(gains, dtype=np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    std = _std(log_stds)
    n, a_dim, s_dim = gains.shape
    if s_dim != env.state_dim or a_dim != env.action_dim:
        raise ValueError(f"policy dims ({a_dim}, {s_dim}) do not match env "
                         f"({env.action_dim}, {env.state_dim})")
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if env_seed is None:
        env_seed = int(rng.integers(2**63))
    states = np.empty((n, horizon + 1, s_dim))
    actions = np.empty((n, horizon, a_dim))
    obs = env.reset(n, seed=env_seed)
    states[:, 0] = obs
    for t in range(horizon):
        mean = np.einsum("nas,ns->na", gains, obs) + biases
        act = np.tanh(mean + rng.standard_normal(mean.shape) * std)
        obs = env.step(act)
        actions[:, t] = act
        states[:, t + 1] = obs
    return RolloutBatch(states, actions, np.zeros((n, horizon)))


def rollout_batch(env, p: PolicyParams, n_episodes, horizon, rng, env_seed=None) -> RolloutBatch:
    n = int(n_episodes)
    return rollout_many(env, np.broadcast_to(p.gain, (n, *p.gain.shape)),
                        np.broadcast_to(p.bias, (n, p.action_dim)),
                        np.broadcast_to(p.log_std, (n, p.action_dim)), horizon, rng, env_seed)


def rollout(env, p: PolicyParams, horizon, rng) -> Episode:
    """One fixed-length episode; rewards are left at zero for later relabelling."""
    return rollout_batch(env, p, 1, horizon, rng).episodes[0]


@dataclass(frozen=True)
class CemConfig:
    population: int = 64
    elite_frac: float = 0.125
    noise_std: float = 0.2
    episodes_per_candidate: int = 2
    horizon: int | None = None  # default: env.spec.horizon
    anneal: bool = True

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if not 0.0 < self.elite_frac <= 1.0:
            raise ValueError("elite_frac must lie in (0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.episodes_per_candidate < 1:
            raise ValueError("episodes_per_candidate must be >= 1")

    @property
    def n_elite(self):
        return max(1, math.ceil(self.elite_frac * self.population - 1e-9))


@dataclass
class CemInfo:
    scores: np.ndarray
    elite_idx: np.ndarray
    elite_mean_score: float
    population_mean_score: float
    batch: RolloutBatch = field(repr=False)


def cem_update(env, reward_fn, p: PolicyParams, cfg: CemConfig | None = None, rng=None,
               return_info=False):
    """One cross-entropy-method step around ``p``.

    Candidates perturb the mean parameters with N(0, noise_std^2) noise and
    are scored by mean total relabelled reward over their episodes.  All
    candidates share one environment seed per episode slot.  The elite mean
    becomes the new mean.  The action noise is annealed as
    ``log_std += log(elite spread / population spread)``.
    """
    cfg = cfg or CemConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    horizon = cfg.horizon or env.spec.horizon
    pop, eps = cfg.population, cfg.episodes_per_candidate

    theta = p.flat()
    noise = cfg.noise_std * rng.standard_normal((pop, theta.size))
    cand = theta + noise
    a, s = p.gain.shape
    gains = np.repeat(cand[:, : a * s].reshape(pop, a, s), eps, axis=0)
    biases = np.repeat(cand[:, a * s:], eps, axis=0)
    log_stds = np.broadcast_to(p.log_std, (pop * eps, a))
    # episode slot j of every candidate sees the same nuisance stream
    env_seed = int(rng.integers(2**62))
    batch = _rollout_common(env, gains, biases, log_stds, horizon, rng, env_seed, pop, eps)
    batch = batch.relabel(reward_fn)
    totals = batch.rewards.sum(axis=1).reshape(pop, eps)
    scores = np.array([math.fsum(row) / eps for row in totals])
    if not np.isfinite(scores).all():
        raise FloatingPointError("non-finite candidate score")

    order = np.lexsort((np.arange(pop), -scores))
    elite = np.sort(order[: cfg.n_elite])
    # averaging the offsets keeps theta bit-exact when all noise is zero
    new_theta = theta + noise[elite].mean(axis=0)
    log_std = p.log_std
    if cfg.anneal:
        log_std = p.log_std + _spread_log_ratio(noise, elite)
    log_std = np.maximum(log_std, LOG_STD_MIN)
    out = p.with_flat(new_theta, log_std)
    if return_info:
        info = CemInfo(scores, elite, math.fsum(scores[elite]) / len(elite),
                       math.fsum(scores) / pop, batch)
        return out, info
    return out


def _rollout_common(env, gains, biases, log_stds, horizon, rng, env_seed, pop, eps):
    if eps == 1:
        return rollout_many(env, gains, biases, log_stds, horizon, rng, env_seed)
    # reorder to slot-major so the same seed gives each candidate the same starts
    idx = np.arange(pop * eps).reshape(pop, eps).T.ravel()
    parts = [rollout_many(env, gains[idx[j * pop:(j + 1) * pop]], biases[idx[j * pop:(j + 1) * pop]],
                          log_stds[:pop], horizon, rng, env_seed + j)
             for j in range(eps)]
    states = np.stack([b.states for b in parts], axis=1).reshape(pop * eps, *parts[0].states.shape[1:])
    actions = np.stack([b.actions for b in parts], axis=1).reshape(pop * eps, *parts[0].actions.shape[1:])
    return RolloutBatch(states, actions, np.zeros((pop * eps, horizon)))


def _spread_log_ratio(noise, elite):
    if len(elite) < 2:
        return 0.0
    pop_spread = noise.std(axis=0).mean()
    elite_spread = noise[elite].std(axis=0).mean()
    if pop_spread == 0.0 or elite_spread == 0.0:
        return 0.0
    return math.log(elite_spread / pop_spread)
