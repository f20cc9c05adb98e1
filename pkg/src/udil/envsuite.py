"""Toy cross-domain environments, scripted experts and exact finite-MDP oracles.

The line environments are batch-vectorised: ``reset(n)`` returns an ``(n, dim)``
observation array and ``step(actions)`` advances all ``n`` episodes at once.
Internally every line env tracks the canonical state ``[x, v, n_1..n_k]``;
variants differ only in how that state is observed and in the action gain.

A wall at ``x = 0`` stops backward motion (``x`` never goes negative and the
velocity is zeroed on contact).  Without it the learner domains would be
mirror-symmetric and "forward" could not be identified from state-only
demonstrations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .trajstore import DemoSet

DT = 0.1
ACTION_GAIN = 0.5
NUISANCE_STEP = 1.0
DEFAULT_HORIZON = 100
DEFAULT_NUISANCE_DIMS = 3


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    horizon: int
    domain_name: str

    def __post_init__(self):
        if min(self.state_dim, self.action_dim, self.horizon) <= 0:
            raise ValueError("EnvSpec dims and horizon must be positive")


class Variant(str, enum.Enum):
    PERMUTED = "permuted"
    NEGATED_SCALED = "negated-scaled"
    EXTRA_NUISANCE = "extra-nuisance"


class LineEnv:
    """Point mass on a half-line with action-independent nuisance dimensions.

    Dynamics on the canonical state::

        x' = max(0, x + 0.1 v)
        v' = clip(v + gain * a, -1, 1)     (v' = max(v', 0) when x' hits the wall)
        n' = reflect(n + U(-1, 1))         (reflected into [-1, 1])

    The observation is ``(scale * x, v, n...)`` permuted by ``perm``.
    """

    def __init__(
        self,
        nuisance_dims=DEFAULT_NUISANCE_DIMS,
        seed=0,
        *,
        action_gain=ACTION_GAIN,
        progress_scale=1.0,
        perm=None,
        horizon=DEFAULT_HORIZON,
        name="expert-line",
    ):
        if nuisance_dims < 0:
            raise ValueError("nuisance_dims must be >= 0")
        self.nuisance_dims = int(nuisance_dims)
        self.action_gain = float(action_gain)
        self.progress_scale = float(progress_scale)
        dim = 2 + self.nuisance_dims
        self.perm = np.arange(dim) if perm is None else np.asarray(perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(dim)):
            raise ValueError(f"perm must be a permutation of range({dim})")
        self.inv_perm = np.argsort(self.perm)
        self.spec = EnvSpec(dim, 1, int(horizon), name)
        self.seed = int(seed)
        self._canon = None
        self._nuisance_rng = np.random.default_rng(self.seed)

    @property
    def state_dim(self):
        return self.spec.state_dim

    @property
    def action_dim(self):
        return self.spec.action_dim

    # canonical <-> observed ---------------------------------------------------
    def observe(self, canon: np.ndarray) -> np.ndarray:
        obs = canon.copy()
        obs[..., 0] *= self.progress_scale
        return obs[..., self.perm]

    def canonical(self, obs: np.ndarray) -> np.ndarray:
        canon = np.asarray(obs, dtype=np.float64)[..., self.inv_perm].copy()
        canon[..., 0] /= self.progress_scale
        return canon

    def progress(self, obs: np.ndarray) -> np.ndarray:
        """Canonical forward position ``x`` of observed states."""
        return self.canonical(obs)[..., 0]

    # dynamics -----------------------------------------------------------------
    def reset(self, n=1, seed=None) -> np.ndarray:
        """Start ``n`` episodes.  ``seed`` reseeds the nuisance stream."""
        if seed is not None:
            self._nuisance_rng = np.random.default_rng(seed)
        canon = np.zeros((n, self.state_dim))
        canon[:, 2:] = self._nuisance_rng.uniform(-1.0, 1.0, size=(n, self.nuisance_dims))
        self._canon = canon
        return self.observe(canon)

    def step(self, actions) -> np.ndarray:
        if self._canon is None:
            raise RuntimeError("step() called before reset()")
        a = np.asarray(actions, dtype=np.float64).reshape(len(self._canon), -1)[:, 0]
        a = np.clip(a, -1.0, 1.0)
        c = self._canon
        nxt = np.empty_like(c)
        x = c[:, 0] + DT * c[:, 1]
        v = np.clip(c[:, 1] + self.action_gain * a, -1.0, 1.0)
        hit = x <= 0.0
        nxt[:, 0] = np.where(hit, 0.0, x)
        nxt[:, 1] = np.where(hit, np.maximum(v, 0.0), v)
        if self.nuisance_dims:
            step = self._nuisance_rng.uniform(-NUISANCE_STEP, NUISANCE_STEP, size=c[:, 2:].shape)
            nxt[:, 2:] = _reflect(c[:, 2:] + step)
        self._canon = nxt
        return self.observe(nxt)

    def scripted_action(self, obs: np.ndarray) -> np.ndarray:
        """The scripted expert: full forward action in every state."""
        return np.ones((len(obs), self.action_dim))


def _reflect(u):
    # fold onto [-1, 1]; a single fold suffices for steps of magnitude <= 2
    u = np.where(u > 1.0, 2.0 - u, u)
    return np.where(u < -1.0, -2.0 - u, u)


def make_expert_line(nuisance_dims=DEFAULT_NUISANCE_DIMS, seed=0, horizon=DEFAULT_HORIZON) -> LineEnv:
    return LineEnv(nuisance_dims, seed, horizon=horizon, name="expert-line")


def make_learner_line(variant, seed=0, horizon=DEFAULT_HORIZON, perm=None) -> LineEnv:
    """Cross-domain counterpart of the expert line.

    ``perm`` overrides the seeded permutation of the Permuted variant.
    """
    variant = Variant(variant)
    name = f"learner-line-{variant.value}"
    if variant is Variant.PERMUTED:
        if perm is None:
            perm = np.random.default_rng(seed).permutation(2 + DEFAULT_NUISANCE_DIMS)
        return LineEnv(DEFAULT_NUISANCE_DIMS, seed, perm=perm, horizon=horizon, name=name)
    if variant is Variant.NEGATED_SCALED:
        return LineEnv(DEFAULT_NUISANCE_DIMS, seed, progress_scale=-2.5, horizon=horizon, name=name)
    return LineEnv(5, seed, action_gain=0.25, horizon=horizon, name=name)


ENV_NAMES = ("expert-line",) + tuple(f"learner-line-{v.value}" for v in Variant)


def make_env(name, seed=0, horizon=DEFAULT_HORIZON) -> LineEnv:
    """Build a line env by name; bare variant names are accepted too."""
    if name == "expert-line":
        return make_expert_line(seed=seed, horizon=horizon)
    variant = name[len("learner-line-"):] if name.startswith("learner-line-") else name
    try:
        return make_learner_line(Variant(variant), seed=seed, horizon=horizon)
    except ValueError:
        raise ValueError(f"unknown env {name!r}; choose from {', '.join(ENV_NAMES)}") from None


def ground_truth_map(env: LineEnv) -> np.ndarray:
    """Affine map (no bias) from observed learner state to canonical ``(x, v)``."""
    W = np.zeros((2, env.state_dim))
    W[0, env.perm.tolist().index(0)] = 1.0 / env.progress_scale
    W[1, env.perm.tolist().index(1)] = 1.0
    return W


def scripted_rollout(env: LineEnv, n_episodes, horizon, seed) -> np.ndarray:
    """States of the scripted expert, shape ``(n_episodes, horizon + 1, dim)``."""
    obs = env.reset(n_episodes, seed=seed)
    out = [obs]
    for _ in range(horizon):
        obs = env.step(env.scripted_action(obs))
        out.append(obs)
    return np.stack(out, axis=1)


def scripted_progress(env: LineEnv, horizon) -> float:
    """Canonical distance covered by the scripted expert in ``horizon`` steps."""
    states = scripted_rollout(env, 1, horizon, seed=0)
    return float(env.progress(states[0, -1]) - env.progress(states[0, 0]))


def gen_expert_demos(env: LineEnv, n_traj=20, horizon=DEFAULT_HORIZON, seed=0) -> DemoSet:
    states = scripted_rollout(env, n_traj, horizon, seed)
    return DemoSet(list(states), env.spec.domain_name, env.state_dim, seed)


# ---------------------------------------------------------------------------
# Ordered-pairs construction


class Side(str, enum.Enum):
    EXPERT = "expert"
    LEARNER = "learner"


@dataclass(frozen=True)
class OrderedPairsSet:
    pairs: np.ndarray  # (n, 2): columns z, z'
    side: Side

    def __post_init__(self):
        z, z2 = self.pairs[:, 0], self.pairs[:, 1]
        ok = z2 < z if self.side is Side.EXPERT else z2 > z
        assert ok.all(), "ordering constraint violated"


def make_ordered_pairs(n, side, seed=0, return_rate=False):
    """Rejection-sample uniform pairs on the unit square obeying the side's order."""
    side = Side(side)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    accepted, drawn = [], 0
    need = n
    while need > 0:
        batch = rng.uniform(0.0, 1.0, size=(max(2 * need, 16), 2))
        keep = batch[:, 1] < batch[:, 0] if side is Side.EXPERT else batch[:, 1] > batch[:, 0]
        idx = np.flatnonzero(keep)[:need]
        # count draws only up to the last accepted one
        drawn += int(idx[-1]) + 1 if len(idx) == need else len(batch)
        take = batch[idx]
        accepted.append(take)
        need -= len(take)
    out = OrderedPairsSet(np.concatenate(accepted)[:n], side)
    if return_rate:
        return out, n / drawn
    return out


# ---------------------------------------------------------------------------
# Finite MDP with exact occupancy


@dataclass(frozen=True)
class FiniteMDP:
    """Tabular MDP.  ``P[a, s, s']`` transition kernel, ``init`` start distribution.

    ``labels[s]`` gives the (position, nuisance) tuple of each flat state for
    grid chains; other MDPs may leave it ``None``.
    """

    P: np.ndarray
    init: np.ndarray
    labels: np.ndarray | None = None

    @property
    def n_states(self):
        return self.P.shape[1]

    @property
    def n_actions(self):
        return self.P.shape[0]


LEFT, RIGHT = 0, 1


def make_grid_chain(n_states, nuisance_levels=1, gamma=0.9) -> FiniteMDP:
    """Chain of positions with an independent uniformly-resampled nuisance tag.

    Flat state index ``s = c * nuisance_levels + u``.  ``gamma`` is validated
    here but belongs to the occupancy oracle.
    """
    if n_states < 2 or nuisance_levels < 1:
        raise ValueError("need n_states >= 2 and nuisance_levels >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    U = nuisance_levels
    S = n_states * U
    P = np.zeros((2, S, S))
    for c in range(n_states):
        for a, dc in ((LEFT, -1), (RIGHT, 1)):
            c2 = min(max(c + dc, 0), n_states - 1)
            for u in range(U):
                P[a, c * U + u, c2 * U:(c2 + 1) * U] = 1.0 / U
    labels = np.array([(c, u) for c in range(n_states) for u in range(U)])
    return FiniteMDP(P, np.full(S, 1.0 / S), labels)


def state_visitation(mdp: FiniteMDP, policy: np.ndarray, gamma) -> np.ndarray:
    """Discounted visitation ``d(s) = sum_t gamma^t P(s_t = s)``.

    ``policy[s, a]`` is the action table.  Solves ``(I - gamma P_pi^T) d = init``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    P_pi = np.einsum("sa,ast->st", policy, mdp.P)
    A = np.eye(mdp.n_states) - gamma * P_pi.T
    return np.linalg.solve(A, mdp.init)


def exact_occupancy(mdp: FiniteMDP, policy, gamma=0.9, normalized=False) -> np.ndarray:
    """State-transition occupancy ``rho(s, s')``; sums to ``1/(1-gamma)`` unless normalized."""
    policy = np.asarray(policy, dtype=np.float64)
    d = state_visitation(mdp, policy, gamma)
    P_pi = np.einsum("sa,ast->st", policy, mdp.P)
    rho = d[:, None] * P_pi
    return rho * (1.0 - gamma) if normalized else rho


def expected_reward_equivalence_check(mdp: FiniteMDP, policy, reward, gamma=0.9, atol=1e-12):
    """Expected discounted reward computed on full and on embedded occupancies.

    ``reward(c, c2)`` must depend on chain positions only.  The full route
    evaluates it on every flat (s, s') pair, the embedded route first
    marginalises the nuisance tags out of the occupancy.  Returns
    ``(full, embedded, consistent)``.
    """
    rho = exact_occupancy(mdp, policy, gamma)
    pos = mdp.labels[:, 0]
    n_pos = int(pos.max()) + 1

    full_r = np.array([[reward(mdp.labels[s], mdp.labels[t]) for t in range(mdp.n_states)]
                       for s in range(mdp.n_states)], dtype=np.float64)
    full = float(np.sum(rho * full_r))

    onehot = np.eye(n_pos)[pos]  # (S, C)
    rho_z = onehot.T @ rho @ onehot
    emb_r = np.array([[reward(_pos_label(mdp, c), _pos_label(mdp, c2)) for c2 in range(n_pos)]
                      for c in range(n_pos)], dtype=np.float64)
    embedded = float(np.sum(rho_z * emb_r))
    return full, embedded, abs(full - embedded) <= atol * max(1.0, abs(full))


def _pos_label(mdp, c):
    # representative full label for an embedded position: nuisance tag 0
    return np.array([c, 0])
