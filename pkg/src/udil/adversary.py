"""Adversarial objective, reward synthesis and the joint training loop.

Sign convention: the discriminator is trained towards ``D -> 1`` on learner
pairs and ``D -> 0`` on expert pairs.  The learner is rewarded with
``-log D`` so pairs that fool the discriminator earn large rewards, and the
encoder minimises ``mean log D`` over learner pairs.  Probabilities are
clamped to ``[1e-6, 1 - 1e-6]``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .miembed import EmbeddingSpec, apply_embedding
from .policy import CemConfig, PolicyParams, cem_update, rollout_batch
from .trajstore import DemoSet, extract_transitions

METRIC_COLUMNS = ("iter", "disc_loss", "encoder_loss", "mean_synth_reward", "eval_true_reward", "js_estimate")
JS_MAX_DIM = 3


class RewardMode(str, enum.Enum):
    ADVERSARIAL = "adversarial"
    GOAL_DISTANCE = "goal-distance"


class TrainingAborted(RuntimeError):
    def __init__(self, iteration, reason):
        self.iteration = iteration
        super().__init__(f"training aborted at iteration {iteration}: {reason}")


@dataclass(frozen=True)
class TrainConfig:
    lr_encoder: float = 0.001
    lr_discriminator: float = 0.001
    encoder_update_prob: float = 0.01
    use_bias: bool = False
    batch_size: int = 64
    disc_updates_per_iter: int = 4
    policy: CemConfig = field(default_factory=CemConfig)
    total_iters: int = 100
    rng_seed: int = 0
    reward_mode: RewardMode = RewardMode.ADVERSARIAL
    embedding_dim_override: int | None = None
    pair_input: bool = True
    disc_hidden: tuple = (64, 64)
    rollout_episodes: int = 8
    eval_episodes: int = 4
    js_bins: int = 10
    init_log_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "reward_mode", RewardMode(self.reward_mode))
        object.__setattr__(self, "disc_hidden", tuple(int(h) for h in self.disc_hidden))
        if not (self.lr_encoder > 0 and self.lr_discriminator > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.encoder_update_prob <= 1.0:
            raise ValueError("encoder_update_prob must lie in [0, 1]")
        for name in ("batch_size", "rollout_episodes", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.disc_updates_per_iter < 0 or self.total_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.embedding_dim_override is not None and self.embedding_dim_override < 1:
            raise ValueError("embedding_dim_override must be >= 1")
        if self.js_bins < 2:
            raise ValueError("js_bins must be >= 2")


@dataclass
class TrainedArtifacts:
    policy: PolicyParams
    encoder: dc.EncoderState
    discriminator: dc.DiscriminatorState
    metrics: list  # rows keyed by METRIC_COLUMNS
    embedding: EmbeddingSpec | None = None

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["iter"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Losses and rewards


def discriminator_loss(d: dc.DiscriminatorState, learner_pairs, expert_pairs) -> float:
    """``-(mean log D(learner) + mean log(1 - D(expert)))`` on embedded pairs."""
    return dc.discriminator_loss_and_grad(d, learner_pairs, expert_pairs, need_grad=False)[0]


def encoder_loss(d: dc.DiscriminatorState, enc: dc.EncoderState, learner_transitions) -> float:
    """``mean log D(g(s), g(s'))`` over raw learner transitions ``(N, 2, n)``."""
    t = np.asarray(learner_transitions, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    return dc.encoder_loss_and_grad(enc, d, t, need_grad=False)[0]


def synthesize_reward(d: dc.DiscriminatorState, enc: dc.EncoderState, t) -> np.ndarray | float:
    """``-log D(g(s), g(s'))`` for one transition ``(2, n)`` or a stack ``(..., 2, n)``."""
    t = np.asarray(t, dtype=np.float64)
    z = dc.encoder_apply_pair(enc, t)
    r = _reward_from_inputs(d, z.reshape(-1, z.shape[-2] * z.shape[-1]))
    return float(r[0]) if t.ndim == 2 else r.reshape(t.shape[:-2])


def _reward_from_inputs(d, x):
    log_d, _, _, _ = dc.log_prob(dc.disc_logits(d, x))
    return -log_d


def compute_goal_state(demos: DemoSet, f: EmbeddingSpec) -> np.ndarray:
    """Mean of the embedded terminal states of all demonstrations."""
    terminals = np.stack([t[-1] for t in demos.trajectories])
    return apply_embedding(f, terminals).mean(axis=0)


def goal_distance_reward(goal, enc: dc.EncoderState, s) -> np.ndarray | float:
    """``-||g(s) - goal||``; ``s`` may be one state or a stack."""
    goal = np.asarray(goal, dtype=np.float64)
    z = dc.encoder_apply(enc, s)
    if z.shape[-1] != goal.shape[-1]:
        raise ValueError(f"goal has dim {goal.shape[-1]}, encoded state has dim {z.shape[-1]}")
    r = -np.linalg.norm(z - goal, axis=-1)
    return float(r) if np.ndim(r) == 0 else r


# ---------------------------------------------------------------------------
# Jensen-Shannon estimate


def js_estimate(samples_p, samples_q, bins=10) -> float:
    """Plug-in JS divergence (nats) between histograms on a shared bounding box.

    Samples are embedded pairs ``(N, 2, m)`` or single states ``(N, m)`` with
    ``m <= 3``.
    """
    p = np.asarray(samples_p, dtype=np.float64)
    q = np.asarray(samples_q, dtype=np.float64)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("js_estimate needs nonempty sample sets")
    if p.shape[1:] != q.shape[1:]:
        raise ValueError(f"sample shapes differ: {p.shape[1:]} vs {q.shape[1:]}")
    if p.shape[-1] > JS_MAX_DIM:
        raise ValueError(f"histogram JS supports embedded dim <= {JS_MAX_DIM}, got {p.shape[-1]}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    p = p.reshape(len(p), -1)
    q = q.reshape(len(q), -1)
    both = np.concatenate([p, q])
    lo, hi = both.min(axis=0), both.max(axis=0)
    flat = hi <= lo
    lo, hi = np.where(flat, lo - 0.5, lo), np.where(flat, hi + 0.5, hi)
    rng = list(zip(lo, hi))
    hp = np.histogramdd(p, bins=bins, range=rng)[0].ravel() / len(p)
    hq = np.histogramdd(q, bins=bins, range=rng)[0].ravel() / len(q)
    return js_from_histograms(hp, hq)


def js_from_histograms(hp, hq) -> float:
    m = 0.5 * (hp + hq)
    return 0.5 * _kl(hp, m) + 0.5 * _kl(hq, m)


def _kl(a, m):
    nz = a > 0
    return math.fsum(a[nz] * np.log(a[nz] / m[nz]))


def affine_pair_map(pairs, a, b, c=None, d=None) -> np.ndarray:
    """Map scalar pairs ``(s, s')`` to ``(a s + b, c s' + d)``.

    Omitting ``c`` and ``d`` gives the time-invariant map ``c = a, d = b``.
    """
    pairs = np.asarray(pairs, dtype=np.float64).reshape(len(pairs), 2)
    c = a if c is None else c
    d = b if d is None else d
    return np.column_stack([a * pairs[:, 0] + b, c * pairs[:, 1] + d])


@dataclass
class GridSearchResult:
    params: tuple  # (a, b) or (a, b, c, d)
    js: float
    ordered: bool  # every mapped pair has z' < z


def affine_grid_search(learner_pairs, expert_pairs, slopes, offsets, time_variant,
                       bins=10) -> GridSearchResult:
    """Exhaustive search for the affine pair map closest in histogram JS to the expert set.

    ``slopes`` and ``offsets`` are the grids for (a, c) and (b, d).  A slope
    grid of ``[0]`` restricts the search to input-ignoring (constant) maps.
    Ties keep the first grid point in iteration order.
    """
    E = np.asarray(expert_pairs, dtype=np.float64).reshape(len(expert_pairs), 2)
    best = None
    if time_variant:
        combos = ((a, b, c, d) for a in slopes for b in offsets for c in slopes for d in offsets)
    else:
        combos = ((a, b) for a in slopes for b in offsets)
    for params in combos:
        z = affine_pair_map(learner_pairs, *params)
        js = js_estimate(z[:, :, None], E[:, :, None], bins)
        if best is None or js < best.js:
            best = GridSearchResult(tuple(float(v) for v in params), js, bool((z[:, 1] < z[:, 0]).all()))
    return best


# ---------------------------------------------------------------------------
# Training loop


def resolve_embedding(f: EmbeddingSpec, override: int | None) -> EmbeddingSpec:
    """Apply ``embedding_dim_override``: keep the top ``d`` dims by MI when known."""
    if override is None:
        return f
    if f.source_report is not None:
        per_dim = f.source_report.per_dim_mi
        order = [d for d, _ in sorted(per_dim, key=lambda t: (-t[1], t[0]))]
    else:
        order = list(f.selected_dims)
    if override > len(order):
        raise ValueError(f"embedding_dim_override={override} exceeds {len(order)} available dims")
    return EmbeddingSpec.explicit(sorted(order[:override]))


def _expert_inputs(demos, f, pair_input):
    if pair_input:
        return apply_embedding(f, extract_transitions(demos, 1))
    return apply_embedding(f, demos.all_states())[:, None, :]


def _learner_inputs(batch, pair_input):
    if pair_input:
        return batch.transitions()
    return batch.states[:, 1:].reshape(-1, 1, batch.states.shape[-1])


def make_reward_fn(mode, d, enc, pair_input=True, goal=None):
    """Vectorised ``reward_fn(s, s_next)`` for the policy optimiser."""
    mode = RewardMode(mode)
    if mode is RewardMode.GOAL_DISTANCE:
        return lambda s, s2: goal_distance_reward(goal, enc, s2)

    def reward(s, s2):
        z2 = dc.encoder_apply(enc, s2)
        x = np.concatenate([dc.encoder_apply(enc, s), z2], axis=-1) if pair_input else z2
        return _reward_from_inputs(d, x.reshape(-1, x.shape[-1])).reshape(x.shape[:-1])

    return reward


def udil_train(learner_env, demos: DemoSet, f: EmbeddingSpec, cfg: TrainConfig,
               encoder: dc.EncoderState | None = None, policy: PolicyParams | None = None,
               progress_fn=None) -> TrainedArtifacts:
    """Jointly train policy, encoder and discriminator.

    Each iteration: roll out the policy; take ``disc_updates_per_iter``
    discriminator steps on fresh minibatches, each followed with probability
    ``encoder_update_prob`` by one encoder step; relabel rewards and run one
    CEM update.  ``encoder`` overrides the seeded random initialisation.
    """
    f = resolve_embedding(f, cfg.embedding_dim_override)
    if max(f.selected_dims) >= demos.dim:
        raise ValueError(f"embedding uses dim {max(f.selected_dims)} but demos have dim {demos.dim}")
    m, n = f.dim, learner_env.state_dim
    rng = np.random.default_rng(cfg.rng_seed)
    seeds = rng.integers(2**31, size=3)

    if encoder is None:
        encoder = dc.EncoderState.init(n, m, seed=int(seeds[0]), use_bias=cfg.use_bias)
    if (encoder.m_out, encoder.n_in) != (m, n):
        raise ValueError(f"encoder shape {(encoder.m_out, encoder.n_in)} does not match "
                         f"embedding dim {m} and learner dim {n}")
    slots = 2 if cfg.pair_input else 1
    disc = dc.DiscriminatorState.init(slots * m, cfg.disc_hidden, seed=int(seeds[1]))
    if policy is None:
        policy = PolicyParams.zeros(n, learner_env.action_dim, cfg.init_log_std, seed=cfg.rng_seed)
    expert = _expert_inputs(demos, f, cfg.pair_input)
    goal = compute_goal_state(demos, f) if cfg.reward_mode is RewardMode.GOAL_DISTANCE else None
    horizon = cfg.policy.horizon or learner_env.spec.horizon
    eval_seed = int(seeds[2])

    metrics = []
    for it in range(cfg.total_iters):
        batch = rollout_batch(learner_env, policy, cfg.rollout_episodes, horizon, rng)
        learner = _learner_inputs(batch, cfg.pair_input)
        disc_loss = math.nan
        for _ in range(cfg.disc_updates_per_iter):
            li = learner[rng.integers(len(learner), size=cfg.batch_size)]
            ei = expert[rng.integers(len(expert), size=cfg.batch_size)]
            try:
                disc_loss, g = dc.discriminator_loss_and_grad(disc, dc.encoder_apply(encoder, li), ei)
                disc = dc.adam_step(disc, g, cfg.lr_discriminator)
                if rng.random() < cfg.encoder_update_prob:
                    li = learner[rng.integers(len(learner), size=cfg.batch_size)]
                    _, ge = dc.encoder_loss_and_grad(encoder, disc, li)
                    encoder = dc.adam_step(encoder, ge, cfg.lr_encoder)
            except FloatingPointError as exc:
                raise TrainingAborted(it, str(exc)) from None

        try:
            enc_loss = dc.encoder_loss_and_grad(encoder, disc, learner, need_grad=False)[0]
            reward_fn = make_reward_fn(cfg.reward_mode, disc, encoder, cfg.pair_input, goal)
            synth = float(batch.relabel(reward_fn).rewards.mean())
            policy = cem_update(learner_env, reward_fn, policy, cfg.policy, rng)
        except FloatingPointError as exc:
            raise TrainingAborted(it, str(exc)) from None
        if not all(math.isfinite(v) for v in (disc_loss if cfg.disc_updates_per_iter else 0.0,
                                              enc_loss, synth)):
            raise TrainingAborted(it, "non-finite loss or reward")

        true_r = evaluate_progress(learner_env, policy, cfg.eval_episodes, horizon, eval_seed).mean()
        js = math.nan
        if m <= JS_MAX_DIM:
            z = dc.encoder_apply(encoder, learner)
            js = js_estimate(z, expert, cfg.js_bins)
        row = dict(iter=it, disc_loss=disc_loss, encoder_loss=enc_loss, mean_synth_reward=synth,
                   eval_true_reward=float(true_r), js_estimate=js)
        metrics.append(row)
        if progress_fn is not None:
            progress_fn(row)

    return TrainedArtifacts(policy, encoder, disc, metrics, f)


def evaluate_progress(env, policy: PolicyParams, n_episodes, horizon, seed) -> np.ndarray:
    """Canonical forward progress per episode under the noise-free policy."""
    batch = rollout_batch(env, policy.deterministic(), n_episodes, horizon,
                          np.random.default_rng(seed), env_seed=seed)
    return env.progress(batch.states[:, -1]) - env.progress(batch.states[:, 0])


# ---------------------------------------------------------------------------
# Encoder + discriminator fitting on fixed sample sets (no policy)


def fit_encoder_discriminator(learner_samples, expert_samples, *, n_steps=2000, batch_size=64,
                              lr_encoder=0.01, lr_discriminator=0.01, encoder_update_prob=1.0,
                              use_bias=True, disc_hidden=(64, 64), seed=0,
                              encoder: dc.EncoderState | None = None):
    """Train encoder and discriminator on fixed raw learner and embedded expert sets.

    ``learner_samples`` is ``(N, T, n)`` raw, ``expert_samples`` ``(M, T, m)``
    embedded; T = 2 for pairs.  Returns ``(encoder, discriminator, losses)``.
    """
    L = np.asarray(learner_samples, dtype=np.float64)
    E = np.asarray(expert_samples, dtype=np.float64)
    rng = np.random.default_rng(seed)
    s = rng.integers(2**31, size=2)
    if encoder is None:
        encoder = dc.EncoderState.init(L.shape[-1], E.shape[-1], seed=int(s[0]), use_bias=use_bias)
    disc = dc.DiscriminatorState.init(E.shape[1] * E.shape[2], disc_hidden, seed=int(s[1]))
    losses = []
    for _ in range(n_steps):
        li = L[rng.integers(len(L), size=batch_size)]
        ei = E[rng.integers(len(E), size=batch_size)]
        loss, g = dc.discriminator_loss_and_grad(disc, dc.encoder_apply(encoder, li), ei)
        disc = dc.adam_step(disc, g, lr_discriminator)
        losses.append(loss)
        if rng.random() < encoder_update_prob:
            li = L[rng.integers(len(L), size=batch_size)]
            _, ge = dc.encoder_loss_and_grad(encoder, disc, li)
            encoder = dc.adam_step(encoder, ge, lr_encoder)
    return encoder, disc, np.array(losses)
