"""Small differentiable models with hand-written reverse-mode gradients.

Two fixed graphs are supported:

* a bounded affine encoder ``z = W_eff s + b_eff`` with
  ``W_eff = 10 * (sigmoid(raw) - 0.5)``, so every effective weight and bias
  stays strictly inside (-5, 5);
* an MLP discriminator over concatenated embedded transitions, tanh hidden
  layers and a scalar logit.

The two adversarial losses are differentiated through these graphs by
:func:`loss_and_grad`; :func:`finite_diff_check` verifies the result against
central differences.  Everything is float64.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

WEIGHT_BOUND = 5.0
PROB_CLAMP = 1e-6
LOGIT_CLAMP = float(logit(1.0 - PROB_CLAMP))
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DISCRIMINATOR_LOSS = "discriminator_loss"
ENCODER_LOSS = "encoder_loss"
LOSS_KINDS = (DISCRIMINATOR_LOSS, ENCODER_LOSS)


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or inf."""


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


@dataclass
class AdamMoments:
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamMoments":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


# ---------------------------------------------------------------------------
# Encoder


def bound(raw):
    """Map unconstrained parameters into (-5, 5)."""
    # saturated sigmoids round to exactly +-5; keep the interval open
    edge = np.nextafter(WEIGHT_BOUND, 0.0)
    return np.clip(2.0 * WEIGHT_BOUND * (expit(raw) - 0.5), -edge, edge)


def unbound(eff):
    eff = np.asarray(eff, dtype=np.float64)
    if np.any(np.abs(eff) >= WEIGHT_BOUND):
        raise ValueError("effective parameters must lie strictly inside (-5, 5)")
    return logit(eff / (2.0 * WEIGHT_BOUND) + 0.5)


@dataclass
class EncoderState:
    raw_weight: np.ndarray  # (m_out, n_in)
    raw_bias: np.ndarray  # (m_out,)
    use_bias: bool = False
    diagonal: bool = False
    moments: AdamMoments | None = None
    step_count: int = 0
    seed: int | None = None

    def __post_init__(self):
        self.raw_weight = np.array(self.raw_weight, dtype=np.float64, ndmin=2)
        self.raw_bias = np.array(self.raw_bias, dtype=np.float64).reshape(-1)
        if self.raw_bias.shape != (self.raw_weight.shape[0],):
            raise ValueError("raw_bias must have length m_out")
        if self.diagonal and self.raw_weight.shape[0] != self.raw_weight.shape[1]:
            raise ValueError("diagonal encoders need m_out == n_in")
        if self.moments is None:
            self.moments = AdamMoments.zeros_like(self.params())

    @classmethod
    def init(cls, n_in, m_out, seed=0, use_bias=False, diagonal=False) -> "EncoderState":
        rng = np.random.default_rng(seed)
        W = rng.uniform(-0.1, 0.1, size=(m_out, n_in))
        b = rng.uniform(-0.1, 0.1, size=m_out)
        return cls(W, b, use_bias, diagonal, seed=seed)

    @classmethod
    def from_effective(cls, W, b=None, use_bias=False, diagonal=False) -> "EncoderState":
        W = np.array(W, dtype=np.float64, ndmin=2)
        b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
        return cls(unbound(W), unbound(b), use_bias, diagonal)

    @property
    def n_in(self):
        return self.raw_weight.shape[1]

    @property
    def m_out(self):
        return self.raw_weight.shape[0]

    @property
    def mask(self):
        return np.eye(self.m_out) if self.diagonal else np.ones_like(self.raw_weight)

    @property
    def weight(self) -> np.ndarray:
        return bound(self.raw_weight) * self.mask

    @property
    def bias(self) -> np.ndarray:
        return bound(self.raw_bias) if self.use_bias else np.zeros(self.m_out)

    def params(self) -> dict:
        return {"weight": self.raw_weight, "bias": self.raw_bias}

    def with_params(self, params: dict, **changes) -> "EncoderState":
        return _replace(self, raw_weight=params["weight"], raw_bias=params["bias"], **changes)

    def to_dict(self) -> dict:
        return {
            "kind": "encoder",
            "raw_weight": self.raw_weight.tolist(),
            "raw_bias": self.raw_bias.tolist(),
            "use_bias": self.use_bias,
            "diagonal": self.diagonal,
            "moments": _moments_to_dict(self.moments),
            "step_count": self.step_count,
            "seed": self.seed,
            "shape": [self.m_out, self.n_in],
        }

    @classmethod
    def from_dict(cls, d) -> "EncoderState":
        return cls(np.array(d["raw_weight"]), np.array(d["raw_bias"]), d["use_bias"],
                   d.get("diagonal", False), _moments_from_dict(d.get("moments")),
                   d.get("step_count", 0), d.get("seed"))


def _replace(obj, **changes):
    new = copy.copy(obj)
    for k, v in changes.items():
        setattr(new, k, v)
    return new


def encoder_apply(enc: EncoderState, s) -> np.ndarray:
    """``W_eff s + b_eff`` over the last axis of ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != enc.n_in:
        raise ValueError(f"encoder expects input dim {enc.n_in}, got {s.shape[-1]}")
    return s @ enc.weight.T + enc.bias


def encoder_apply_pair(enc: EncoderState, transitions):
    """Encode both ends of transitions with the same map.

    Accepts a single ``(2, n)`` transition or a stack ``(N, 2, n)``; returns the
    same layout with ``n`` replaced by ``m_out``.
    """
    t = np.asarray(transitions, dtype=np.float64)
    if t.shape[-2] != 2:
        raise ValueError(f"transitions must have a length-2 time axis, got shape {t.shape}")
    return np.stack([encoder_apply(enc, t[..., 0, :]), encoder_apply(enc, t[..., 1, :])], axis=-2)


# ---------------------------------------------------------------------------
# Discriminator


@dataclass
class DiscriminatorState:
    weights: list  # W_i with shape (out, in)
    biases: list
    moments: AdamMoments | None = None
    step_count: int = 0
    seed: int | None = None

    def __post_init__(self):
        self.weights = [np.array(W, dtype=np.float64, ndmin=2) for W in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if self.weights[-1].shape[0] != 1:
            raise ValueError("the last layer must produce a scalar logit")
        if self.moments is None:
            self.moments = AdamMoments.zeros_like(self.params())

    @classmethod
    def init(cls, input_dim, hidden=(64, 64), seed=0) -> "DiscriminatorState":
        rng = np.random.default_rng(seed)
        sizes = [input_dim, *hidden, 1]
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            bs.append(rng.uniform(-lim, lim, size=fan_out))
        return cls(Ws, bs, seed=seed)

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def hidden(self):
        return tuple(W.shape[0] for W in self.weights[:-1])

    def params(self) -> dict:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def with_params(self, params: dict, **changes) -> "DiscriminatorState":
        n = len(self.weights)
        return _replace(self, weights=[params[f"W{i}"] for i in range(n)],
                        biases=[params[f"b{i}"] for i in range(n)], **changes)

    def to_dict(self) -> dict:
        return {
            "kind": "discriminator",
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "moments": _moments_to_dict(self.moments),
            "step_count": self.step_count,
            "seed": self.seed,
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
        }

    @classmethod
    def from_dict(cls, d) -> "DiscriminatorState":
        return cls([np.array(W) for W in d["weights"]], [np.array(b) for b in d["biases"]],
                   _moments_from_dict(d.get("moments")), d.get("step_count", 0), d.get("seed"))


def _as_disc_input(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1) if x.ndim > 2 else np.atleast_2d(x)


def disc_logits(d: DiscriminatorState, x, cache=False):
    """Logits for a batch of flattened inputs ``x`` of shape ``(N, input_dim)``.

    Higher-rank inputs such as ``(N, 2, m)`` pair stacks are flattened per row.
    """
    h = _as_disc_input(x)
    if h.shape[1] != d.input_dim:
        raise ValueError(f"discriminator expects input width {d.input_dim}, got {h.shape[1]}")
    acts = [h]
    last = len(d.weights) - 1
    for i, (W, b) in enumerate(zip(d.weights, d.biases)):
        # overflow is reported by the finiteness check, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            h = h @ W.T + b
            if i < last:
                h = np.tanh(h)
        _check_finite(h, f"discriminator layer {i}")
        acts.append(h)
    out = h[:, 0]
    return (out, acts) if cache else out


def disc_forward(d: DiscriminatorState, z, z_next=None) -> float:
    """Logit for one embedded transition ``(z, z')``, or one state if ``z_next`` is None."""
    parts = [np.atleast_1d(np.asarray(z, dtype=np.float64))]
    if z_next is not None:
        parts.append(np.atleast_1d(np.asarray(z_next, dtype=np.float64)))
    return float(disc_logits(d, np.concatenate(parts)[None, :])[0])


def _disc_backward(d: DiscriminatorState, acts, dlogit):
    """Backprop ``dlogit`` (N,) through the MLP; returns (param grads, input grad)."""
    grads = {}
    delta = dlogit[:, None]
    for i in range(len(d.weights) - 1, -1, -1):
        grads[f"W{i}"] = delta.T @ acts[i]
        grads[f"b{i}"] = delta.sum(axis=0)
        delta = delta @ d.weights[i]
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
        _check_finite(delta, f"backward pass through discriminator layer {i}")
    return grads, delta


# ---------------------------------------------------------------------------
# Losses


def log_prob(logits):
    """Clamped ``(log D, log(1 - D), dlogD/dlogit, dlog(1-D)/dlogit)``."""
    lc = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    active = np.abs(logits) < LOGIT_CLAMP
    p = expit(lc)
    log_d = -np.logaddexp(0.0, -lc)
    log_1md = -np.logaddexp(0.0, lc)
    return log_d, log_1md, np.where(active, 1.0 - p, 0.0), np.where(active, -p, 0.0)


def discriminator_loss_and_grad(d: DiscriminatorState, learner, expert, need_grad=True):
    """``-(mean log D(learner) + mean log(1 - D(expert)))`` and its parameter gradient."""
    xl, xe = _as_disc_input(learner), _as_disc_input(expert)
    if len(xl) == 0 or len(xe) == 0:
        raise ValueError("discriminator loss needs nonempty learner and expert batches")
    x = np.concatenate([xl, xe], axis=0)
    logits, acts = disc_logits(d, x, cache=True)
    nl = len(xl)
    log_d, _, dlog_d, _ = log_prob(logits[:nl])
    _, log_1md, _, dlog_1md = log_prob(logits[nl:])
    loss = -(log_d.mean() + log_1md.mean())
    if not need_grad:
        return float(loss), None
    dlogit = np.concatenate([-dlog_d / nl, -dlog_1md / len(xe)])
    grads, _ = _disc_backward(d, acts, dlogit)
    return float(loss), grads


def encoder_loss_and_grad(enc: EncoderState, d: DiscriminatorState, inputs, need_grad=True):
    """``mean log D(g(s), g(s'))`` over raw learner inputs and its encoder gradient.

    ``inputs`` has shape ``(N, T, n_in)``: T = 2 for transitions, 1 for the
    single-state ablation.  Each time slot is encoded with the same map.
    """
    s = np.asarray(inputs, dtype=np.float64)
    if s.ndim != 3 or len(s) == 0:
        raise ValueError("encoder loss needs a nonempty (N, T, n_in) batch")
    W, b = enc.weight, enc.bias
    z = s @ W.T + b  # (N, T, m)
    _check_finite(z, "encoder output")
    logits, acts = disc_logits(d, z, cache=True)
    log_d, _, dlog_d, _ = log_prob(logits)
    loss = float(log_d.mean())
    if not need_grad:
        return loss, None
    n = len(s)
    _, dx = _disc_backward(d, acts, dlog_d / n)
    dz = dx.reshape(z.shape)
    dW_eff = np.einsum("ntm,ntk->mk", dz, s) * enc.mask
    dW = dW_eff * 2.0 * WEIGHT_BOUND * _dsigmoid(enc.raw_weight)
    if enc.use_bias:
        db = dz.sum(axis=(0, 1)) * 2.0 * WEIGHT_BOUND * _dsigmoid(enc.raw_bias)
    else:
        db = np.zeros_like(enc.raw_bias)
    return loss, {"weight": dW, "bias": db}


def _dsigmoid(x):
    p = expit(x)
    return p * (1.0 - p)


def loss_value(loss_kind, params, batch) -> float:
    return loss_and_grad(loss_kind, params, batch, need_grad=False)[0]


def loss_and_grad(loss_kind, params, batch, need_grad=True):
    """Dispatch on ``loss_kind``.

    * ``"discriminator_loss"``: ``params`` is a DiscriminatorState, ``batch`` is
      ``(learner_inputs, expert_inputs)`` of embedded transitions.
    * ``"encoder_loss"``: ``params`` is an EncoderState, ``batch`` is
      ``(discriminator, learner_inputs)`` with raw learner states ``(N, T, n)``.

    A callable ``loss_kind(params, batch, need_grad)`` is used as-is, which
    lets the finite-difference check run on ad hoc losses.
    """
    if callable(loss_kind):
        return loss_kind(params, batch, need_grad)
    if loss_kind == DISCRIMINATOR_LOSS:
        learner, expert = batch
        return discriminator_loss_and_grad(params, learner, expert, need_grad)
    if loss_kind == ENCODER_LOSS:
        disc, inputs = batch
        return encoder_loss_and_grad(params, disc, inputs, need_grad)
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def grad(loss_kind, params, batch) -> dict:
    return loss_and_grad(loss_kind, params, batch)[1]


def loss_terms(loss_kind, params, batch) -> np.ndarray:
    """Per-sample contributions whose sum is the loss (a length-1 array for callables)."""
    if callable(loss_kind):
        return np.array([loss_kind(params, batch, False)[0]])
    if loss_kind == DISCRIMINATOR_LOSS:
        learner, expert = batch
        xl, xe = _as_disc_input(learner), _as_disc_input(expert)
        logits = disc_logits(params, np.concatenate([xl, xe], axis=0))
        log_d = log_prob(logits[: len(xl)])[0]
        log_1md = log_prob(logits[len(xl):])[1]
        return np.concatenate([-log_d / len(xl), -log_1md / len(xe)])
    if loss_kind == ENCODER_LOSS:
        disc, inputs = batch
        s = np.asarray(inputs, dtype=np.float64)
        z = s @ params.weight.T + params.bias
        return log_prob(disc_logits(disc, z))[0] / len(s)
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def finite_diff_check(loss_kind, params, batch, eps=1e-5, keys=None) -> float:
    """Max relative error of :func:`grad` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.  The
    two perturbed losses are differenced per sample before summing, which
    keeps the rounding of an O(1) loss out of tiny gradient coordinates.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    analytic = grad(loss_kind, params, batch)
    base = params.params()
    worst = 0.0
    for key in keys or base:
        arr = base[key]
        for idx in np.ndindex(arr.shape):
            terms = []
            for sign in (1.0, -1.0):
                bumped = {k: v.copy() for k, v in base.items()}
                bumped[key][idx] += sign * eps
                terms.append(loss_terms(loss_kind, params.with_params(bumped), batch))
            num = math.fsum(terms[0] - terms[1]) / (2.0 * eps)
            a = analytic[key][idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Optimiser


def adam_step(state, grads: dict, lr):
    """One bias-corrected Adam step; returns a new state with step_count + 1."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for k, g in grads.items():
        _check_finite(g, f"gradient '{k}'")
    t = state.step_count + 1
    params = state.params()
    mom = state.moments
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = ADAM_BETA1 * mom.m[k] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * mom.v[k] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    return state.with_params(new_p, moments=AdamMoments(new_m, new_v), step_count=t)


def _moments_to_dict(mom: AdamMoments | None):
    if mom is None:
        return None
    return {"m": {k: v.tolist() for k, v in mom.m.items()},
            "v": {k: v.tolist() for k, v in mom.v.items()}}


def _moments_from_dict(d):
    if d is None:
        return None
    return AdamMoments({k: np.array(v) for k, v in d["m"].items()},
                       {k: np.array(v) for k, v in d["v"].items()})


def save_checkpoint(path, state) -> None:
    Path(path).write_text(json.dumps(state.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    kinds = {"encoder": EncoderState, "discriminator": DiscriminatorState}
    if d.get("kind") not in kinds:
        raise ValueError(f"{path}: unknown checkpoint kind {d.get('kind')!r}")
    return kinds[d["kind"]].from_dict(d)
