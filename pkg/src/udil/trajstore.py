"""State-only demonstration data: containers, JSONL file format, transitions.

A demonstration file is UTF-8 JSON Lines.  The first line is a header::

    {"version": 1, "domain_name": "expert-line", "dim": 5, "generator_seed": 0}

and every following line is one trajectory, an array of states, each state an
array of ``dim`` numbers.  Floats are written with ``repr`` precision so a
write/read cycle reproduces every value bit for bit.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ValidationError(ValueError):
    """A value violates a data-model invariant."""


class DemoParseError(ValueError):
    """A demonstration file could not be parsed."""

    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class Label(enum.IntEnum):
    PSEUDO_RANDOM = 0
    EXPERT = 1


@dataclass(frozen=True, eq=False)
class DemoSet:
    """A set of expert trajectories, states only.

    Each trajectory is a float64 array of shape ``(n, dim)`` with ``n >= 2``.
    """

    trajectories: list
    domain_name: str
    dim: int
    generator_seed: int = 0

    def __post_init__(self):
        trajs = [np.array(t, dtype=np.float64) for t in self.trajectories]
        for t in trajs:
            t.setflags(write=False)
        object.__setattr__(self, "trajectories", trajs)
        validate_demo_set(self)

    def __eq__(self, other):
        if not isinstance(other, DemoSet):
            return NotImplemented
        return (
            self.domain_name == other.domain_name
            and self.dim == other.dim
            and self.generator_seed == other.generator_seed
            and len(self.trajectories) == len(other.trajectories)
            and all(np.array_equal(a, b) for a, b in zip(self.trajectories, other.trajectories))
        )

    def __len__(self):
        return len(self.trajectories)

    def all_states(self) -> np.ndarray:
        """Every individual state in trajectory order, shape ``(total, dim)``."""
        return np.concatenate(self.trajectories, axis=0)

    @property
    def lengths(self):
        return [len(t) for t in self.trajectories]


@dataclass(frozen=True)
class LabeledTransitions:
    """Stacked transitions ``pairs[i] = (s, s')`` with one label each.

    ``pairs`` has shape ``(N, 2, dim)`` and ``labels`` shape ``(N,)`` with
    values from :class:`Label`.
    """

    pairs: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if pairs.ndim != 3 or pairs.shape[1] != 2:
            raise ValidationError(f"pairs must have shape (N, 2, dim), got {pairs.shape}")
        if labels.shape != (pairs.shape[0],):
            raise ValidationError("one label per transition required")
        if not np.isin(labels, [Label.PSEUDO_RANDOM, Label.EXPERT]).all():
            raise ValidationError("labels must be Expert or PseudoRandom")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def concat(cls, *parts: "LabeledTransitions") -> "LabeledTransitions":
        return cls(
            np.concatenate([p.pairs for p in parts], axis=0),
            np.concatenate([p.labels for p in parts], axis=0),
        )


def validate_demo_set(demos: DemoSet) -> None:
    if not isinstance(demos.dim, (int, np.integer)) or demos.dim <= 0:
        raise ValidationError(f"dim must be a positive integer, got {demos.dim!r}")
    if not demos.trajectories:
        raise ValidationError("a DemoSet needs at least one trajectory")
    for i, t in enumerate(demos.trajectories):
        if t.ndim != 2 or t.shape[1] != demos.dim:
            raise ValidationError(
                f"trajectory {i}: states must have dim {demos.dim}, got shape {t.shape}"
            )
        if t.shape[0] < 2:
            raise ValidationError(f"trajectory {i}: needs at least 2 states, got {t.shape[0]}")
        if not np.isfinite(t).all():
            raise ValidationError(f"trajectory {i}: non-finite state value")


def write_demo_set(path, demos: DemoSet) -> None:
    validate_demo_set(demos)
    header = {
        "version": FORMAT_VERSION,
        "domain_name": demos.domain_name,
        "dim": int(demos.dim),
        "generator_seed": int(demos.generator_seed),
    }
    lines = [json.dumps(header)]
    for t in demos.trajectories:
        lines.append(json.dumps(t.tolist(), separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_demo_set(path) -> DemoSet:
    text = Path(path).read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    if not text.strip():
        raise DemoParseError("empty demonstration file", line=1)
    lines = text.split("\n")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DemoParseError(f"malformed header: {exc.msg}", line=1) from None
    if not isinstance(header, dict):
        raise DemoParseError("header must be a JSON object", line=1)
    missing = {"version", "domain_name", "dim", "generator_seed"} - header.keys()
    if missing:
        raise DemoParseError(f"header missing keys {sorted(missing)}", line=1)
    if header["version"] != FORMAT_VERSION:
        raise DemoParseError(f"unsupported version {header['version']!r}", line=1)
    dim = header["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim <= 0:
        raise ValidationError(f"line 1: dim must be a positive integer, got {dim!r}")

    trajectories = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            states = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DemoParseError(f"malformed trajectory: {exc.msg}", line=lineno) from None
        if not isinstance(states, list) or not all(isinstance(s, list) for s in states):
            raise DemoParseError("trajectory must be an array of state arrays", line=lineno)
        for j, s in enumerate(states):
            if len(s) != dim:
                raise ValidationError(
                    f"line {lineno}: state {j} has length {len(s)}, header declares dim {dim}"
                )
            if not all(_is_finite_number(v) for v in s):
                raise ValidationError(f"line {lineno}: state {j} has a non-numeric or non-finite value")
        trajectories.append(np.array(states, dtype=np.float64).reshape(len(states), dim))

    if not trajectories:
        raise DemoParseError("file holds a header but no trajectories", line=1)
    return DemoSet(trajectories, header["domain_name"], dim, header["generator_seed"])


def _is_finite_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def extract_transitions(demos: DemoSet, frameskip: int = 1) -> np.ndarray:
    """Sliding-window pairs ``(s_t, s_{t+k})`` from every trajectory.

    Returns an array of shape ``(sum(n_i - k), 2, dim)`` in trajectory order.
    """
    k = int(frameskip)
    if k < 1:
        raise ValueError(f"frameskip must be a positive integer, got {frameskip}")
    chunks = []
    for i, t in enumerate(demos.trajectories):
        if len(t) <= k:
            raise ValueError(f"trajectory {i} has {len(t)} states, needs more than frameskip={k}")
        chunks.append(np.stack([t[:-k], t[k:]], axis=1))
    return np.concatenate(chunks, axis=0)


def expert_labeled(pairs: np.ndarray) -> LabeledTransitions:
    return LabeledTransitions(pairs, np.full(len(pairs), Label.EXPERT, dtype=np.int64))
