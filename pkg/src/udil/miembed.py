"""Task-relevant expert embedding from demonstrations alone.

Pipeline: expert transitions (with frameskip) against an equal number of
pseudo-random transitions built by pairing independently resampled states;
per-dimension mutual information between the transition ``(s_d, s'_d)`` and
the label; cumulative MI curve; elbow; projection onto the retained dims.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import digamma
from sklearn.neighbors import KDTree

from .trajstore import DemoSet, Label, LabeledTransitions, expert_labeled, extract_transitions

DEFAULT_FRAMESKIP = 15
DEFAULT_K = 3
JITTER = 1e-10
_JITTER_SEED = 0x5EED


@dataclass(frozen=True)
class MiReport:
    per_dim_mi: list  # [(dim_index, mi_nats), ...] in dim order
    sample_count: int
    k_neighbors: int

    @property
    def values(self) -> np.ndarray:
        return np.array([mi for _, mi in self.per_dim_mi], dtype=np.float64)


@dataclass(frozen=True)
class CumulativeCurve:
    sorted_dims: list
    cumulative: list


@dataclass(frozen=True)
class Elbow:
    index: int
    degenerate: bool = False

    def __index__(self):
        return self.index

    def __int__(self):
        return self.index

    def __eq__(self, other):
        if isinstance(other, Elbow):
            return (self.index, self.degenerate) == (other.index, other.degenerate)
        return self.index == other


@dataclass(frozen=True)
class EmbeddingSpec:
    selected_dims: list
    source_report: MiReport | None = None
    elbow_index: int = 0
    degenerate: bool = False
    frameskip: int | None = None
    k_neighbors: int | None = None
    rng_seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.selected_dims:
            raise ValueError("an embedding must keep at least one dimension")
        if len(set(self.selected_dims)) != len(self.selected_dims):
            raise ValueError("selected_dims must be unique")

    @property
    def dim(self):
        return len(self.selected_dims)

    @classmethod
    def identity(cls, dim) -> "EmbeddingSpec":
        return cls(list(range(dim)), meta={"source": "all"})

    @classmethod
    def explicit(cls, dims) -> "EmbeddingSpec":
        return cls([int(d) for d in dims], meta={"source": "explicit"})

    def to_json(self) -> str:
        report = self.source_report
        obj = {
            "version": 1,
            "selected_dims": [int(d) for d in self.selected_dims],
            "elbow_index": int(self.elbow_index),
            "per_dim_mi": [[int(d), float(mi)] for d, mi in report.per_dim_mi] if report else [],
            "frameskip": self.frameskip,
            "k_neighbors": self.k_neighbors,
            "rng_seed": self.rng_seed,
        }
        if self.degenerate:
            obj["degenerate"] = True
        return json.dumps(obj, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EmbeddingSpec":
        obj = json.loads(text)
        if obj.get("version") != 1:
            raise ValueError(f"unsupported embedding version {obj.get('version')!r}")
        per_dim = [(int(d), float(mi)) for d, mi in obj.get("per_dim_mi", [])]
        report = MiReport(per_dim, 0, obj.get("k_neighbors") or 0) if per_dim else None
        return cls(
            [int(d) for d in obj["selected_dims"]],
            report,
            int(obj.get("elbow_index", 0)),
            bool(obj.get("degenerate", False)),
            obj.get("frameskip"),
            obj.get("k_neighbors"),
            obj.get("rng_seed"),
        )

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def generate_pseudo_random_transitions(demos: DemoSet, count, rng_seed) -> LabeledTransitions:
    """Pairs of states drawn independently and uniformly from all demo states."""
    if count < 1:
        raise ValueError("count must be >= 1")
    states = demos.all_states()
    if len(states) == 0:
        raise ValueError("demonstrations hold no states")
    rng = np.random.default_rng(rng_seed)
    idx = rng.integers(0, len(states), size=(count, 2))
    pairs = states[idx]
    return LabeledTransitions(pairs, np.full(count, Label.PSEUDO_RANDOM, dtype=np.int64))


# ---------------------------------------------------------------------------
# kNN mutual information between a continuous feature and a discrete label


def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15))
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _content_jitter(features, labels, scale=JITTER):
    """Deterministic jitter keyed on sample content, not sample position.

    Exact duplicates within a label get distinct offsets (keyed by occurrence
    number), so the jittered multiset does not depend on input order and is
    relabelled consistently when label names are swapped.
    """
    n, d = features.shape
    features = features + 0.0  # -0.0 and 0.0 must hash alike
    key = np.ascontiguousarray(features).view(np.uint64)
    h = np.full(n, np.uint64(_JITTER_SEED), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for j in range(d):
            h = _splitmix64(h ^ key[:, j])
        # occurrence rank among identical (features, label) rows
        occ = np.zeros(n, dtype=np.uint64)
        order = np.lexsort((labels,) + tuple(features[:, j] for j in reversed(range(d))))
        rows = np.column_stack([features[order], labels[order]])
        same = np.r_[False, np.all(rows[1:] == rows[:-1], axis=1)]
        group = np.cumsum(~same) - 1
        first = np.flatnonzero(~same)
        run = np.arange(n) - first[group]
        occ[order] = run.astype(np.uint64)
        h = _splitmix64(h ^ _splitmix64(occ))
        cols = []
        for j in range(d):
            h = _splitmix64(h + np.uint64(j + 1))
            cols.append((h >> np.uint64(11)).astype(np.float64) / float(1 << 53))
    u = np.column_stack(cols)
    return features + scale * (2.0 * u - 1.0)


def knn_mi_continuous_discrete(features, labels, k=DEFAULT_K, jitter=True):
    """Mutual information (nats) between continuous ``features`` and discrete ``labels``.

    Nearest-neighbour estimator for a mixed continuous/discrete pair under the
    Chebyshev metric.  For each sample, ``d_i`` is the distance to its k-th
    nearest same-label neighbour and ``m_i`` counts all samples (any label)
    strictly closer than ``d_i``, the sample itself included.  Clamped at 0.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels)
    n = len(x)
    if len(y) != n:
        raise ValueError("features and labels differ in length")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("need samples from at least two labels")
    if counts.min() < 2 * k:
        raise ValueError(f"need >= {2 * k} samples per label for k={k}, got {counts.min()}")
    if jitter:
        x = _content_jitter(x, y.astype(np.int64))

    radius = np.empty(n)
    for c in classes:
        mask = y == c
        tree = KDTree(x[mask], metric="chebyshev")
        dist, _ = tree.query(x[mask], k=k + 1)
        radius[mask] = dist[:, -1]
    tree = KDTree(x, metric="chebyshev")
    m = tree.query_radius(x, np.nextafter(radius, 0.0), count_only=True)

    label_term = sum(int(cnt) * float(digamma(cnt)) for cnt in counts) / n
    mi = float(digamma(n)) - label_term + float(digamma(k)) - math.fsum(digamma(m)) / n
    return max(0.0, mi)


def estimate_dim_mi(samples: LabeledTransitions, dim, k_neighbors=DEFAULT_K) -> float:
    """MI between the per-dimension transition ``(s_dim, s'_dim)`` and the label."""
    if not 0 <= dim < samples.pairs.shape[2]:
        raise ValueError(f"dim {dim} out of range for state dim {samples.pairs.shape[2]}")
    return knn_mi_continuous_discrete(samples.pairs[:, :, dim], samples.labels, k_neighbors)


def labeled_sample_set(demos: DemoSet, frameskip=DEFAULT_FRAMESKIP, rng_seed=0) -> LabeledTransitions:
    expert = extract_transitions(demos, frameskip)
    rand = generate_pseudo_random_transitions(demos, len(expert), rng_seed)
    return LabeledTransitions.concat(expert_labeled(expert), rand)


def build_mi_report(demos: DemoSet, frameskip=DEFAULT_FRAMESKIP, k_neighbors=DEFAULT_K, rng_seed=0) -> MiReport:
    samples = labeled_sample_set(demos, frameskip, rng_seed)
    per_dim = [(d, estimate_dim_mi(samples, d, k_neighbors)) for d in range(demos.dim)]
    return MiReport(per_dim, len(samples), k_neighbors)


# ---------------------------------------------------------------------------
# Cumulative curve and elbow


def cumulative_mi_curve(report: MiReport) -> CumulativeCurve:
    dims = [d for d, _ in report.per_dim_mi]
    mis = report.values
    # descending MI, ties to the smaller index
    order = sorted(range(len(dims)), key=lambda i: (-mis[i], dims[i]))
    sorted_dims = [dims[i] for i in order]
    cumulative = np.cumsum(mis[order]).tolist()
    return CumulativeCurve(sorted_dims, cumulative)


def find_elbow(curve: CumulativeCurve | list, tol=1e-12) -> Elbow:
    """Normalised-difference elbow: ``argmax_j (y_j - x_j)`` after min-max scaling.

    A constant or straight curve has no elbow; index 0 is returned flagged
    ``degenerate``.
    """
    y = np.asarray(curve.cumulative if isinstance(curve, CumulativeCurve) else curve, dtype=np.float64)
    if len(y) < 3:
        raise ValueError(f"elbow detection needs a curve of length >= 3, got {len(y)}")
    span = y.max() - y.min()
    if span <= 0.0:
        return Elbow(0, degenerate=True)
    x = np.linspace(0.0, 1.0, len(y))
    diff = (y - y.min()) / span - x
    j = int(np.argmax(diff))  # first maximum on ties
    if diff[j] <= tol:
        return Elbow(0, degenerate=True)
    return Elbow(j)


def select_embedding(report: MiReport, frameskip=None, rng_seed=None) -> EmbeddingSpec:
    """Keep the top dims up to and including the elbow.

    The elbow is searched on the curve anchored at the origin (zero dims kept,
    zero information), so a single dominant dimension can be selected alone
    and near-zero tails are not stretched to full scale by the normalisation.
    ``elbow_index`` indexes ``sorted_dims``.
    """
    curve = cumulative_mi_curve(report)
    if len(curve.cumulative) < 2:
        return EmbeddingSpec(curve.sorted_dims[:1], report, 0, True, frameskip,
                             report.k_neighbors, rng_seed)
    elbow = find_elbow([0.0] + curve.cumulative)
    last = max(elbow.index - 1, 0)
    return EmbeddingSpec(
        curve.sorted_dims[: last + 1],
        report,
        last,
        elbow.degenerate,
        frameskip,
        report.k_neighbors,
        rng_seed,
    )


def select_embedding_from_demos(demos: DemoSet, frameskip=DEFAULT_FRAMESKIP, k_neighbors=DEFAULT_K, rng_seed=0) -> EmbeddingSpec:
    report = build_mi_report(demos, frameskip, k_neighbors, rng_seed)
    return select_embedding(report, frameskip, rng_seed)


def apply_embedding(spec: EmbeddingSpec, s: np.ndarray) -> np.ndarray:
    """Project states (last axis) onto ``spec.selected_dims`` in listed order."""
    s = np.asarray(s, dtype=np.float64)
    if max(spec.selected_dims) >= s.shape[-1] or min(spec.selected_dims) < 0:
        raise ValueError(
            f"embedding uses dim {max(spec.selected_dims)} but states have dim {s.shape[-1]}"
        )
    return s[..., spec.selected_dims]
