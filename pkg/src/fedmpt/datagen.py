"""Synthetic multi-label data, feature-clustered client shards, label masking.

Each class owns a fixed prototype direction and each sample carries one of a
few context directions.  Every context is tied to a designated class pair;
with probability ``spurious_strength`` a sample drawn under that context gets
both classes switched on.  Training data uses a positive strength while
evaluation data is drawn with zero strength, so whatever a model learns from
the context/pair coupling is spurious.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import VisualEncoder, encode_visual
from .objectives import UNKNOWN


def default_cooccurrence(C: int, strength: float = 0.25) -> np.ndarray:
    """Identity plus a genuine coupling between neighbours (0,1), (2,3), ..."""
    m = np.eye(C)
    for c in range(0, C - 1, 2):
        m[c, c + 1] = m[c + 1, c] = strength
    return m


@dataclass
class GeneratorSpec:
    C: int = 12
    input_dim: int = 48
    samples: int = 2400
    base_cooccurrence: np.ndarray | None = None
    spurious_strength: float = 0.8
    seed: int = 0
    base_rate: float = 0.15
    noise_std: float = 0.3
    context_scale: float = 1.0
    n_contexts: int | None = None

    def __post_init__(self):
        if self.base_cooccurrence is None:
            self.base_cooccurrence = default_cooccurrence(self.C)
        m = np.asarray(self.base_cooccurrence, dtype=np.float64)
        if m.shape != (self.C, self.C) or not np.allclose(m, m.T) or not np.allclose(np.diag(m), 1.0):
            raise ValueError("base_cooccurrence must be a symmetric CxC matrix with unit diagonal")
        if ((m < 0) | (m > 1)).any():
            raise ValueError("base_cooccurrence entries must lie in [0, 1]")
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ValueError(f"spurious_strength must lie in [0, 1], got {self.spurious_strength}")
        self.base_cooccurrence = m
        if self.n_contexts is None:
            self.n_contexts = max(1, self.C // 2)


@dataclass
class World:
    """The fixed generative ingredients shared by every split of one spec."""

    prototypes: np.ndarray  # (C, input_dim)
    contexts: np.ndarray  # (Z, input_dim)
    spurious_pairs: np.ndarray  # (Z, 2) class indices

    @classmethod
    def from_spec(cls, spec: GeneratorSpec) -> "World":
        rng = np.random.default_rng([spec.seed, 0x3031D])
        protos = rng.standard_normal((spec.C, spec.input_dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        ctx = rng.standard_normal((spec.n_contexts, spec.input_dim))
        ctx /= np.linalg.norm(ctx, axis=1, keepdims=True)
        perm = rng.permutation(spec.C)
        pairs = np.array(
            [[perm[(2 * z) % spec.C], perm[(2 * z + 1) % spec.C]] for z in range(spec.n_contexts)]
        )
        return cls(protos, ctx, pairs)


@dataclass
class Dataset:
    ids: np.ndarray  # (S,) int64
    X: np.ndarray  # (S, input_dim)
    Y: np.ndarray  # (S, C) int8 with UNKNOWN entries
    context: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        ctx = None if self.context is None else self.context[idx]
        return Dataset(self.ids[idx], self.X[idx], self.Y[idx], ctx)

    @property
    def C(self) -> int:
        return self.Y.shape[1]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, x, y in zip(self.ids, self.X, self.Y):
                labels = ["?" if v == UNKNOWN else int(v) for v in y]
                fh.write(json.dumps({"id": int(i), "x": x.tolist(), "y": labels}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        ids, xs, ys = [], [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            ids.append(rec["id"])
            xs.append(rec["x"])
            ys.append([UNKNOWN if v == "?" else int(v) for v in rec["y"]])
        return cls(np.array(ids, dtype=np.int64), np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int8))


def generate(spec: GeneratorSpec, stream: int = 0) -> Dataset:
    """Draw ``spec.samples`` labelled samples.

    ``stream`` selects an independent sample sequence over the same world,
    which is how train and evaluation splits share prototypes.
    """
    world = World.from_spec(spec)
    rng = np.random.default_rng([spec.seed, 0x5A3, stream])
    S, C = spec.samples, spec.C
    context = rng.integers(spec.n_contexts, size=S)
    active = rng.random((S, C)) < spec.base_rate
    coupling = rng.random((S, C, C))
    for i in range(C):
        for j in range(i + 1, C):
            p = spec.base_cooccurrence[i, j]
            if p > 0:
                active[:, j] |= active[:, i] & (coupling[:, i, j] < p)
    inject = rng.random(S) < spec.spurious_strength
    pairs = world.spurious_pairs[context]
    rows = np.nonzero(inject)[0]
    active[rows, pairs[rows, 0]] = True
    active[rows, pairs[rows, 1]] = True
    X = (
        active.astype(np.float64) @ world.prototypes
        + spec.context_scale * world.contexts[context]
        + spec.noise_std * rng.standard_normal((S, spec.input_dim))
    )
    return Dataset(np.arange(S, dtype=np.int64), X, active.astype(np.int8), context)


# ---------------------------------------------------------------------------
# heterogeneity partition


@dataclass(frozen=True)
class PartitionSpec:
    t_percent: float

    def clients(self, C: int) -> int:
        """Cluster count ``max(1, round(t * C / 100))`` with halves rounded up."""
        return max(1, math.floor(self.t_percent * C / 100.0 + 0.5))


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns a label per point.

    An empty cluster takes the point farthest from its centre in the current
    largest cluster.
    """
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng([seed, 0xC1])
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = ((points[:, None, :] - np.array(centers)[None]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
    centers = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        for c in range(k):
            if not (new == c).any():
                sizes = np.bincount(new, minlength=k)
                big = int(sizes.argmax())
                members = np.nonzero(new == big)[0]
                far = members[d2[members, big].argmax()]
                new[far] = c
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([points[labels == c].mean(axis=0) for c in range(k)])
    return labels


def pooled_features(dataset: Dataset, enc: VisualEncoder) -> np.ndarray:
    return encode_visual(enc, dataset.X).data.mean(axis=-2)


def cluster_partition(dataset: Dataset, enc: VisualEncoder, spec: PartitionSpec, seed: int = 0) -> list[Dataset]:
    """One shard per k-means cluster of the mean-pooled frozen patch features."""
    k = spec.clients(dataset.C)
    if k > len(dataset):
        raise ValueError(f"{k} clients requested for {len(dataset)} samples")
    labels = kmeans(pooled_features(dataset, enc), k, seed=seed)
    return [dataset.subset(np.nonzero(labels == c)[0]) for c in range(k)]


# ---------------------------------------------------------------------------
# partial annotation


@dataclass(frozen=True)
class MaskSpec:
    mask_percent: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_percent < 100.0:
            raise ValueError(f"mask_percent must lie in [0, 100), got {self.mask_percent}")


def mask_annotations(dataset: Dataset, spec: MaskSpec) -> Dataset:
    """Hide each (sample, class) annotation independently with probability ``mask_percent/100``.

    A sample left with no known entry gets one of its originally known entries
    back, chosen by the seeded generator.
    """
    if spec.mask_percent == 0:
        return dataset
    rng = np.random.default_rng([spec.seed, 0x3A5C])
    hide = rng.random(dataset.Y.shape) < spec.mask_percent / 100.0
    Y = np.where(hide, UNKNOWN, dataset.Y).astype(np.int8)
    for row in np.nonzero((Y == UNKNOWN).all(axis=1))[0]:
        known = np.nonzero(dataset.Y[row] != UNKNOWN)[0]
        if len(known):
            col = known[rng.integers(len(known))]
            Y[row, col] = dataset.Y[row, col]
    return Dataset(dataset.ids.copy(), dataset.X, Y, dataset.context)
