"""Probability head, asymmetric multi-label loss, and ranking/F1 metrics.

Labels are integer arrays over classes holding 1 (present), 0 (absent) or
:data:`UNKNOWN` (annotation withheld).  Unknown entries are ignored by the
loss and by every metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

UNKNOWN = -1


@dataclass(frozen=True)
class AslConfig:
    gamma_pos: float = 1.0
    gamma_neg: float = 2.0
    clip: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        if self.gamma_neg < self.gamma_pos:
            raise ValueError(f"gamma_neg ({self.gamma_neg}) must be >= gamma_pos ({self.gamma_pos})")
        if not 0.0 <= self.clip < 1.0:
            raise ValueError(f"clip must lie in [0, 1), got {self.clip}")


def calibrate(psi, alpha, scale: float | None = None, bias=0.0) -> Tensor:
    """``sigmoid(alpha * (scale * psi - 1) + bias)``.

    ``scale`` defaults to the class count, so a score of ``1/C`` maps to 0.5
    when the bias is zero.  ``alpha`` and ``bias`` may be Parameters.
    """
    psi = nx.as_tensor(psi)
    if scale is None:
        scale = psi.shape[-1]
    z = nx.as_tensor(alpha) * (psi * float(scale) - 1.0) + bias
    return nx.sigmoid(nx.clamp_max(nx.clamp_min(z, -30.0), 30.0))


def asl_loss(p, y, cfg: AslConfig = AslConfig()) -> Tensor:
    """Asymmetric loss averaged over known classes, then over samples.

    ``p`` is ``(C,)`` or ``(B, C)``.  The negative branch uses the shifted
    probability ``max(p - clip, 0)`` so easy negatives below the clip cost
    nothing.  Logs are floored at ``eps`` rather than offset by it, which keeps
    the loss exact wherever the argument is already above ``eps``.
    """
    p = nx.as_tensor(p)
    y = np.asarray(y)
    if y.shape != p.shape:
        raise ValueError(f"asl_loss: labels {y.shape} do not match predictions {p.shape}")
    if not ((p.data > 0) & (p.data < 1)).all():
        raise ValueError("asl_loss: predictions must lie strictly inside (0, 1)")
    known = (y != UNKNOWN).astype(np.float64)
    n_known = known.sum(axis=-1)
    if (n_known == 0).any():
        raise ValueError("asl_loss: every sample needs at least one known label")
    pos = Tensor((y == 1).astype(np.float64))
    neg = Tensor((y == 0).astype(np.float64))

    pos_term = pos * nx.power(1.0 - p, cfg.gamma_pos) * nx.log(nx.clamp_min(p, cfg.eps))
    shifted = nx.clamp_min(p - cfg.clip, 0.0)
    neg_term = neg * nx.power(shifted, cfg.gamma_neg) * nx.log(nx.clamp_min(1.0 - shifted, cfg.eps))
    per_sample = -nx.sum_(pos_term + neg_term, axis=-1) / n_known
    return nx.reshape(nx.mean(per_sample), (1,))


def _as_scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s = s[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} disagree")
    return s, y


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """AP of one class over its known entries; ``None`` when it has no positive."""
    keep = labels != UNKNOWN
    s, y = scores[keep], labels[keep]
    if not (y == 1).any():
        return None
    order = np.argsort(-s, kind="stable")
    hits = (y[order] == 1).astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].mean())


def mean_average_precision(scores, labels) -> float:
    """Mean of per-class AP; classes without a known positive are skipped."""
    s, y = _as_scores_labels(scores, labels)
    aps = [ap for c in range(s.shape[1]) if (ap := average_precision(s[:, c], y[:, c])) is not None]
    if not aps:
        raise ValueError("mean_average_precision: no class has a known positive")
    return float(np.mean(aps))


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def f1_scores(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Return ``(CF1, OF1)`` after thresholding scores at ``threshold`` (inclusive)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    s, y = _as_scores_labels(scores, labels)
    known = y != UNKNOWN
    pred = (s >= threshold) & known
    actual = (y == 1) & known
    tp = (pred & actual).sum(axis=0)
    fp = (pred & ~actual).sum(axis=0)
    fn = (~pred & actual).sum(axis=0)
    cf1 = float(np.mean([_f1(*t) for t in zip(tp, fp, fn)]))
    of1 = _f1(tp.sum(), fp.sum(), fn.sum())
    return cf1, float(of1)
