"""Patch-to-class entropic optimal transport, one problem per condition.

For every condition the adapted patches (rows) are coupled to the classes
(columns).  The row marginal weights patches by how strongly they match their
best class; the column marginal is uniform.  The Sinkhorn plan is treated as a
constant weighting: gradients reach the similarities, never the iterations.

All functions accept arbitrary leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .adapters import ConditionAdapter, adapt
from .encoders import TextEncoder
from .numerics import Tensor
from .prompts import ConditionPromptBank, embed_all

DEFAULT_TAU = 4.0
DEFAULT_LAMBDA = 0.2
DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-8


class NumericalError(ArithmeticError):
    """Sinkhorn could not proceed (kernel underflow or non-finite scalings)."""


@dataclass
class TransportProblem:
    S: Tensor  # (..., M, C) similarity, on the tape
    Cst: np.ndarray  # (..., M, C) cost = 1 - S
    a: np.ndarray  # (..., M)
    b: np.ndarray  # (..., C)
    lam: float = DEFAULT_LAMBDA
    tau: float = DEFAULT_TAU


@dataclass
class TransportPlan:
    P: np.ndarray
    u: np.ndarray
    v: np.ndarray
    kernel: np.ndarray
    iterations_used: int
    converged: bool


def build_cost(adapted_patches, cond_text, tau: float = DEFAULT_TAU, lam: float = DEFAULT_LAMBDA) -> TransportProblem:
    """Cost matrix and marginals from unit-norm patches ``(..., M, D)`` and class texts ``(..., C, D)``."""
    if not tau > 0:
        raise ValueError(f"temperature tau must be positive, got {tau}")
    adapted_patches, cond_text = nx.as_tensor(adapted_patches), nx.as_tensor(cond_text)
    raw = adapted_patches @ nx.transpose(cond_text)
    S = nx.softmax(raw, axis=-2, temperature=tau)
    best = raw.data.max(axis=-1) / tau
    a = np.exp(best - best.max(axis=-1, keepdims=True))
    a /= a.sum(axis=-1, keepdims=True)
    C = raw.shape[-1]
    b = np.full(raw.shape[:-2] + (C,), 1.0 / C)
    return TransportProblem(S=S, Cst=1.0 - S.data, a=a, b=b, lam=lam, tau=tau)


def sinkhorn(prob: TransportProblem, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> TransportPlan:
    """Alternating scaling ``u = a / (K v)``, ``v = b / (K^T u)`` starting from ``v = 1``.

    Stops once every row sum of the plan is within ``tol`` of ``a``; column sums
    are exact after each ``v`` update.
    """
    if max_iters < 1 or not tol > 0 or not prob.lam > 0:
        raise ValueError(f"sinkhorn needs max_iters>=1, tol>0, lambda>0 (got {max_iters}, {tol}, {prob.lam})")
    K = np.exp(-prob.Cst / prob.lam)
    if (K.sum(axis=-1) == 0).any() or (K.sum(axis=-2) == 0).any():
        raise NumericalError(f"Sinkhorn kernel underflowed to zero rows/columns at lambda={prob.lam}")
    a, b = prob.a, prob.b
    Kt = np.swapaxes(K, -1, -2)
    v = np.ones_like(b)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        u = a / np.matmul(K, v[..., None])[..., 0]
        v = b / np.matmul(Kt, u[..., None])[..., 0]
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise NumericalError(f"Sinkhorn scalings became non-finite at lambda={prob.lam}")
        row = u * np.matmul(K, v[..., None])[..., 0]
        if np.abs(row - a).max() < tol:
            converged = True
            break
    P = u[..., :, None] * K * v[..., None, :]
    return TransportPlan(P=P, u=u, v=v, kernel=K, iterations_used=it, converged=converged)


def conditioned_prediction(plan: TransportPlan, prob: TransportProblem) -> Tensor:
    """Plan-weighted similarity per class, ``(..., C)``; only ``S`` carries gradient."""
    return nx.sum_(Tensor(plan.P) * prob.S, axis=-2)


def predict_all_conditions(
    patches,
    adapters: list[ConditionAdapter],
    bank: ConditionPromptBank,
    enc: TextEncoder,
    tau: float = DEFAULT_TAU,
    lam: float = DEFAULT_LAMBDA,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    text: Tensor | None = None,
) -> Tensor:
    """Conditioned predictions for every condition, stacked to ``(..., N, C)``.

    ``text`` may carry a precomputed ``embed_all(bank, enc)``.
    """
    if text is None:
        text = embed_all(bank, enc)
    rows = []
    for n, adapter in enumerate(adapters):
        prob = build_cost(adapt(adapter, patches), text[n], tau=tau, lam=lam)
        plan = sinkhorn(prob, max_iters=max_iters, tol=tol)
        rows.append(conditioned_prediction(plan, prob))
    return nx.stack(rows, axis=-2)
