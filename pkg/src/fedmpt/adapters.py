"""Per-condition low-rank adapters and the condition gate."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Parameter, Tensor


class ConditionAdapter:
    """Down/up projection pair giving condition ``n`` its own patch space.

    ``W_down`` and ``W_up`` use scaled Gaussian init so the adapted rows start
    well away from the zero vector (a zero up-projection would sit on the
    normalization's degenerate branch, which passes no gradient).
    """

    def __init__(self, n: int, D: int, D_s: int, rng: np.random.Generator):
        if not 0 < D_s <= D:
            raise ValueError(f"adapter rank D_s={D_s} must lie in (0, D={D}]")
        self.n = n
        self.W_down = Parameter(rng.normal(0.0, 1.0 / np.sqrt(D), (D, D_s)), f"adapter.{n}.down")
        self.W_up = Parameter(rng.normal(0.0, 1.0 / np.sqrt(D_s), (D_s, D)), f"adapter.{n}.up")

    def parameters(self) -> list[Parameter]:
        return [self.W_down, self.W_up]


class GateRouter:
    def __init__(self, D: int, D_s: int, N: int, rng: np.random.Generator, init_std: float = 0.02):
        self.W_down = Parameter(rng.normal(0.0, init_std, (D, D_s)), "gate.down")
        # zero up-projection: every condition starts with weight 1/N
        self.W_up = Parameter(np.zeros((D_s, N)), "gate.up")

    @property
    def N(self) -> int:
        return self.W_up.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.W_down, self.W_up]


def adapt(adapter: ConditionAdapter, patches) -> Tensor:
    """Project patches ``(..., M, D)`` through the adapter and renormalize rows."""
    patches = nx.as_tensor(patches)
    if patches.shape[-1] != adapter.W_down.shape[0]:
        raise DimensionError(
            f"adapt: patch dim {patches.shape[-1]} != adapter dim {adapter.W_down.shape[0]}"
        )
    return nx.l2_normalize_rows(patches @ adapter.W_down @ adapter.W_up)


def gate_weights(router: GateRouter, patches) -> Tensor:
    """Softmax mixture weights ``(..., N)`` from mean-pooled patches ``(..., M, D)``."""
    pooled = nx.mean(nx.as_tensor(patches), axis=-2, keepdims=True)
    logits = pooled @ router.W_down @ router.W_up
    logits = nx.reshape(logits, logits.shape[:-2] + (router.N,))
    return nx.softmax(logits, axis=-1)


def fuse_predictions(weights, per_condition) -> Tensor:
    """Convex combination over conditions: ``(..., N)`` x ``(..., N, C)`` -> ``(..., C)``."""
    weights, per_condition = nx.as_tensor(weights), nx.as_tensor(per_condition)
    if weights.shape[-1] != per_condition.shape[-2] or weights.shape[:-1] != per_condition.shape[:-2]:
        raise DimensionError(
            f"fuse_predictions: weights {weights.shape} vs predictions {per_condition.shape}"
        )
    w = nx.reshape(weights, weights.shape + (1,))
    return nx.sum_(w * per_condition, axis=-2)
