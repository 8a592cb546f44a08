"""Trainable models on top of the frozen encoders.

Both models consume precomputed patch embeddings ``(B, M, D)`` and emit
per-class probabilities ``(B, C)``.  Their learnable state is exposed as an
ordered ``name -> Parameter`` mapping, which is exactly what federated
averaging exchanges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .adapters import ConditionAdapter, GateRouter, fuse_predictions, gate_weights
from .baseline import BaselinePromptBank, baseline_predict
from .encoders import TextEncoder
from .numerics import Parameter, Tensor
from .objectives import AslConfig, asl_loss, calibrate
from .prompts import ConditionPromptBank, embed_all
from .transport import predict_all_conditions


@dataclass(frozen=True)
class ModelHyper:
    tau: float = 4.0
    lam: float = 0.2
    beta_cond: int = 4
    beta_cls: int = 4
    beta_baseline: int = 8
    D_s: int = 16
    sinkhorn_iters: int = 200
    sinkhorn_tol: float = 1e-8
    alpha_init: float = 5.0
    # similarities enter every softmax as logit_scale * cosine, as in CLIP
    logit_scale: float = 25.0


class _Model:
    kind: str
    C: int
    M: int

    def __init__(self, asl: AslConfig):
        self.asl = asl
        self.params: dict[str, Parameter] = {}

    def _register(self, *params: Parameter) -> None:
        for p in params:
            if p.name in self.params:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self.params[p.name] = p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data[...] = value

    def forward(self, patches) -> Tensor:
        raise NotImplementedError

    def loss(self, patches, labels) -> Tensor:
        return asl_loss(self.forward(patches), labels, self.asl)

    def predict(self, patches, batch: int = 256) -> np.ndarray:
        patches = np.asarray(patches)
        return np.concatenate(
            [self.forward(patches[i : i + batch]).data for i in range(0, len(patches), batch)]
        )


class FedMPTModel(_Model):
    """Condition prompts, per-condition adapters + transport, gated fusion."""

    kind = "fedmpt"

    def __init__(
        self,
        conditions: Sequence[str],
        classes: Sequence[str],
        text_encoder: TextEncoder,
        M: int,
        hyper: ModelHyper = ModelHyper(),
        asl: AslConfig = AslConfig(),
        seed: int = 0,
    ):
        super().__init__(asl)
        self.hyper = hyper
        self.text_encoder = text_encoder
        self.M = M
        D = text_encoder.D
        self.bank = ConditionPromptBank(
            conditions, classes, text_encoder, hyper.beta_cond, hyper.beta_cls, seed=seed
        )
        self.C, self.N = self.bank.C, self.bank.N
        rng = np.random.default_rng([seed, 0xADA])
        self.adapters = [ConditionAdapter(n, D, hyper.D_s, rng) for n in range(self.N)]
        self.router = GateRouter(D, hyper.D_s, self.N, rng)
        self.alpha = Parameter(np.array([hyper.alpha_init]), "calibrate.alpha")
        self.bias = Parameter(np.zeros(1), "calibrate.bias")
        self._register(*self.bank.parameters())
        for adapter in self.adapters:
            self._register(*adapter.parameters())
        self._register(*self.router.parameters(), self.alpha, self.bias)

    def condition_predictions(self, patches) -> Tensor:
        h = self.hyper
        return predict_all_conditions(
            patches, self.adapters, self.bank, self.text_encoder,
            tau=h.tau / h.logit_scale, lam=h.lam, max_iters=h.sinkhorn_iters, tol=h.sinkhorn_tol,
            text=embed_all(self.bank, self.text_encoder),
        )

    def forward(self, patches) -> Tensor:
        psi = self.condition_predictions(patches)
        fused = fuse_predictions(gate_weights(self.router, patches), psi)
        # uniform transport scores sit at 1/(M*C); centre the head there
        return calibrate(fused, self.alpha, scale=self.C * self.M, bias=self.bias)


class BaselineModel(_Model):
    kind = "baseline"

    def __init__(
        self,
        classes: Sequence[str],
        text_encoder: TextEncoder,
        M: int,
        hyper: ModelHyper = ModelHyper(),
        asl: AslConfig = AslConfig(),
        seed: int = 0,
    ):
        super().__init__(asl)
        self.hyper = hyper
        self.text_encoder = text_encoder
        self.M = M
        self.bank = BaselinePromptBank(classes, text_encoder, hyper.beta_baseline, seed=seed)
        self.C = self.bank.C
        self.alpha = Parameter(np.array([hyper.alpha_init]), "calibrate.alpha")
        # bias = alpha puts zero mean similarity at p = 0.5
        self.bias = Parameter(np.array([hyper.alpha_init]), "calibrate.bias")
        self._register(*self.bank.parameters(), self.alpha, self.bias)

    def forward(self, patches) -> Tensor:
        h = self.hyper
        score = baseline_predict(patches, self.bank.embed(self.text_encoder), h.tau / h.logit_scale)
        return calibrate(score, self.alpha, scale=self.C / self.M, bias=self.bias)


def build_model(kind: str, conditions, classes, text_encoder, M, hyper=ModelHyper(), asl=AslConfig(), seed=0) -> _Model:
    if kind == "fedmpt":
        return FedMPTModel(conditions, classes, text_encoder, M, hyper, asl, seed)
    if kind == "baseline":
        return BaselineModel(classes, text_encoder, M, hyper, asl, seed)
    raise ValueError(f"unknown model kind {kind!r}")
