"""Single-prompt comparison model: class-softmax weighted patch aggregation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import TextEncoder, encode_text, name_tokens
from .numerics import Parameter, Tensor


class BaselinePromptBank:
    """One shared block of learnable context tokens followed by the class name."""

    def __init__(self, classes: Sequence[str], enc: TextEncoder, beta: int = 8, seed: int = 0, init_std: float = 0.02):
        self.classes = list(classes)
        self.C = len(self.classes)
        self.beta = beta
        rng = np.random.default_rng([seed, 0xBA5E])
        self.ctx_tokens = Parameter(rng.normal(0.0, init_std, (beta, enc.token_dim)), "prompt.ctx")
        self.class_name_tokens = np.stack([name_tokens(enc, c) for c in self.classes])

    def parameters(self) -> list[Parameter]:
        return [self.ctx_tokens]

    def embed(self, enc: TextEncoder) -> Tensor:
        C, d = self.C, enc.token_dim
        tokens = nx.concat(
            [
                nx.broadcast_to(self.ctx_tokens, (C, self.beta, d)),
                Tensor(self.class_name_tokens[:, None, :]),
            ],
            axis=1,
        )
        return encode_text(enc, tokens)


def baseline_predict(patches, text, tau: float = 4.0) -> Tensor:
    """Sum over patches of ``softmax_c(s_m / tau)_c * s_mc``.

    The softmax runs over classes for each patch, so with every similarity
    equal to ``s0`` each class scores ``M * s0 / C``.
    """
    if not tau > 0:
        raise ValueError(f"temperature tau must be positive, got {tau}")
    s = nx.as_tensor(patches) @ nx.transpose(nx.as_tensor(text))
    w = nx.softmax(s, axis=-1, temperature=tau)
    return nx.sum_(w * s, axis=-2)
