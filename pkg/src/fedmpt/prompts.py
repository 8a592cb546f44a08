"""Condition prompts: learnable context around fixed condition and class names.

Each prompt follows the layout::

    [L_1]..[L_bc] <condition name> [L_1]..[L_bk] <class name>

where the first block of learnable tokens belongs to one condition and the
second block is shared by every class and every condition.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import TextEncoder, encode_text, name_tokens
from .numerics import DimensionError, Parameter, Tensor

DEFAULT_CONDITIONS = ("background", "position", "shape", "action")


class ConditionPromptBank:
    def __init__(
        self,
        conditions: Sequence[str],
        classes: Sequence[str],
        enc: TextEncoder,
        beta_cond: int = 4,
        beta_cls: int = 4,
        seed: int = 0,
        init_std: float = 0.02,
    ):
        self.conditions = list(conditions)
        self.classes = list(classes)
        self.N, self.C = len(self.conditions), len(self.classes)
        self.beta_cond, self.beta_cls = beta_cond, beta_cls
        self.token_dim = enc.token_dim
        rng = np.random.default_rng([seed, 0xC0D])
        self.cond_tokens = Parameter(
            rng.normal(0.0, init_std, (self.N, beta_cond, self.token_dim)), "prompt.cond"
        )
        self.cls_tokens = Parameter(
            rng.normal(0.0, init_std, (beta_cls, self.token_dim)), "prompt.cls"
        )
        self.cond_name_tokens = np.stack([name_tokens(enc, c) for c in self.conditions])
        self.class_name_tokens = np.stack([name_tokens(enc, c) for c in self.classes])

    @property
    def prompt_length(self) -> int:
        return self.beta_cond + 1 + self.beta_cls + 1

    def parameters(self) -> list[Parameter]:
        return [self.cond_tokens, self.cls_tokens]

    def assemble_prompt(self, n: int, c: int) -> Tensor:
        """Token sequence of shape ``(prompt_length, token_dim)`` for one (condition, class)."""
        if not (0 <= n < self.N and 0 <= c < self.C):
            raise IndexError(f"prompt index (n={n}, c={c}) outside ({self.N}, {self.C})")
        return nx.concat(
            [
                self.cond_tokens[n],
                Tensor(self.cond_name_tokens[n : n + 1]),
                self.cls_tokens,
                Tensor(self.class_name_tokens[c : c + 1]),
            ],
            axis=0,
        )

    def assemble_all(self) -> Tensor:
        """All prompts at once, shape ``(N, C, prompt_length, token_dim)``."""
        N, C, d = self.N, self.C, self.token_dim
        parts = [
            nx.broadcast_to(nx.reshape(self.cond_tokens, (N, 1, self.beta_cond, d)), (N, C, self.beta_cond, d)),
            Tensor(np.broadcast_to(self.cond_name_tokens[:, None, None, :], (N, C, 1, d))),
            nx.broadcast_to(self.cls_tokens, (N, C, self.beta_cls, d)),
            Tensor(np.broadcast_to(self.class_name_tokens[None, :, None, :], (N, C, 1, d))),
        ]
        return nx.concat(parts, axis=2)


def embed_all(bank: ConditionPromptBank, enc: TextEncoder) -> Tensor:
    """Unit-norm text embeddings for every (condition, class): ``(N, C, D)``."""
    if bank.token_dim != enc.token_dim:
        raise DimensionError(
            f"prompt token_dim {bank.token_dim} does not match encoder {enc.token_dim}"
        )
    return encode_text(enc, bank.assemble_all())
