"""Frozen, seeded stand-ins for the visual and text towers of a dual encoder.

Both encoders are pure functions of their seed and dimensions.  Their weights
are plain arrays (not :class:`~fedmpt.numerics.Parameter`), so nothing can
ever push a gradient into them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


@dataclass(frozen=True)
class VisualEncoder:
    seed: int
    input_dim: int = 48
    M: int = 16
    D: int = 32
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng([int(self.seed), 0x5EED_7157])
        w = rng.standard_normal((self.M, self.input_dim, self.D)) / np.sqrt(self.input_dim)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "input_dim": self.input_dim, "M": self.M, "D": self.D}

    @classmethod
    def from_dict(cls, d: dict) -> "VisualEncoder":
        return cls(**d)


@dataclass(frozen=True)
class TextEncoder:
    seed: int
    token_dim: int = 32
    D: int = 32
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng([int(self.seed), 0x7E47])
        w = rng.standard_normal((self.token_dim, self.D)) / np.sqrt(self.token_dim)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "token_dim": self.token_dim, "D": self.D}

    @classmethod
    def from_dict(cls, d: dict) -> "TextEncoder":
        return cls(**d)


def encode_visual(enc: VisualEncoder, x) -> Tensor:
    """Map raw inputs ``(..., input_dim)`` to unit-norm patches ``(..., M, D)``.

    A zero input has no direction; each of its rows becomes ``1/sqrt(D)``.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape[-1] != enc.input_dim:
        raise DimensionError(f"encode_visual: expected last dim {enc.input_dim}, got {x.shape}")
    raw = np.einsum("...i,mid->...md", x, enc.weights)
    return Tensor(nx.l2_normalize_rows(raw).data)


def encode_text(enc: TextEncoder, tokens) -> Tensor:
    """Embed token sequences ``(..., T, token_dim)`` into unit vectors ``(..., D)``.

    Gradients reach any learnable tokens in the sequence.
    """
    tokens = nx.as_tensor(tokens)
    if tokens.ndim < 2 or tokens.shape[-2] == 0:
        raise ValueError("encode_text: token sequence must be non-empty")
    if tokens.shape[-1] != enc.token_dim:
        raise DimensionError(
            f"encode_text: expected token_dim {enc.token_dim}, got {tokens.shape}"
        )
    pooled = nx.mean(tokens, axis=-2, keepdims=True)
    out = nx.l2_normalize_rows(nx.matmul(pooled, Tensor(enc.weights)))
    return nx.reshape(out, out.shape[:-2] + (enc.D,))


def name_tokens(enc: TextEncoder, name: str) -> np.ndarray:
    """Stable pseudo-token for a name, entries uniform in [-1, 1]."""
    if not name:
        raise ValueError("name must be non-empty")
    digest = hashlib.blake2b(f"{enc.seed}:{name}".encode(), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.uniform(-1.0, 1.0, enc.token_dim)
