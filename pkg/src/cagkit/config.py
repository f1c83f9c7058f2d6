"""Model and training configuration plus the portable config digest."""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

from .errors import ValidationError
from .rng import GOLDEN_GAMMA, MASK64, mix64
from .tokenizer import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    d_ffn: int = 256
    vocab_size: int = VOCAB_SIZE
    max_context: int = 8192
    rope_theta: float = 10000.0
    init_seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "head_dim", "d_ffn",
                     "max_context"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValidationError(
                f"d_model ({self.d_model}) must equal n_heads * head_dim "
                f"({self.n_heads} * {self.head_dim})")
        if self.vocab_size != VOCAB_SIZE:
            raise ValidationError(
                f"vocab_size must be {VOCAB_SIZE} (256 bytes + 3 specials)")
        if self.head_dim % 2 != 0:
            raise ValidationError("head_dim must be even for rotary pairing")
        if self.rope_theta <= 0:
            raise ValidationError("rope_theta must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    steps: int = 5000
    grad_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValidationError("adam_eps must be positive")
        if self.batch_size <= 0 or self.steps <= 0:
            raise ValidationError("batch_size and steps must be positive")
        if self.grad_clip_norm <= 0:
            raise ValidationError("grad_clip_norm must be positive")


def config_hash(config: ModelConfig) -> int:
    """Order-sensitive 64-bit digest of every ModelConfig field.

    Integers hash as their 64-bit value, rope_theta as its float64 bit
    pattern; each field is folded through the SplitMix64 output mix.
    """
    h = 0
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, float):
            v = struct.unpack("<Q", struct.pack("<d", v))[0]
        h = mix64((h + GOLDEN_GAMMA + int(v)) & MASK64)
    return h
