"""Parameter container, deterministic initialization, and checkpoint IO.

Initialization draws every matrix entry from one SplitMix64 stream seeded
with ``init_seed``, uniform in (-r, r) with r = sqrt(6 / (rows + cols)).
Fill order: token_embedding row-major, then per layer W_q, W_k, W_v, W_o,
W_1, W_2; norm gains are set to 1 and consume no draws.

Checkpoint format (little-endian): magic "CAGW", version u32, config_hash
u64, then every tensor as float32 in the fill order above with the gains
appended last (per layer attention gain then ffn gain, then the final gain).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, config_hash
from .errors import CorruptionError, FormatError, IncompatibilityError
from .rng import fill_uniform

WEIGHTS_MAGIC = b"CAGW"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray


@dataclass
class Weights:
    config: ModelConfig
    token_embedding: np.ndarray
    layers: list[LayerWeights]
    final_gain: np.ndarray

    def tensors(self):
        """(name, array) pairs in checkpoint order."""
        yield "token_embedding", self.token_embedding
        for i, layer in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
                yield f"layers.{i}.{name}", getattr(layer, name)
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.attn_gain", layer.attn_gain
            yield f"layers.{i}.ffn_gain", layer.ffn_gain
        yield "final_gain", self.final_gain

    @property
    def n_params(self) -> int:
        return sum(int(a.size) for _, a in self.tensors())

    @property
    def hash(self) -> int:
        return config_hash(self.config)


def _drawn_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    d, f = config.d_model, config.d_ffn
    shapes = [(config.vocab_size, d)]
    for _ in range(config.n_layers):
        shapes += [(d, d), (d, d), (d, d), (d, d), (d, f), (f, d)]
    return shapes


def init_weights(config: ModelConfig) -> Weights:
    """Deterministic init from config.init_seed; see module docstring."""
    arrays = []
    offset = 0
    for rows, cols in _drawn_shapes(config):
        r = math.sqrt(6.0 / (rows + cols))
        size = rows * cols
        vals = fill_uniform(config.init_seed, offset, size, -r, r)
        offset += size
        arrays.append(vals.reshape(rows, cols).astype(np.float32))

    d = config.d_model
    layers = []
    for i in range(config.n_layers):
        wq, wk, wv, wo, w1, w2 = arrays[1 + 6 * i: 7 + 6 * i]
        layers.append(LayerWeights(
            wq=wq, wk=wk, wv=wv, wo=wo, w1=w1, w2=w2,
            attn_gain=np.ones(d, dtype=np.float32),
            ffn_gain=np.ones(d, dtype=np.float32)))
    return Weights(config=config, token_embedding=arrays[0], layers=layers,
                   final_gain=np.ones(d, dtype=np.float32))


def save_weights(weights: Weights, path) -> int:
    """Write a checkpoint; returns bytes written."""
    blob = bytearray(_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, weights.hash))
    for _, arr in weights.tensors():
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_weights(path, config: ModelConfig) -> Weights:
    """Read a checkpoint written for exactly this config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the header")
    magic, version, stored_hash = _HEADER.unpack_from(blob)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if stored_hash != config_hash(config):
        raise IncompatibilityError(
            f"{path}: checkpoint was written for a different model config")

    out = init_weights(config)
    expected = _HEADER.size + 4 * out.n_params
    if len(blob) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} bytes, found {len(blob)}")
    off = _HEADER.size
    for _, arr in out.tensors():
        n = 4 * arr.size
        vals = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=off)
        arr[...] = vals.reshape(arr.shape)
        off += n
    return out
