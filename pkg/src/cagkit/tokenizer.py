"""Byte-level tokenizer: 256 raw byte values plus three specials.

Text maps to its UTF-8 bytes; ids 256..258 are reserved for BOS, EOS, and the
document/query separator and never appear in encoded text.
"""

from __future__ import annotations

from .errors import MalformedSequenceError

N_BYTES = 256
BOS = 256
EOS = 257
SEP = 258
VOCAB_SIZE = 259

SPECIALS = (BOS, EOS, SEP)


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes of ``text`` as token ids; adds no specials."""
    return list(text.encode("utf-8"))


def detokenize(tokens) -> str:
    """Inverse of tokenize. Rejects ids outside the byte range."""
    toks = [int(t) for t in tokens]
    for t in toks:
        if not 0 <= t < N_BYTES:
            raise MalformedSequenceError(
                f"token id {t} is not a byte value and cannot be decoded")
    return bytes(toks).decode("utf-8", errors="replace")


def decode_bytes(tokens) -> str:
    """Decode only the byte-valued tokens, silently dropping specials."""
    return bytes(int(t) for t in tokens if 0 <= int(t) < N_BYTES).decode(
        "utf-8", errors="replace")
