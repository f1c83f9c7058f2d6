"""Answer-quality metrics: exact match and token-level F1.

Both compare a prediction against every gold answer after normalization
(lowercase, ASCII punctuation removed, whitespace collapsed) and keep the
best score.
"""

from __future__ import annotations

import string
from collections import Counter

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_text(s: str) -> str:
    return " ".join(s.lower().translate(_PUNCT_TABLE).split())


def exact_match(prediction: str, golds) -> float:
    pred = normalize_text(prediction)
    return float(any(pred == normalize_text(g) for g in golds))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    n_same = sum(common.values())
    if n_same == 0:
        return 0.0
    precision = n_same / len(pred_tokens)
    recall = n_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, golds) -> float:
    pred_tokens = normalize_text(prediction).split()
    return max(_f1(pred_tokens, normalize_text(g).split()) for g in golds)
