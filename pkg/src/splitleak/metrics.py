"""Reconstruction quality, correlation, and a proxy for downstream utility.

Precision and recall count tokens as a multiset (bag), not positionally.
ROUGE-L is the balanced F-measure over the longest common subsequence.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ReconScore:
    precision: float
    recall: float
    rouge_l: float


@dataclass(frozen=True)
class UtilityScore:
    agreement: float
    kl_divergence: float


def _check(pred, ref):
    if len(pred) == 0 or len(ref) == 0:
        raise ValueError("metrics need non-empty token sequences")


def precision_recall(pred: Sequence[int], ref: Sequence[int]) -> tuple:
    """Bag overlap as percentages ``(precision, recall)``."""
    _check(pred, ref)
    c = sum((Counter(pred) & Counter(ref)).values())
    return 100.0 * c / len(pred), 100.0 * c / len(ref)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pred: Sequence[int], ref: Sequence[int]) -> float:
    _check(pred, ref)
    ell = lcs_length(list(pred), list(ref))
    if ell == 0:
        return 0.0
    p, r = ell / len(pred), ell / len(ref)
    return 2 * p * r / (p + r)


def score(pred: Sequence[int], ref: Sequence[int]) -> ReconScore:
    p, r = precision_recall(pred, ref)
    return ReconScore(precision=p, recall=r, rouge_l=rouge_l(pred, ref))


def pearson(xs, ys) -> tuple:
    """Sample correlation ``(r, degenerate)``; ``(0.0, True)`` if a variance is zero."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r)), False


def mean_std(values) -> tuple:
    """Mean, sample standard deviation (ddof=1, 0 for a single value) and standard error."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, math.nan
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd, sd / math.sqrt(v.size)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def next_token_comparison(clean_logits: np.ndarray, defended_logits: np.ndarray) -> tuple:
    """``(agree, kl)`` for the last-position next-token distributions."""
    a = clean_logits[..., -1, :]
    b = defended_logits[..., -1, :]
    lp, lq = _log_softmax(a), _log_softmax(b)
    kl = float(np.sum(np.exp(lp) * (lp - lq), axis=-1))
    return bool(np.argmax(a) == np.argmax(b)), max(kl, 0.0)


def utility_proxy(model, prompts, defend) -> UtilityScore:
    """Greedy next-token agreement and KL(clean || defended) over prompts.

    ``defend(index, ids, h)`` returns the defended cut-layer activations of
    prompt ``index``; the server half then runs on them.
    """
    if len(prompts) == 0:
        raise ValueError("utility_proxy needs at least one prompt")
    agree, kls = [], []
    for i, ids in enumerate(prompts):
        h = model.client_forward(model.embed(ids)).data
        clean = model.server_forward(h).data
        noisy = model.server_forward(defend(i, ids, h)).data
        a, k = next_token_comparison(clean, noisy)
        agree.append(a)
        kls.append(k)
    return UtilityScore(agreement=float(np.mean(agree)), kl_divergence=float(np.mean(kls)))
