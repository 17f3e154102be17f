from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..core import Adam, GradTape, Rng
from ..core import tensor as T
from .transformer import SplitModel

log = logging.getLogger(__name__)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    converged: bool = True

    def smoothed(self, window: int = 20) -> np.ndarray:
        x = np.asarray(self.losses)
        if x.size < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def pad_batch(seqs, pad_id: int = 0):
    """Right-pad id lists; returns ``(ids, mask)`` arrays."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def lm_loss(model: SplitModel, ids: np.ndarray, mask: np.ndarray) -> T.Tensor:
    logits = model.forward(ids[:, :-1])
    return T.cross_entropy(logits, ids[:, 1:], weights=mask[:, 1:])


def toy_train(model: SplitModel, sequences, steps: int, lr: float = 0.01,
              batch_size: int = 32, seed: int = 0):
    """Next-token cross-entropy training with Adam; returns ``(model, TrainLog)``.

    Causal attention makes right padding invisible to real positions, so
    padded targets are simply masked out of the loss.
    """
    seqs = [list(s) for s in sequences if len(s) >= 2]
    if not seqs:
        raise ValueError("toy_train needs a non-empty corpus of sequences with >= 2 tokens")
    maxlen = model.config.max_seq_len
    seqs = [s[:maxlen] for s in seqs]
    rng = Rng(seed, (0x7A11,))
    opt = Adam(lr=lr)
    params = {k: v.data for k, v in model.parameters().items()}
    tlog = TrainLog()
    for _ in range(steps):
        pick = rng.integers(0, len(seqs), size=min(batch_size, len(seqs)))
        ids, mask = pad_batch([seqs[i] for i in pick])
        current = model.with_parameters(params)
        leaves = current.parameters()
        with GradTape() as tape:
            for t in leaves.values():
                tape.watch(t)
            loss = lm_loss(current, ids, mask)
        grads = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
        tlog.losses.append(loss.item())
        params = opt.update(params, grads)
    sm = tlog.smoothed()
    if sm.size >= 2 and not sm[-1] < sm[0]:
        tlog.converged = False
        log.warning("toy_train did not reduce the smoothed loss (%.4f -> %.4f)", sm[0], sm[-1])
    return model.with_parameters(params), tlog
