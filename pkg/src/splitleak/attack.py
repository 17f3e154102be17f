"""ActInv: activation-matching inversion of the client submodel.

The attacker optimizes dummy input embeddings so that the client submodel
maps them onto the intercepted cut-layer activations, then snaps every row
to its nearest vocabulary embedding.

Prompts of different lengths are optimized together by right-padding: the
client attention is causal, so padded rows never influence real rows, and
padded rows carry zero weight in the loss. Adam acts elementwise, hence a
batched run is the same computation as independent per-prompt runs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Adam, GradTape, NonFiniteError, Rng, Tensor
from .core import tensor as T

DISTANCES = ("cosine", "euclidean")
INITS = ("sample-embedding-rows", "gaussian")


class AttackDiverged(RuntimeError):
    pass


class EnumerationCapError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 2000
    lr: float = 0.01
    distance: str = "cosine"
    init: str = "sample-embedding-rows"
    restarts: int = 0
    trace_every: int = 0
    projection: Optional[str] = None  # defaults to ``distance``

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.restarts < 0:
            raise ValueError("restarts must be non-negative")
        if self.projection is not None and self.projection not in DISTANCES:
            raise ValueError(f"projection must be one of {DISTANCES}")

    @property
    def projection_kind(self) -> str:
        return self.projection or self.distance


@dataclass
class AttackResult:
    tokens: list
    embeddings: np.ndarray
    distance: float
    trace: list = field(default_factory=list)
    wall_time: float = 0.0
    projection: str = "cosine"


def _distance_op(kind: str):
    if kind == "cosine":
        return T.cosine_distance
    if kind == "euclidean":
        return T.euclidean_distance
    raise ValueError(f"unknown distance {kind!r}")


def activation_distance(a, b, kind: str = "cosine", weights=None):
    """Row-averaged activation distance.

    Cosine: mean of ``1 - cos`` per row pair (a zero row counts as 1).
    Euclidean: mean squared row distance. Returns a float for 2-D inputs and
    an array for batched inputs.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = _distance_op(kind)(Tensor(a), Tensor(b), weights).data
    return float(out) if out.ndim == 0 else out


def project_to_tokens(h, E, kind: str = "cosine") -> np.ndarray:
    """Nearest embedding row for every row of ``h`` (ties: smallest id)."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
    E = np.asarray(E.data if isinstance(E, Tensor) else E, dtype=np.float64)
    if h.shape[-1] != E.shape[-1]:
        raise ValueError("embedding width mismatch")
    if kind == "cosine":
        nh = np.linalg.norm(h, axis=-1, keepdims=True)
        ne = np.linalg.norm(E, axis=-1)
        hu = np.divide(h, nh, out=np.zeros_like(h), where=nh > 0)
        eu = np.divide(E, ne[:, None], out=np.zeros_like(E), where=ne[:, None] > 0)
        d = 1.0 - hu @ eu.T
        d = np.where((nh <= 0) | (ne <= 0), 1.0, d)
    elif kind == "euclidean":
        d = ((h[..., :, None, :] - E) ** 2).sum(axis=-1)
    else:
        raise ValueError(f"unknown distance {kind!r}")
    return np.argmin(d, axis=-1)


def _init_rows(E: np.ndarray, L: int, Lmax: int, how: str, rng: Rng) -> np.ndarray:
    V, D = E.shape
    if how == "sample-embedding-rows":
        rows = E[rng.integers(0, V, size=L)]
        pad = E[rng.derive(1).integers(0, V, size=Lmax - L)]
    else:
        s = float(E.std())
        rows = rng.normal(size=(L, D), scale=s)
        pad = rng.derive(1).normal(size=(Lmax - L, D), scale=s)
    return np.concatenate([rows, pad], axis=0)


def invert_activations(client: Callable[[Tensor], Tensor], E, h_obs: Sequence[np.ndarray],
                       cfg: AttackConfig, rngs: Sequence[Rng], truths=None):
    """Batched embedding-space optimization.

    ``h_obs`` is a list of ``(L_i, D)`` observations and ``rngs`` one stream
    per prompt. Returns ``(embeddings, distances, traces)`` where each
    embedding is the lowest-distance iterate seen over all iterations and
    restarts.
    """
    E = np.asarray(E.data if isinstance(E, Tensor) else E, dtype=np.float64)
    obs = [np.asarray(h, dtype=np.float64) for h in h_obs]
    B = len(obs)
    lens = [h.shape[0] for h in obs]
    Lmax, D = max(lens), E.shape[1]
    target = np.zeros((B, Lmax, D))
    weights = np.zeros((B, Lmax))
    for i, h in enumerate(obs):
        target[i, :lens[i]] = h
        weights[i, :lens[i]] = 1.0
    target_t = Tensor(target)
    dist_fn = _distance_op(cfg.distance)
    proj = cfg.projection_kind

    best = np.zeros((B, Lmax, D))
    best_d = np.full(B, np.inf)
    traces = [[] for _ in range(B)]
    diverged = 0
    for restart in range(cfg.restarts + 1):
        x = np.stack([_init_rows(E, lens[i], Lmax, cfg.init, rngs[i].derive(restart))
                      for i in range(B)])
        opt = Adam(lr=cfg.lr)
        try:
            for it in range(cfg.iterations + 1):
                H = Tensor(x)
                with GradTape() as tape:
                    tape.watch(H)
                    d = dist_fn(client(H), target_t, weights)
                    loss = T.sum(d)
                dv = d.data
                better = dv < best_d
                if better.any():
                    best[better] = x[better]
                    best_d[better] = dv[better]
                if cfg.trace_every and it % cfg.trace_every == 0:
                    toks = project_to_tokens(x, E, proj)
                    for i in range(B):
                        acc = None
                        if truths is not None:
                            acc = float(np.mean(toks[i, :lens[i]] == np.asarray(truths[i])))
                        traces[i].append((restart, it, float(dv[i]), acc))
                if it == cfg.iterations:
                    break
                (g,) = tape.gradient(loss, [H])
                x = opt.update({"x": x}, {"x": g})["x"]
        except NonFiniteError:
            diverged += 1
            continue
    if diverged == cfg.restarts + 1:
        raise AttackDiverged("every restart produced a non-finite loss")
    return [best[i, :lens[i]].copy() for i in range(B)], best_d.copy(), traces


def actinv_batch(client, E, h_obs: Sequence[np.ndarray], cfg: AttackConfig,
                 rngs: Sequence[Rng], truths=None) -> list:
    t0 = time.perf_counter()
    emb, dist, traces = invert_activations(client, E, h_obs, cfg, rngs, truths)
    out = []
    wall = time.perf_counter() - t0
    for i, e in enumerate(emb):
        toks = project_to_tokens(e, E, cfg.projection_kind)
        out.append(AttackResult(tokens=[int(t) for t in toks], embeddings=e,
                                distance=max(float(dist[i]), 0.0), trace=traces[i],
                                wall_time=wall / len(emb), projection=cfg.projection_kind))
    return out


def actinv(client, E, h_obs, cfg: AttackConfig, rng: Rng, truth=None) -> AttackResult:
    """Two-phase attack on a single observation ``(L, D)``."""
    truths = None if truth is None else [truth]
    return actinv_batch(client, E, [np.asarray(h_obs)], cfg, [rng], truths)[0]


def brute_force_invert(client, E, h_obs, L: int, kind: str = "cosine",
                       cap: int = 2 ** 20, chunk: int = 4096):
    """Exhaustive search over all ``V**L`` sequences.

    Returns ``(ids, distance)``; ties resolve to the lexicographically
    smallest sequence because candidates are scanned in lexicographic order.
    """
    E = np.asarray(E.data if isinstance(E, Tensor) else E, dtype=np.float64)
    V = E.shape[0]
    total = V ** L
    if total > cap:
        raise EnumerationCapError(f"{V}^{L} = {total} candidates exceeds cap {cap}")
    target = Tensor(np.asarray(h_obs, dtype=np.float64))
    dist_fn = _distance_op(kind)
    powers = V ** np.arange(L - 1, -1, -1)
    best_d, best_k = np.inf, -1
    for start in range(0, total, chunk):
        k = np.arange(start, min(start + chunk, total))
        ids = (k[:, None] // powers) % V
        d = dist_fn(client(Tensor(E[ids])), target).data
        j = int(np.argmin(d))
        if d[j] < best_d:
            best_d, best_k = float(d[j]), int(k[j])
    ids = [int(v) for v in (best_k // powers) % V]
    return ids, max(best_d, 0.0)
