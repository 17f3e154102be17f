"""Cut-layer perturbation defenses.

Baselines perturb the transmitted activations blindly: Gaussian noise, or
zeroing the smallest-magnitude elements or token rows. PriPert instead uses
a regularized inverse Jacobian of the client submodel to choose the
perturbation that moves the attacker's reconstruction the furthest.

All maps use the row-vector convention of :mod:`splitleak.core.linalg`:
``J`` is ``(n, m)`` for ``n`` input and ``m`` activation coordinates, and
the inverse action ``G`` is ``(m, n)`` so an activation perturbation
``delta`` induces the input deviation ``delta @ G``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Rng, Tensor, jacobian, top_singular
from .core import tensor as T
from .core.linalg import DEFAULT_CAP

KINDS = ("none", "gaussian", "element-sparsify", "token-sparsify", "pripert-l0", "pripert-l2")
L0_ORDERS = ("max-impact-zeroed", "min-impact-zeroed")

#: defense level (1..5) -> Gaussian variance
GAUSSIAN_LEVELS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
#: defense level (1..5) -> zeroed fraction, shared by sparsify and pripert-l0
RATIO_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)


class DefenseError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    variance: float = 0.0
    ratio: float = 0.0
    budget: float = 1.0
    steps: int = 2
    epsilon: float = 1.0
    protected: Optional[tuple] = None
    l0_rank_order: str = "max-impact-zeroed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DefenseError(f"unknown defense kind {self.kind!r}; expected one of {KINDS}")
        if self.variance < 0:
            raise DefenseError("variance must be non-negative")
        if not 0.0 <= self.ratio <= 1.0:
            raise DefenseError("ratio must lie in [0, 1]")
        if not self.budget > 0:
            raise DefenseError("budget must be positive")
        if self.steps < 1:
            raise DefenseError("approximation steps must be >= 1")
        if not self.epsilon > 0:
            raise DefenseError("epsilon must be positive")
        if self.l0_rank_order not in L0_ORDERS:
            raise DefenseError(f"l0_rank_order must be one of {L0_ORDERS}")
        if self.protected is not None:
            object.__setattr__(self, "protected", tuple(sorted({int(p) for p in self.protected})))

    @classmethod
    def at_level(cls, kind: str, level: int, **extra) -> "DefenseSpec":
        """Map a 1..5 defense level onto the kind's strength ladder."""
        if not 1 <= level <= 5:
            raise DefenseError("defense levels run from 1 to 5")
        if kind == "gaussian":
            return cls(kind=kind, variance=GAUSSIAN_LEVELS[level - 1], **extra)
        if kind in ("element-sparsify", "token-sparsify", "pripert-l0"):
            return cls(kind=kind, ratio=RATIO_LEVELS[level - 1], **extra)
        raise DefenseError(f"{kind} has no level ladder")

    @property
    def strength(self) -> float:
        """The single parameter that matters for this kind (0 for ``none``)."""
        return {"gaussian": self.variance, "pripert-l2": self.budget,
                "none": 0.0}.get(self.kind, self.ratio)

    @property
    def label(self) -> str:
        return self.kind if self.kind == "none" else f"{self.kind}@{self.strength:g}"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["protected"] = None if self.protected is None else list(self.protected)
        return d


def _arr(h) -> np.ndarray:
    return np.array(h.data if isinstance(h, Tensor) else h, dtype=np.float64)


def gaussian_noise(h, variance: float, rng: Rng) -> np.ndarray:
    h = _arr(h)
    if variance < 0:
        raise DefenseError("variance must be non-negative")
    if variance == 0:
        return h
    return h + rng.normal(size=h.shape, scale=math.sqrt(variance))


def _zero_smallest(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` smallest scores; ties go to the lower index."""
    return np.argsort(scores, kind="stable")[:count]


def element_sparsify(h, ratio: float) -> np.ndarray:
    h = _arr(h)
    flat = h.reshape(-1)
    k = math.floor(ratio * flat.size)
    flat[_zero_smallest(np.abs(flat), k)] = 0.0
    return flat.reshape(h.shape)


def token_sparsify(h, ratio: float) -> np.ndarray:
    h = _arr(h)
    k = math.floor(ratio * h.shape[-2])
    h[..., _zero_smallest(np.linalg.norm(h, axis=-1), k), :] = 0.0
    return h


# --------------------------------------------------------------------------- PriPert


@dataclass
class InverseJacobianBundle:
    """Trapezoid-averaged regularized inverse Jacobian.

    ``G`` maps perturbations of the selected activation coordinates (the
    protected rows, or all rows) to deviations of the flattened input.
    """
    G: np.ndarray
    epsilon: float
    endpoints: int
    rows: tuple
    shape: tuple
    path: list = field(default_factory=list)

    @property
    def coords(self) -> np.ndarray:
        """Flat activation indices addressed by the rows of ``G``."""
        D = self.shape[-1]
        return (np.asarray(self.rows)[:, None] * D + np.arange(D)).reshape(-1)


def regularized_inverse(J: np.ndarray, epsilon: float) -> np.ndarray:
    """``Jᵀ(JJᵀ + εI)⁻¹``, solved in whichever dimension is smaller.

    The push-through identity ``Jᵀ(JJᵀ+εI)⁻¹ = (JᵀJ+εI)⁻¹Jᵀ`` keeps the
    linear solve at ``min(n, m)`` so restricting to fewer activation rows
    makes the bundle proportionally cheaper.
    """
    n, m = J.shape
    if n <= m:
        return np.linalg.solve(J @ J.T + epsilon * np.eye(n), J).T
    return np.linalg.solve(J.T @ J + epsilon * np.eye(m), J.T)


def _restricted(client: Callable, rows: tuple, L: int) -> Callable:
    if len(rows) == L:
        return client
    S = np.zeros((len(rows), L))
    S[np.arange(len(rows)), rows] = 1.0
    return lambda z: T.matmul(S, client(z))


def inverse_jacobian_bundle(client: Callable[[Tensor], Tensor], z, steps: int = 2,
                            epsilon: float = 1.0, propose: Optional[Callable] = None,
                            protected=None, cap: int = DEFAULT_CAP) -> InverseJacobianBundle:
    """Path-averaged ``G`` between ``z`` and the estimated reconstruction ``ẑ``.

    With one step only the endpoint at ``z`` is used. With more steps,
    ``propose(bundle)`` returns the activation perturbation the defense
    would pick from the one-step bundle; ``ẑ = z + δG`` is the deviation
    it induces, and the trapezoid rule averages ``G`` over ``steps``
    uniformly spaced points on the segment from ``z`` to ``ẑ``.
    """
    z = _arr(z)
    if steps < 1:
        raise DefenseError("steps must be >= 1")
    if not epsilon > 0:
        raise DefenseError("epsilon must be positive")
    L, D = z.shape[-2], z.shape[-1]
    rows = tuple(range(L)) if protected is None else tuple(sorted(int(r) for r in protected))
    if any(not 0 <= r < L for r in rows):
        raise DefenseError("protected row outside the sequence")
    f = _restricted(client, rows, L)
    shape = tuple(z.shape)

    def G_at(point):
        return regularized_inverse(jacobian(f, point, cap=cap, chunk=64), epsilon)

    G0 = G_at(z)
    bundle = InverseJacobianBundle(G=G0, epsilon=epsilon, endpoints=1, rows=rows,
                                   shape=shape, path=[z])
    if steps == 1 or not rows:
        return bundle
    if propose is None:
        raise DefenseError("multi-step bundles need a perturbation proposal")
    delta = propose(bundle)
    z_hat = z + (delta @ G0).reshape(shape)
    ts = np.linspace(0.0, 1.0, steps)
    w = np.full(steps, 1.0 / (steps - 1))
    w[[0, -1]] *= 0.5
    G = w[0] * G0
    path = [z]
    for t, wk in zip(ts[1:], w[1:]):
        point = z + t * (z_hat - z)
        path.append(point)
        G = G + wk * G_at(point)
    return InverseJacobianBundle(G=G, epsilon=epsilon, endpoints=steps, rows=rows,
                                 shape=shape, path=path)


def _l2_direction(bundle: InverseJacobianBundle) -> np.ndarray:
    # ‖vG‖ over unit row vectors v peaks at the top right singular vector of Gᵀ
    _, _, v = top_singular(bundle.G.T)
    return v


def l0_scores(h, bundle: InverseJacobianBundle) -> np.ndarray:
    """Input deviation norm induced by zeroing each selected coordinate alone."""
    hv = _arr(h).reshape(-1)[bundle.coords]
    return np.abs(hv) * np.linalg.norm(bundle.G, axis=1)


def _l0_choice(h, bundle: InverseJacobianBundle, ratio: float, order: str) -> np.ndarray:
    """Flat activation indices that pripert-l0 zeroes."""
    s = l0_scores(h, bundle)
    k = math.floor(ratio * s.size)
    if order == "max-impact-zeroed":
        # largest scores first, ties by ascending index
        pick = np.lexsort((np.arange(s.size), -s))[:k]
    else:
        pick = _zero_smallest(s, k)
    return bundle.coords[np.sort(pick)]


def pripert_l2(h, bundle: InverseJacobianBundle, budget: float) -> np.ndarray:
    h = _arr(h)
    if not budget > 0:
        raise DefenseError("budget must be positive")
    out = h.reshape(-1).copy()
    out[bundle.coords] += budget * _l2_direction(bundle)
    return out.reshape(h.shape)


def pripert_l0(h, bundle: InverseJacobianBundle, ratio: float,
               order: str = "max-impact-zeroed") -> np.ndarray:
    h = _arr(h)
    out = h.reshape(-1).copy()
    out[_l0_choice(h, bundle, ratio, order)] = 0.0
    return out.reshape(h.shape)


def _proposal(spec: DefenseSpec, h: np.ndarray) -> Callable:
    """The step-one perturbation, in the coordinates of ``bundle.G``."""
    if spec.kind == "pripert-l2":
        return lambda b: spec.budget * _l2_direction(b)

    def l0(b):
        flat = h.reshape(-1)
        delta = np.zeros(b.coords.size)
        chosen = set(_l0_choice(h, b, spec.ratio, spec.l0_rank_order).tolist())
        for i, c in enumerate(b.coords):
            if c in chosen:
                delta[i] = -flat[c]
        return delta
    return l0


@dataclass
class DefenseContext:
    """What PriPert needs besides the activations: ``F_C`` and its input."""
    client: Callable[[Tensor], Tensor]
    z: np.ndarray
    rng: Optional[Rng] = None


def apply_defense(h, spec: DefenseSpec, context: Optional[DefenseContext] = None,
                  rng: Optional[Rng] = None) -> np.ndarray:
    h = _arr(h)
    kind = spec.kind
    if kind == "none":
        return h
    if kind == "gaussian":
        rng = rng or (context.rng if context else None)
        if rng is None:
            raise DefenseError("gaussian noise needs an rng stream")
        return gaussian_noise(h, spec.variance, rng)
    if kind == "element-sparsify":
        return element_sparsify(h, spec.ratio)
    if kind == "token-sparsify":
        return token_sparsify(h, spec.ratio)
    if context is None:
        raise DefenseError(f"{kind} requires the client map and its input")
    if spec.protected is not None and not spec.protected:
        return h
    bundle = inverse_jacobian_bundle(context.client, context.z, steps=spec.steps,
                                     epsilon=spec.epsilon, propose=_proposal(spec, h),
                                     protected=spec.protected)
    if kind == "pripert-l2":
        return pripert_l2(h, bundle, spec.budget)
    return pripert_l0(h, bundle, spec.ratio, spec.l0_rank_order)


# --------------------------------------------------------------------------- linear-map guarantee


@dataclass
class Theorem2Report:
    delta_norm: float
    deviation_norm: float
    bound: float
    operator_norm: float
    bound_holds: bool
    nn_condition: bool
    nn_fails: Optional[bool]
    recovered: Optional[int]


def operator_norm(A: np.ndarray, q) -> float:
    """Smallest ``C`` with ``‖xA‖_q ≤ C‖x‖_q`` for row vectors ``x``."""
    return float(np.linalg.norm(np.asarray(A, dtype=np.float64).T, ord=q))


def theorem2_verify(A, E, z, budget: float, q=2, delta=None, rng: Optional[Rng] = None,
                    rel_tol: float = 1e-12) -> Theorem2Report:
    """Check the reconstruction-error floor for a linear client ``h = zA``.

    ``delta`` defaults to the budget-saturating perturbation aimed so the
    exact inverse moves ``z`` straight toward its nearest other embedding.
    Under that aim, a budget above ``C·d_min/2`` must break nearest-neighbour
    recovery of ``z``; the report records whether it does.
    """
    A = np.asarray(A, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if A.shape[0] != A.shape[1]:
        raise DefenseError("linear client map must be square")
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise DefenseError("linear client map is singular")
    A_inv = np.linalg.inv(A)
    C = operator_norm(A, q)
    d = np.linalg.norm(E - z, ord=q, axis=1)
    others = np.flatnonzero(d > 0)
    aimed = delta is None
    if aimed:
        if others.size == 0:
            raise DefenseError("need at least one embedding distinct from z")
        e_min = E[others[np.argmin(d[others])]]
        direction = (e_min - z) @ A
        delta = budget * direction / np.linalg.norm(direction, ord=q)
    delta = np.asarray(delta, dtype=np.float64)
    dn = float(np.linalg.norm(delta, ord=q))
    if dn > budget * (1 + rel_tol):
        raise DefenseError("perturbation exceeds the budget")
    Delta = delta @ A_inv
    Dn = float(np.linalg.norm(Delta, ord=q))
    bound = dn / C
    holds = Dn >= bound * (1 - rel_tol)
    d_min = float(d[others].min()) if others.size else math.inf
    cond = aimed and budget > C * d_min / 2
    recovered = nn_fails = None
    if aimed:
        z_hat = z + Delta
        recovered = int(np.argmin(np.linalg.norm(E - z_hat, ord=q, axis=1)))
        nn_fails = bool(np.linalg.norm(E[recovered] - z, ord=q) > 0)
    return Theorem2Report(delta_norm=dn, deviation_norm=Dn, bound=bound, operator_norm=C,
                          bound_holds=bool(holds), nn_condition=bool(cond),
                          nn_fails=nn_fails, recovered=recovered)
