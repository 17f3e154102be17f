"""Layer sensitivity through the eigenstructure of ``JJᵀ``.

For a layer with Jacobian ``J`` (``n`` inputs, ``m`` outputs, row-vector
convention) and eigenpairs ``(σ_i, μ_i)`` of ``JJᵀ``, the perturbation
amplification factor of an output perturbation ``δ`` is

    PAF(δ) = Σ_i | ‖J‖₂ · cos θ_i / √(σ_i + 1) |,

where ``θ_i`` is the angle between ``δJᵀ`` and ``μ_i``. It is averaged over
Gaussian ``δ`` and over operating points drawn from a corpus.

Every sub-layer in the taxonomy acts on token rows independently, so its
full ``(L·n, L·m)`` Jacobian is block diagonal. The code keeps the per-token
blocks and evaluates the exact full-Jacobian quantities from them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Rng, row_jacobians, sym_eig
from .metrics import pearson

#: δ draws per operating point when a model layer is analysed
DEFAULT_DRAWS = 64
#: operating points per layer
DEFAULT_INPUTS = 100
#: total draws for a single explicit Jacobian (same overall budget as a layer)
DEFAULT_MATRIX_DRAWS = DEFAULT_DRAWS * DEFAULT_INPUTS
NULL_TOL = 1e-10


@dataclass
class Spectrum:
    """Per-token eigen-data of ``J_b J_bᵀ`` for a block-diagonal Jacobian."""
    blocks: np.ndarray      # (B, n, m)
    values: np.ndarray      # (B, n) descending per block
    vectors: np.ndarray     # (B, n, n) columns are eigenvectors

    @classmethod
    def of(cls, J) -> "Spectrum":
        J = np.asarray(J, dtype=np.float64)
        if J.ndim == 2:
            J = J[None]
        vals, vecs = sym_eig(J @ np.swapaxes(J, -1, -2))
        return cls(blocks=J, values=np.clip(vals, 0.0, None), vectors=vecs)

    @property
    def sigma_max(self) -> float:
        return float(self.values.max())

    @property
    def spectral_norm(self) -> float:
        return math.sqrt(self.sigma_max)

    def nonzero(self) -> np.ndarray:
        return self.values[self.values > NULL_TOL * max(self.sigma_max, 0.0)]

    @property
    def degenerate(self) -> bool:
        return self.sigma_max == 0.0

    def cosines(self, deltas: np.ndarray) -> tuple:
        """``cos θ_i`` for each draw and ``‖δJᵀ‖``; ``deltas`` is ``(k, B, m)``."""
        y = np.einsum("kbm,bnm->kbn", deltas, self.blocks)          # δJᵀ per block
        coef = np.einsum("kbn,bni->kbi", y, self.vectors)           # components on μ_i
        norm = np.sqrt((y ** 2).sum(axis=(1, 2)))
        safe = np.where(norm > 0, norm, 1.0)
        return coef / safe[:, None, None], norm

    def paf_terms(self, deltas: np.ndarray) -> np.ndarray:
        if self.degenerate:
            return np.zeros(len(deltas))
        cos, _ = self.cosines(deltas)
        w = self.spectral_norm / np.sqrt(self.values + 1.0)
        return np.abs(cos * w).sum(axis=(1, 2))

    def direction_gain(self, deltas: np.ndarray) -> np.ndarray:
        """Amplification of each sampled direction, ``‖J‖₂·√(Σ cos²θ_i/(σ_i+1))``."""
        if self.degenerate:
            return np.zeros(len(deltas))
        cos, _ = self.cosines(deltas)
        return self.spectral_norm * np.sqrt((cos ** 2 / (self.values + 1.0)).sum(axis=(1, 2)))

    def max_paf(self) -> float:
        if self.degenerate:
            return 0.0
        return self.spectral_norm / math.sqrt(float(self.nonzero().min()) + 1.0)


def _draws(rng: Rng, k: int, B: int, m: int) -> np.ndarray:
    return rng.normal(size=(k, B, m))


def paf_from_jacobian(J, draws: int = DEFAULT_MATRIX_DRAWS, rng: Optional[Rng] = None,
                      deltas=None) -> tuple:
    """Monte Carlo PAF of one explicit Jacobian: ``(mean, standard_error, samples)``."""
    spec = Spectrum.of(J)
    if deltas is None:
        rng = rng or Rng(0)
        deltas = _draws(rng, draws, *spec.blocks.shape[::2])
    else:
        deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, spec.blocks.shape[0],
                                                             spec.blocks.shape[2])
    terms = spec.paf_terms(deltas)
    se = float(terms.std(ddof=1) / math.sqrt(terms.size)) if terms.size > 1 else 0.0
    return float(terms.mean()), se, terms


def max_paf_from_jacobian(J) -> float:
    return Spectrum.of(J).max_paf()


def paf_closed_form_identity(c: float, n: int) -> float:
    """Expected PAF of ``J = c·I`` in ``n`` dimensions."""
    e_abs = math.exp(math.lgamma(n / 2) - math.lgamma((n + 1) / 2)) / math.sqrt(math.pi)
    return n * (abs(c) / math.sqrt(c * c + 1)) * e_abs


@dataclass
class PafReport:
    layer: object
    mean_paf: float
    std_err: float
    n_inputs: int
    n_draws: int
    max_paf: float
    spectral_norm: float
    eig_min: float
    eig_max: float
    best_sampled_gain: float
    degenerate: bool = False
    per_input_paf: list = field(default_factory=list)
    per_input_max_paf: list = field(default_factory=list)

    def row(self) -> dict:
        return {"layer": str(self.layer), "mean_paf": self.mean_paf, "std_err": self.std_err,
                "max_paf": self.max_paf, "spectral_norm": self.spectral_norm,
                "eig_min": self.eig_min, "eig_max": self.eig_max,
                "best_sampled_gain": self.best_sampled_gain,
                "n_inputs": self.n_inputs, "n_draws": self.n_draws,
                "degenerate": self.degenerate}


def layer_spectrum(model, layer, h0) -> Spectrum:
    """Per-token Jacobian spectrum of ``layer`` at the operating point set by ``h0``."""
    z = model.layer_input(layer, h0).data
    rows = z.reshape(-1, z.shape[-1])
    J = row_jacobians(lambda t: model.layer_forward(layer, t), rows)
    return Spectrum.of(J)


def paf_estimate(model, layer, inputs: Sequence[np.ndarray], draws: int = DEFAULT_DRAWS,
                 rng: Optional[Rng] = None) -> PafReport:
    """Monte Carlo PAF of one sub-layer over embedding inputs ``(L_i, D)``."""
    if not len(inputs):
        raise ValueError("paf_estimate needs at least one input")
    if draws < 1:
        raise ValueError("draws must be >= 1")
    rng = rng or Rng(0)
    terms, per_paf, per_max, norms, gains = [], [], [], [], []
    lo, hi = math.inf, 0.0
    for i, h0 in enumerate(inputs):
        spec = layer_spectrum(model, layer, h0)
        d = _draws(rng.derive(i), draws, spec.blocks.shape[0], spec.blocks.shape[2])
        t = spec.paf_terms(d)
        terms.append(t)
        per_paf.append(float(t.mean()))
        per_max.append(spec.max_paf())
        gains.append(float(spec.direction_gain(d).max()))
        norms.append(spec.spectral_norm)
        nz = spec.nonzero()
        if nz.size:
            lo, hi = min(lo, float(nz.min())), max(hi, float(nz.max()))
    allt = np.concatenate(terms)
    se = float(allt.std(ddof=1) / math.sqrt(allt.size)) if allt.size > 1 else 0.0
    return PafReport(layer=layer, mean_paf=float(allt.mean()), std_err=se,
                     n_inputs=len(inputs), n_draws=draws, max_paf=float(np.mean(per_max)),
                     spectral_norm=float(np.mean(norms)),
                     eig_min=lo if lo < math.inf else 0.0, eig_max=hi,
                     best_sampled_gain=max(gains), degenerate=hi == 0.0,
                     per_input_paf=per_paf, per_input_max_paf=per_max)


def max_paf(model, layer, inputs: Sequence[np.ndarray]) -> float:
    return float(np.mean([layer_spectrum(model, layer, h0).max_paf() for h0 in inputs]))


# --------------------------------------------------------------------------- inverse bound


@dataclass
class Thm1Report:
    lhs: float
    rhs: float
    holds: bool
    cos_sq_sum: float


def thm1_verify(J, delta, rel_slack: float = 1e-8) -> Thm1Report:
    """Check ``‖δJᵀ(JJᵀ+I)⁻¹‖² ≤ Σ_i (‖δJᵀ‖ cos θ_i)² / (σ_i+1)``."""
    J = np.asarray(J, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if J.ndim != 2 or J.shape[1] != delta.size:
        raise ValueError("delta must have one entry per Jacobian column")
    if not (np.isfinite(J).all() and np.isfinite(delta).all()):
        raise FloatingPointError("non-finite input")
    n = J.shape[0]
    y = J @ delta                                   # (δJᵀ)ᵀ
    reg = np.linalg.solve(J @ J.T + np.eye(n), y)   # symmetric system, so this is Δ_regᵀ
    lhs = float(reg @ reg)
    vals, vecs = sym_eig(J @ J.T)
    vals = np.clip(vals, 0.0, None)
    proj = vecs.T @ y                               # ‖δJᵀ‖ cos θ_i
    rhs = float(np.sum(proj ** 2 / (vals + 1.0)))
    ny = float(y @ y)
    cos_sq = float(np.sum(proj ** 2) / ny) if ny > 0 else 0.0
    return Thm1Report(lhs=lhs, rhs=rhs, holds=lhs <= rhs * (1 + rel_slack) + 1e-300,
                      cos_sq_sum=cos_sq)


# --------------------------------------------------------------------------- bypass experiment


@dataclass
class BypassStudy:
    rows: list            # (LayerRef, paf, mean rouge-l, std err of rouge-l)
    pearson_r: float
    degenerate: bool

    def table(self) -> list:
        return [{"layer": str(l), "paf": p, "rouge_l": r, "rouge_l_se": s}
                for l, p, r, s in self.rows]


def bypass_study(model, layers, prompts, attack_cfg, defense_spec, rng: Rng,
                 paf_inputs: Optional[int] = None, draws: int = DEFAULT_DRAWS,
                 attack: Optional[Callable] = None) -> BypassStudy:
    """Pair each layer's PAF with the attack quality on the model without it.

    ``attack(model, prompts, spec, cfg, rng)`` returns per-prompt ROUGE-L;
    by default the harness attack pipeline is used.
    """
    from .metrics import mean_std
    if not prompts:
        raise ValueError("bypass study needs a non-empty prompt sample")
    if attack is None:
        from .harness.suites import attack_rouge
        attack = attack_rouge
    inputs = [model.embed(p).data for p in prompts[:paf_inputs or DEFAULT_INPUTS]]
    rows = []
    for j, layer in enumerate(layers):
        rep = paf_estimate(model, layer, inputs, draws=draws, rng=rng.derive(0, j))
        scores = attack(model.bypass(layer), prompts, defense_spec, attack_cfg, rng.derive(1))
        m, _, se = mean_std(scores)
        rows.append((layer, rep.mean_paf, m, se))
    r, deg = pearson([p for _, p, _, _ in rows], [s for _, _, s, _ in rows])
    return BypassStudy(rows=rows, pearson_r=r, degenerate=deg)
