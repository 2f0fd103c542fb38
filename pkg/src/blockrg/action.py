"""Bare, starred and unrenormalized actions, the potential lower bound and the
quadratic lower-bound constant for averaged fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .lattice import TorusLattice, averaging_matrix, block_mask, bonds, laplacian_matrix


class ActionError(ValueError):
    pass


@dataclass(frozen=True)
class CouplingSet:
    lam: float = 0.0
    mu: float = 0.0
    eps: float = 0.0
    mu_bar: float = 1.0
    a: float = 1.0

    def validate(self) -> None:
        if self.lam < 0 or self.mu_bar < 0 or self.a <= 0:
            raise ActionError(f"invalid couplings {self}")


def averaging_strengths(a: float, L: int, d: int, levels: int) -> np.ndarray:
    """a_0..a_levels from 1/a_{k+1} = L^{d-3}/a + L^{-2}/a_k with 1/a_0 = 0 (a_0 = inf)."""
    inv = [0.0]
    for _ in range(levels):
        inv.append(float(L) ** (d - 3) / a + inv[-1] / L ** 2)
    with np.errstate(divide="ignore"):
        return 1.0 / np.array(inv)


def coupling_schedule(lam: float, mu_bar: float, a: float, L: int, d: int, N: int, eps=None, mu=None) -> list[CouplingSet]:
    """Per-level couplings with lam_k = L^{-(N-k)} lam and mu_bar_k = L^{-2(N-k)} mu_bar."""
    a_k = averaging_strengths(a, L, d, N)
    out = []
    for k in range(N + 1):
        out.append(
            CouplingSet(
                lam=float(L) ** (-(N - k)) * lam,
                mu=0.0 if mu is None else mu[k],
                eps=0.0 if eps is None else eps[k],
                mu_bar=float(L) ** (-2 * (N - k)) * mu_bar,
                a=float(a_k[k]),
            )
        )
    return out


def bare_action(Phi: np.ndarray, lattice: TorusLattice, c: CouplingSet, mask: np.ndarray | None = None) -> float:
    """1/2|dPhi|^2 + 1/2 mu_bar|Phi|^2 + eps Vol + 1/2 mu|Phi|^2 + 1/4 lam sum Phi^4 on the unit lattice."""
    if lattice.k != 0:
        raise ActionError("bare action lives on the unit lattice")
    Phi = np.asarray(Phi, dtype=float)
    m = np.ones(lattice.n_sites, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    t, h = bonds(lattice, m)
    grad = float(np.sum((Phi[h] - Phi[t]) ** 2))
    sq = float(np.sum(Phi[m] ** 2))
    quart = float(np.sum(Phi[m] ** 4))
    return 0.5 * grad + 0.5 * c.mu_bar * sq + c.eps * int(m.sum()) + 0.5 * c.mu * sq + 0.25 * c.lam * quart


@dataclass(frozen=True)
class ActionTerms:
    averaging: float
    gradient: float
    mass: float
    volume: float
    quadratic: float
    quartic: float

    @property
    def starred(self) -> float:
        return self.averaging + self.gradient + self.mass

    @property
    def total(self) -> float:
        return self.starred + self.volume + self.quadratic + self.quartic


def action_terms(
    fine: TorusLattice,
    unit_mask: np.ndarray,
    Phi: np.ndarray,
    phi: np.ndarray,
    a: float,
    mu_bar: float,
    eps: float = 0.0,
    mu: float = 0.0,
    lam: float = 0.0,
) -> ActionTerms:
    """Per-term breakdown over a union of unit blocks of the spacing L^-k lattice."""
    k = fine.k
    unit = fine.coarser(k)
    unit_mask = np.asarray(unit_mask, dtype=bool)
    if unit_mask.size != unit.n_sites or np.asarray(Phi).size != unit.n_sites or np.asarray(phi).size != fine.n_sites:
        raise ActionError("field and region sizes do not match the lattices")
    fmask = block_mask(fine, unit_mask, k) if k else unit_mask
    eta = fine.spacing
    Qphi = averaging_matrix(fine, k) @ phi if k else np.asarray(phi, dtype=float)
    dev = (np.asarray(Phi) - Qphi)[unit_mask]
    t, h = bonds(fine, fmask)
    grad = eta ** (fine.d - 2) * float(np.sum((phi[h] - phi[t]) ** 2))
    vol_w = eta ** fine.d
    sq = vol_w * float(np.sum(phi[fmask] ** 2))
    quart = vol_w * float(np.sum(phi[fmask] ** 4))
    vol = float(unit_mask.sum())
    return ActionTerms(
        averaging=0.5 * a * float(dev @ dev),
        gradient=0.5 * grad,
        mass=0.5 * mu_bar * sq,
        volume=eps * vol,
        quadratic=0.5 * mu * sq,
        quartic=0.25 * lam * quart,
    )


def action_splus(fine: TorusLattice, unit_mask, Phi, phi, c: CouplingSet) -> ActionTerms:
    """S*_k plus the potential V_k over the region; `.starred` and `.total` give S* and S+."""
    return action_terms(fine, unit_mask, Phi, phi, c.a, c.mu_bar, c.eps, c.mu, c.lam)


def action_unrenorm(fine: TorusLattice, unit_mask, Phi, phi, c: CouplingSet, prev: CouplingSet) -> ActionTerms:
    """S*_k with the potential built from the previous level's eps, mu scaled by L^d and L^2."""
    L, d = fine.L, fine.d
    return action_terms(fine, unit_mask, Phi, phi, c.a, c.mu_bar, L ** d * prev.eps, L ** 2 * prev.mu, c.lam)


def potential_lower_bound(eps: float, mu: float, lam: float, vol: float) -> float:
    if lam <= 0:
        raise ActionError("lambda must be positive")
    return -(abs(eps) + 0.25 * mu ** 2 / lam) * vol


def potential_density(x: np.ndarray, eps: float, mu: float, lam: float) -> np.ndarray:
    return eps + 0.5 * mu * x ** 2 + 0.25 * lam * x ** 4


def verify_potential_bound(eps: float, mu: float, lam: float, rng: np.random.Generator, samples: int = 1000) -> float:
    """Smallest per-site slack V(x) + |eps| + mu^2/(4 lam) over random x and the exact minimizers."""
    floor = potential_lower_bound(eps, mu, lam, 1.0)
    width = max(1.0, math.sqrt(abs(mu) / lam))
    x = np.r_[rng.normal(scale=2 * width, size=samples), 0.0]
    if mu < 0:
        x = np.r_[x, math.sqrt(-mu / lam), -math.sqrt(-mu / lam)]
    return float(np.min(potential_density(x, eps, mu, lam) - floor))


@dataclass(frozen=True)
class LowerBoundResult:
    c0: float
    restricted: bool


def quadratic_forms(fine: TorusLattice, unit_mask: np.ndarray, mu: float):
    """Dense (numerator, denominator) matrices in variables (Phi on X, phi on X).

    numerator = 1/2|Phi - Q phi|^2 + 1/2|dphi|^2_X + 1/2 mu|phi|^2_X, denominator = |dPhi|^2_X + mu|Phi|^2_X,
    both with Neumann bonds inside X."""
    k = fine.k
    unit = fine.coarser(k)
    unit_mask = np.asarray(unit_mask, dtype=bool)
    fmask = block_mask(fine, unit_mask, k)
    ui, fi = np.flatnonzero(unit_mask), np.flatnonzero(fmask)
    eta = fine.spacing
    Q = averaging_matrix(fine, k).toarray()[np.ix_(ui, fi)]
    lap_f = laplacian_matrix(fine, fmask).toarray()[np.ix_(fi, fi)]
    lap_u = laplacian_matrix(unit, unit_mask).toarray()[np.ix_(ui, ui)]
    m, n = ui.size, fi.size
    A = np.zeros((m + n, m + n))
    A[:m, :m] = np.eye(m)
    A[:m, m:] = -Q
    A[m:, :m] = -Q.T
    A[m:, m:] = Q.T @ Q + eta ** (fine.d - 2) * lap_f + mu * eta ** fine.d * np.eye(n)
    B = lap_u + mu * np.eye(m)
    return 0.5 * A, B, m


def quadratic_lower_bound_constant(fine: TorusLattice, unit_mask: np.ndarray, mu: float) -> LowerBoundResult:
    """Largest c0 with numerator >= c0 * denominator, via the Schur complement over phi and a
    generalized eigenproblem on the range of the denominator."""
    if not 0 <= mu <= 1:
        raise ActionError("mu must lie in [0, 1]")
    A, B, m = quadratic_forms(fine, unit_mask, mu)
    S = A[:m, :m] - A[:m, m:] @ np.linalg.solve(A[m:, m:], A[m:, :m])
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(B)
    keep = w > 1e-10 * max(1.0, w.max())
    restricted = not np.all(keep)
    P = V[:, keep]
    vals = sla.eigh(P.T @ S @ P, P.T @ B @ P, eigvals_only=True)
    c0 = float(vals[0])
    if c0 <= 0:
        raise ActionError(f"nonpositive lower-bound constant {c0}")
    return LowerBoundResult(c0, restricted)


def lower_bound_ratio(fine: TorusLattice, unit_mask, mu: float, Phi: np.ndarray, phi: np.ndarray) -> tuple[float, float]:
    """(numerator, denominator) for a given pair restricted to X."""
    A, B, m = quadratic_forms(fine, unit_mask, mu)
    k = fine.k
    um = np.asarray(unit_mask, dtype=bool)
    fm = block_mask(fine, um, k)
    v = np.r_[np.asarray(Phi)[um], np.asarray(phi)[fm]]
    return float(v @ A @ v), float(v[:m] @ B @ v[:m])


def with_couplings(c: CouplingSet, **kw) -> CouplingSet:
    return replace(c, **kw)
