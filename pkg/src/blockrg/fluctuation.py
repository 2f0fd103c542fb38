"""Fluctuation covariance, its square root by an r-integral, normalization constants and the
log Z bookkeeping of the quadratic renormalization steps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .action import averaging_strengths
from .greens import DENSE_CAP, Hierarchy, _coarse_mask, assemble
from .lattice import TorusLattice, averaging_matrix, gaussian_normalization, laplacian_matrix


class FluctuationError(ValueError):
    pass


def logdet_spd(A: np.ndarray) -> float:
    c = np.linalg.cholesky(A)
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def _check_spd(C: np.ndarray, what: str) -> None:
    w = np.linalg.eigvalsh(0.5 * (C + C.T))
    if w[0] <= 0:
        raise FluctuationError(f"{what} is not positive definite, eigenvalues {w[:3]}")


# ---------------------------------------------------------------- covariance


@dataclass(frozen=True)
class CovarianceBundle:
    hierarchy: Hierarchy = field(repr=False)
    C: np.ndarray = field(repr=False)
    sites: np.ndarray = field(repr=False)  # unit-lattice indices of Omega_{k+1}
    logdet: float = 0.0
    sqrt: np.ndarray | None = field(default=None, repr=False)
    sqrt_loc: np.ndarray | None = field(default=None, repr=False)
    r_layers: int = 0
    nodes: int = 0

    @property
    def a(self) -> float:
        return self.hierarchy.weights[-1]

    def c_r(self, r: float) -> np.ndarray:
        return covariance_r(self.hierarchy, r)


def _last_q(h: Hierarchy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = np.flatnonzero(h.domain)
    cm = _coarse_mask(h.fine, h.omegas[-1], h.k)
    sites = np.flatnonzero(cm)
    Q = averaging_matrix(h.fine, h.k)[sites][:, idx].toarray()
    return Q, sites, idx


def covariance_r(h: Hierarchy, r: float) -> np.ndarray:
    """1/(a+r) + (a/(a+r))^2 Q G_r Q^T on the unit blocks of Omega_{k+1}."""
    if h.k == 0:
        raise FluctuationError("covariance needs at least one averaging level")
    Q, sites, idx = _last_q(h)
    if idx.size > DENSE_CAP:
        raise FluctuationError(f"{idx.size} sites exceeds the dense cap {DENSE_CAP}")
    a = h.weights[-1]
    H = assemble(h, plus=True, r=r).dense()
    X = sla.cho_solve(sla.cho_factor(H), Q.T)
    C = np.eye(sites.size) / (a + r) + (a / (a + r)) ** 2 * (Q @ X)
    return 0.5 * (C + C.T)


def restricted_precision(h: Hierarchy) -> np.ndarray:
    """a - a^2 Q G Q^T with G the inverse of the full operator: the precision of Phi_k on Omega_{k+1}."""
    Q, sites, idx = _last_q(h)
    a = h.weights[-1]
    H = assemble(h, plus=False).dense()
    X = sla.cho_solve(sla.cho_factor(H), Q.T)
    D = a * np.eye(sites.size) - a * a * (Q @ X)
    return 0.5 * (D + D.T)


def covariance_build(h: Hierarchy, r_layers: int = 1, quadrature: "SqrtSpec | None" = None, with_sqrt: bool = True) -> CovarianceBundle:
    C = covariance_r(h, 0.0)
    _check_spd(C, "covariance")
    _, sites, _ = _last_q(h)
    ld = logdet_spd(C)
    if not with_sqrt:
        return CovarianceBundle(h, C, sites, ld, r_layers=r_layers)
    res = sqrt_covariance(lambda r: covariance_r(h, r), quadrature or SqrtSpec(), reference=C)
    unit = h.fine.coarser(h.k)
    loc = localize(res.value, unit, sites, r_layers)
    return CovarianceBundle(h, C, sites, ld, res.value, loc, r_layers, res.nodes)


def localize(S: np.ndarray, unit: TorusLattice, sites: np.ndarray, r_layers: int) -> np.ndarray:
    """Zero the entries of S between unit sites farther apart than r_layers (periodic Chebyshev)."""
    c = unit.coords()[sites]
    diff = np.abs(c[:, None, :] - c[None, :, :])
    dist = np.max(np.minimum(diff, unit.n_per_axis - diff), axis=2)
    return np.where(dist <= r_layers, S, 0.0)


# ---------------------------------------------------------------- square root


@dataclass(frozen=True)
class SqrtSpec:
    nodes: int = 32
    max_nodes: int = 4096
    tol: float = 1e-10
    scale: float | None = None


@dataclass(frozen=True)
class SqrtResult:
    value: np.ndarray = field(repr=False)
    nodes: int = 0
    change: float = 0.0


def _legendre_on(n: int, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (hi - lo) * x + 0.5 * (hi + lo), 0.5 * (hi - lo) * w


def _sqrt_rule(c_r: Callable[[float], np.ndarray], n: int, sigma: float) -> np.ndarray:
    # r = sigma tan^2(t) on (0, pi/2): (1/pi) dr / sqrt(r) = (2 sqrt(sigma)/pi) sec^2(t) dt
    t, w = _legendre_on(n, 0.0, 0.5 * math.pi)
    out = None
    for ti, wi in zip(t, w):
        r = sigma * math.tan(ti) ** 2
        term = (2 * math.sqrt(sigma) / math.pi) * wi / math.cos(ti) ** 2 * c_r(r)
        out = term if out is None else out + term
    return out


def sqrt_covariance(source, spec: SqrtSpec = SqrtSpec(), reference: np.ndarray | None = None) -> SqrtResult:
    """C^{1/2} = (1/pi) int_0^inf dr r^{-1/2} C_r with C_r = (C^{-1} + r)^{-1}.

    `source` is an SPD matrix or a callable r -> C_r. Nodes double until the max-entry change is below tol."""
    if callable(source):
        c_r = source
        C0 = c_r(0.0) if reference is None else reference
    else:
        C0 = np.asarray(source, dtype=float)
        if C0.shape[0] != C0.shape[1] or not np.allclose(C0, C0.T, atol=1e-12 * max(1.0, np.abs(C0).max())):
            raise FluctuationError("square root needs a symmetric matrix")
        _check_spd(C0, "matrix")
        P = np.linalg.inv(C0)

        def c_r(r: float) -> np.ndarray:
            return np.linalg.inv(P + r * np.eye(P.shape[0]))

    if C0.size == 0:
        return SqrtResult(C0.copy(), 0, 0.0)
    sigma = spec.scale or C0.shape[0] / float(np.trace(C0))
    n = spec.nodes
    prev = _sqrt_rule(c_r, n, sigma)
    scale = max(1.0, float(np.abs(prev).max()))
    while True:
        n *= 2
        if n > spec.max_nodes:
            raise FluctuationError(f"square-root quadrature did not converge within {spec.max_nodes} nodes")
        cur = _sqrt_rule(c_r, n, sigma)
        change = float(np.abs(cur - prev).max())
        if change <= spec.tol * scale:
            return SqrtResult(0.5 * (cur + cur.T), n, change)
        prev = cur


def sqrt_eigen(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class SqrtBounds:
    C_sqrt: float
    C_loc: float
    C_delta: float
    decay: float  # C_delta e^{r_layers}
    columns: list


def sqrt_bounds_check(bundle: CovarianceBundle, probes: np.ndarray | None = None) -> SqrtBounds:
    """Smallest C in |S f| <= C |f|_inf for S = C^{1/2}, its localized form and their difference.

    The infinity operator norm is the max absolute row sum, attained at f = sign pattern of a row."""
    if bundle.sqrt is None:
        raise FluctuationError("bundle has no square root")
    S, Sl = bundle.sqrt, bundle.sqrt_loc
    norm = lambda A: float(np.abs(A).sum(axis=1).max()) if A.size else 0.0
    delta = norm(S - Sl)
    cols = [float(np.abs(S[:, i]).max()) for i in range(S.shape[1])]
    if probes is not None:
        for f in np.atleast_2d(probes):
            fi = float(np.abs(f).max())
            if np.abs(S @ f).max() > norm(S) * fi * (1 + 1e-12) + 1e-300:
                raise FluctuationError("probe exceeds the operator norm bound")
    return SqrtBounds(norm(S), norm(Sl), delta, delta * math.exp(bundle.r_layers), cols)


# ---------------------------------------------------------------- log Z bookkeeping


def z_recursion(log_z: float, n_fine: int, n_coarse: int, logdet_c: float, a: float, L: int, d: int) -> float:
    """log Z_{k+1} = log Z_k - log N_{a,T1} + (|T0|/2) log 2pi + 1/2 log det C_k - ((d-2)/2)|T1| log L.

    `a` is the counting-measure kernel strength and N_{a,n} = (2pi/a)^{n/2}; the last term is the rescaling Jacobian."""
    return (
        log_z
        - gaussian_normalization(a, n_coarse)
        + 0.5 * n_fine * math.log(2 * math.pi)
        + 0.5 * logdet_c
        - 0.5 * (d - 2) * n_coarse * math.log(L)
    )


def precision_closed_form(d: int, L: int, side_exponent: int, k: int, a_k: float, mu_bar_k: float) -> np.ndarray:
    """Delta_k = a_k - a_k^2 Q_k H^{-1} Q_k^T with H = a_k Q_k^T Q_k + eta^{d-2}(-Lap) + eta^d mu_bar_k."""
    unit = TorusLattice(d, L, 0, side_exponent)
    if k == 0:
        return laplacian_matrix(unit).toarray() + mu_bar_k * np.eye(unit.n_sites)
    fine = TorusLattice(d, L, k, side_exponent)
    if fine.n_sites > DENSE_CAP:
        raise FluctuationError(f"{fine.n_sites} sites exceeds the dense cap {DENSE_CAP}")
    eta = fine.spacing
    Q = averaging_matrix(fine, k).toarray()
    H = a_k * Q.T @ Q + eta ** (d - 2) * laplacian_matrix(fine).toarray() + eta ** d * mu_bar_k * np.eye(fine.n_sites)
    D = a_k * np.eye(unit.n_sites) - a_k ** 2 * Q @ np.linalg.solve(H, Q.T)
    return 0.5 * (D + D.T)


@dataclass(frozen=True)
class PartitionIdentity:
    lhs: float
    rhs: float
    rel_err: float
    log_z: list
    logdets: list


def bare_partition_identity(d: int, L: int, N: int, side_exponent: int, mu_bar: float = 1.0, a: float = 1.0) -> PartitionIdentity:
    """log Z(0) of the free bare action on the torus of side L^{side_exponent+N} versus
    log Z_N + (n_N/2) log 2pi - 1/2 log det Delta_N with Z_N from the recursion."""
    if N < 0:
        raise FluctuationError("N must be nonnegative")
    mu0 = float(L) ** (-2 * N) * mu_bar
    top = TorusLattice(d, L, 0, side_exponent + N)
    A0 = laplacian_matrix(top).toarray() + mu0 * np.eye(top.n_sites)
    lhs = 0.5 * top.n_sites * math.log(2 * math.pi) - 0.5 * logdet_spd(A0)
    a_k = averaging_strengths(a, L, d, N)
    log_z, logdets = [0.0], []
    for k in range(N):
        mu_k = float(L) ** (-2 * (N - k)) * mu_bar
        D = precision_closed_form(d, L, side_exponent + N - k, k, float(a_k[k]), mu_k)
        lat = TorusLattice(d, L, 1, side_exponent + N - k - 1)
        Q = averaging_matrix(lat, 1).toarray()
        ld = -logdet_spd(D + a * L * Q.T @ Q)
        logdets.append(ld)
        log_z.append(z_recursion(log_z[-1], lat.n_sites, Q.shape[0], ld, a * L, L, d))
    DN = precision_closed_form(d, L, side_exponent, N, float(a_k[N]), mu_bar)
    nN = DN.shape[0]
    try:
        ldN = logdet_spd(DN)
    except np.linalg.LinAlgError:
        raise FluctuationError(f"Delta_N is singular, eigenvalues {np.linalg.eigvalsh(DN)[:3]}")
    rhs = log_z[-1] + 0.5 * nN * math.log(2 * math.pi) - 0.5 * ldN
    return PartitionIdentity(lhs, rhs, abs(math.expm1(lhs - rhs)), log_z, logdets)


# ---------------------------------------------------------------- W measure


def w_measure_constants(n_sites: int, p0: float) -> tuple[float, float]:
    """(log N^w, eps0): N^w is the probability that n i.i.d. standard normals all satisfy |W| <= p0."""
    mass = math.erf(p0 / math.sqrt(2)) if math.isfinite(p0) else 1.0
    if mass <= 0:
        raise FluctuationError("threshold must be positive")
    eps0 = -math.log(mass)
    return -eps0 * n_sites, eps0


def w_integral_halved(sizes) -> float:
    """log of prod_j 2^{n_j/2}: the Gaussian integral with the exponent 1/4|W|^2 against dmu(W)."""
    return 0.5 * math.log(2) * float(sum(int(n) for n in sizes))


def constants_ledger(identity: PartitionIdentity, eps0: float) -> dict:
    return {"logZ": identity.log_z, "logdet": identity.logdets, "epsilon0": eps0}
