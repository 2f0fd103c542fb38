"""Multiscale minimizers, Green's functions, random walk expansions and decay fits.

All operators are in counting measure on the fine lattice of spacing eta = L^-k:
H = eta^{d-2}(-Lap) + eta^d mu_bar + sum_j w_j Q_j^T P_j Q_j, restricted to the domain Omega_1
with Dirichlet data outside. The kernel H^{-1} is the Green's function with respect to the
eta^d-weighted inner product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import TorusLattice, averaging_matrix, block_map, laplacian_matrix
from .regions import _dilate

DENSE_CAP = 4096


class GreensError(ValueError):
    pass


class DivergentExpansion(GreensError):
    pass


def default_weights(a_levels, L: int, d: int, k: int) -> tuple[float, ...]:
    """Counting-measure weights w_j = a_j L^{-2(k-j)} L^{-d(k-j)} for levels j = 1..k.

    a_levels[j-1] is the strength at level j and L^{-d(k-j)} the volume of a level-j block."""
    return tuple(float(a_levels[j - 1]) * float(L) ** (-2 * (k - j)) * float(L) ** (-d * (k - j)) for j in range(1, k + 1))


@dataclass(frozen=True)
class Hierarchy:
    """Nested fine-site masks Omega_1 >= ... >= Omega_{k+1} with level weights w_1..w_k.

    Omega_j (j <= k) is a union of blocks of fine.coarser(j); Omega_{k+1} a union of unit blocks."""

    fine: TorusLattice
    omegas: tuple
    weights: tuple
    mu_bar: float = 1.0

    def __post_init__(self):
        k = self.fine.k
        om = tuple(np.asarray(m, dtype=bool).reshape(-1) for m in self.omegas)
        if len(om) != k + 1 or len(self.weights) != k:
            raise GreensError(f"need {k + 1} regions and {k} weights for k={k}")
        if self.mu_bar <= 0 or any(w <= 0 for w in self.weights):
            raise GreensError("mu_bar and weights must be positive")
        for j, m in enumerate(om, start=1):
            if m.size != self.fine.n_sites:
                raise GreensError("region mask size does not match the lattice")
            if j > 1 and np.any(m & ~om[j - 2]):
                raise GreensError(f"Omega_{j} is not inside Omega_{j - 1}")
            lev = min(j, k)
            if lev and not _is_block_union(self.fine, m, lev):
                raise GreensError(f"Omega_{j} is not a union of level-{lev} blocks")
        object.__setattr__(self, "omegas", om)
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def k(self) -> int:
        return self.fine.k

    @property
    def domain(self) -> np.ndarray:
        return self.omegas[0]

    def supports(self, plus: bool = True) -> list[tuple[int, np.ndarray]]:
        """(level j, mask on fine.coarser(j) sites) carrying the averaging terms."""
        out = []
        k = self.k
        for j in range(1, k + 1):
            fine_mask = self.omegas[j - 1] & ~self.omegas[j] if (plus or j < k) else self.omegas[j - 1]
            out.append((j, _coarse_mask(self.fine, fine_mask, j)))
        return out

    def restricted(self, keep: np.ndarray) -> "Hierarchy":
        """Same data with every region intersected with `keep` (a union of unit blocks)."""
        keep = np.asarray(keep, dtype=bool)
        return replace(self, omegas=tuple(m & keep for m in self.omegas))


def _coarse_mask(fine: TorusLattice, fine_mask: np.ndarray, levels: int) -> np.ndarray:
    if levels == 0:
        return fine_mask.copy()
    coarse = fine.coarser(levels)
    out = np.zeros(coarse.n_sites, dtype=bool)
    out[block_map(fine, levels)[fine_mask]] = True
    return out


def _is_block_union(fine: TorusLattice, mask: np.ndarray, levels: int) -> bool:
    cm = _coarse_mask(fine, mask, levels)
    return bool(np.array_equal(cm[block_map(fine, levels)], mask))


@dataclass(frozen=True)
class MultiscaleOperator:
    H: sp.csr_matrix = field(repr=False)
    lap: sp.csr_matrix = field(repr=False)
    idx: np.ndarray = field(repr=False)
    hierarchy: Hierarchy = field(repr=False)
    plus: bool = True
    r: float = 0.0

    @property
    def n(self) -> int:
        return self.idx.size

    def dense(self) -> np.ndarray:
        return self.H.toarray()


def assemble(h: Hierarchy, plus: bool = True, r: float = 0.0) -> MultiscaleOperator:
    """Operator on Omega_1; r > 0 adds a_k r/(a_k + r) Q_k^T Q_k on Omega_{k+1} (a_k = w_k)."""
    fine = h.fine
    eta = fine.spacing
    idx = np.flatnonzero(h.domain)
    lap = (eta ** (fine.d - 2) * laplacian_matrix(fine))[idx][:, idx].tocsr()
    H = lap + sp.identity(idx.size, format="csr") * (eta ** fine.d * h.mu_bar)
    for (j, cm), w in zip(h.supports(plus), h.weights):
        Q = averaging_matrix(fine, j)[cm][:, idx]
        H = H + w * (Q.T @ Q)
    if r > 0:
        if h.k == 0:
            raise GreensError("r-term needs at least one averaging level")
        a = h.weights[-1]
        cm = _coarse_mask(fine, h.omegas[-1], h.k)
        Q = averaging_matrix(fine, h.k)[cm][:, idx]
        H = H + (a * r / (a + r)) * (Q.T @ Q)
    return MultiscaleOperator(H.tocsr(), lap, idx, h, plus, r)


def source(h: Hierarchy, Phi: list, phi_ext: np.ndarray, plus: bool = True) -> np.ndarray:
    """Q^T a Phi + [Delta]_{Omega_1, Omega_1^c} phi_ext restricted to Omega_1."""
    fine = h.fine
    eta = fine.spacing
    idx = np.flatnonzero(h.domain)
    ext = np.where(h.domain, 0.0, np.asarray(phi_ext, dtype=float))
    # -(-Lap) applied to exterior data gives the boundary coupling
    b = -(eta ** (fine.d - 2)) * (laplacian_matrix(fine) @ ext)[idx]
    for (j, cm), w, Pj in zip(h.supports(plus), h.weights, Phi):
        Pj = np.where(cm, np.asarray(Pj, dtype=float), 0.0)
        b = b + w * (averaging_matrix(fine, j)[:, idx].T @ Pj)
    return b


@dataclass(frozen=True)
class MinimizerResult:
    phi: np.ndarray
    psi: np.ndarray
    residual: float


def solve_minimizer(h: Hierarchy, Phi: list, phi_ext: np.ndarray, plus: bool = True, tol: float = 1e-10) -> MinimizerResult:
    """Minimize the multiscale quadratic form over phi on Omega_1 with exterior data fixed.

    Phi[j-1] lives on fine.coarser(j); only its values on the level-j support are used.
    Returns the full fine field, Psi = [Q_k phi] on Omega_{k+1} (zero elsewhere), and the relative residual."""
    if len(Phi) != h.k:
        raise GreensError(f"expected {h.k} data fields")
    op = assemble(h, plus)
    b = source(h, Phi, phi_ext, plus)
    x = spla.spsolve(op.H.tocsc(), b) if op.n else np.zeros(0)
    x = np.atleast_1d(x)
    res = float(np.linalg.norm(op.H @ x - b))
    scale = float(np.linalg.norm(b))
    rel = res / scale if scale > 0 else res
    if not np.isfinite(rel) or rel > tol:
        raise GreensError(f"minimizer solve did not converge, relative residual {rel:.3e}")
    phi = np.where(h.domain, 0.0, np.asarray(phi_ext, dtype=float))
    phi[op.idx] = x
    psi = np.zeros(h.fine.coarser(h.k).n_sites)
    if h.k:
        last = _coarse_mask(h.fine, h.omegas[-1], h.k)
        psi[last] = (averaging_matrix(h.fine, h.k) @ phi)[last]
    return MinimizerResult(phi, psi, rel)


def objective(h: Hierarchy, phi: np.ndarray, Phi: list, plus: bool = True) -> float:
    """Quadratic form minimized by solve_minimizer (exterior values of phi are the data)."""
    fine = h.fine
    eta = fine.spacing
    dom = h.domain
    total = 0.0
    for axis in range(fine.d):
        nb = fine.shift(axis, 1)
        touch = dom | dom[nb]
        total += 0.5 * eta ** (fine.d - 2) * float(np.sum((phi[nb] - phi)[touch] ** 2))
    total += 0.5 * h.mu_bar * eta ** fine.d * float(np.sum(phi[dom] ** 2))
    for (j, cm), w, Pj in zip(h.supports(plus), h.weights, Phi):
        dev = (np.asarray(Pj) - averaging_matrix(fine, j) @ phi)[cm]
        total += 0.5 * w * float(dev @ dev)
    return total


def minimizer_identity_check(h: Hierarchy, Phi: list, phi_ext: np.ndarray) -> float:
    """max |phi_plus - phi_full(Phi, Psi)| where the full problem reuses Psi on Omega_{k+1}."""
    plus = solve_minimizer(h, Phi, phi_ext, plus=True)
    if h.k == 0:
        return 0.0
    data = list(Phi)
    last = _coarse_mask(h.fine, h.omegas[-1], h.k)
    data[-1] = np.where(last, plus.psi, np.asarray(Phi[-1], dtype=float))
    full = solve_minimizer(h, data, phi_ext, plus=False)
    return float(np.max(np.abs(plus.phi - full.phi))) if plus.phi.size else 0.0


def greens_exact(h: Hierarchy, r: float = 0.0, plus: bool = True) -> np.ndarray:
    """Dense kernel H^{-1} on Omega_1 sites (ordered as np.flatnonzero(domain))."""
    op = assemble(h, plus, r)
    if op.n > DENSE_CAP:
        raise GreensError(f"{op.n} sites exceeds the dense cap {DENSE_CAP}")
    H = op.dense()
    c, low = sla.cho_factor(H)
    return sla.cho_solve((c, low), np.eye(op.n))


# ---------------------------------------------------------------- random walks


@dataclass(frozen=True)
class CubeCover:
    """Side-M cubes of fine sites restricted to the operator domain, with one-layer enlargements."""

    cube_of: np.ndarray  # per domain position, the cube index
    cube_coords: np.ndarray  # (n_cubes, d)
    n_per_axis: int  # cubes per axis
    members: tuple  # per cube, domain positions
    halos: tuple  # per cube, domain positions of the enlargement

    @property
    def n_cubes(self) -> int:
        return len(self.members)

    def distance(self, a: int, b: int) -> int:
        diff = np.abs(self.cube_coords[a] - self.cube_coords[b])
        return int(np.max(np.minimum(diff, self.n_per_axis - diff)))


def cube_cover(op: MultiscaleOperator, M: int, halo: int = 1) -> CubeCover:
    fine = op.hierarchy.fine
    n = fine.n_per_axis
    if M < 1 or n % M:
        raise GreensError(f"cube side {M} does not divide {n}")
    nc = n // M
    cc = fine.coords()[op.idx] // M
    flat = np.ravel_multi_index(tuple(cc.T), (nc,) * fine.d)
    used = np.unique(flat)
    remap = {int(c): i for i, c in enumerate(used)}
    cube_of = np.array([remap[int(c)] for c in flat], dtype=int)
    coords = np.array(np.unravel_index(used, (nc,) * fine.d)).T
    members, halos = [], []
    for i in range(used.size):
        members.append(np.flatnonzero(cube_of == i))
        diff = np.abs(cc - coords[i])
        near = np.max(np.minimum(diff, nc - diff), axis=1) <= halo
        halos.append(np.flatnonzero(near))
    return CubeCover(cube_of, coords, nc, tuple(members), tuple(halos))


def neumann_truncation(op: MultiscaleOperator, S: np.ndarray) -> np.ndarray:
    """H restricted to positions S with the gradient bonds leaving S dropped (kept Dirichlet at Omega_1)."""
    Hs = op.H[S][:, S].toarray()
    lap_s = op.lap[S][:, S].toarray()
    out_bonds = op.lap[S].toarray()
    off = out_bonds.sum(axis=1) - lap_s.sum(axis=1)  # minus the weight of bonds to domain sites outside S
    Hs[np.diag_indices_from(Hs)] += off
    return Hs


@dataclass(frozen=True)
class WalkExpansion:
    S: np.ndarray = field(repr=False)
    K: np.ndarray = field(repr=False)
    cover: CubeCover = field(repr=False)
    s: np.ndarray = field(repr=False)


def walk_pieces(op: MultiscaleOperator, cover: CubeCover, s=None) -> WalkExpansion:
    """S_s = sum s_c E(H_c~^{-1}) 1_c and K_s = sum s_c (1_c - H S_c) so that H S = I - K at s = 1."""
    n = op.n
    s = np.ones(cover.n_cubes) if s is None else np.asarray(s, dtype=float)
    H = op.dense()
    S = np.zeros((n, n))
    K = np.zeros((n, n))
    for c in range(cover.n_cubes):
        if s[c] == 0:
            continue
        hal, mem = cover.halos[c], cover.members[c]
        loc = np.linalg.solve(neumann_truncation(op, hal), np.eye(hal.size)[:, np.searchsorted(hal, mem)])
        Sc = np.zeros((n, mem.size))
        Sc[hal] = loc
        S[:, mem] += s[c] * Sc
        Kc = -H @ Sc
        Kc[mem, np.arange(mem.size)] += 1.0
        K[:, mem] += s[c] * Kc
    return WalkExpansion(S, K, cover, s)


@dataclass(frozen=True)
class WalkResult:
    G: np.ndarray = field(repr=False)
    errors: list
    theta: float
    spectral_radius: float


def random_walk_inverse(op: MultiscaleOperator, M: int, n_max: int = 30, s=None, exact=None, halo: int = 1) -> WalkResult:
    """Partial sums G_n = S sum_{m<=n} K^m and their max-entry errors against the exact inverse."""
    if op.n > DENSE_CAP:
        raise GreensError(f"{op.n} sites exceeds the dense cap {DENSE_CAP}")
    cover = cube_cover(op, M, halo)
    pieces = walk_pieces(op, cover, s)
    rho = float(np.max(np.abs(np.linalg.eigvals(pieces.K)))) if op.n else 0.0
    if exact is None and s is None:
        exact = np.linalg.inv(op.dense())
    G = pieces.S.copy()
    power = np.eye(op.n)
    errors = []
    for m in range(n_max + 1):
        if m:
            power = power @ pieces.K
            G = G + pieces.S @ power
        if exact is not None:
            errors.append(float(np.max(np.abs(G - exact))))
    theta = fit_ratio(errors) if errors else math.nan
    if math.isnan(theta):
        theta = rho
    return WalkResult(G, errors, theta, rho)


def fit_ratio(errors: list, floor: float = 1e-13) -> float:
    """Geometric decay ratio of an error series, fitted on the part above the round-off floor."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0 or e[0] == 0:
        return 0.0
    keep = e > floor * max(1.0, e[0])
    e = e[keep]
    if e.size < 3:
        return math.nan
    n = np.arange(e.size)
    slope = np.polyfit(n[1:], np.log(e[1:]), 1)[0]
    return float(math.exp(slope))


def critical_cube_size(op: MultiscaleOperator, sizes, n_max: int = 30) -> tuple[int | None, dict]:
    """Smallest M in `sizes` whose expansion contracts, and theta per M."""
    exact = np.linalg.inv(op.dense())
    table = {}
    best = None
    for M in sizes:
        res = random_walk_inverse(op, M, n_max, exact=exact)
        table[int(M)] = res.theta
        if best is None and res.theta < 1 and res.spectral_radius < 1:
            best = int(M)
    return best, table


def require_contraction(result: WalkResult, M: int) -> None:
    if result.spectral_radius >= 1:
        raise DivergentExpansion(f"expansion divergent at this M={M} (spectral radius {result.spectral_radius:.3f})")


# ---------------------------------------------------------------- decay fits


@dataclass(frozen=True)
class DecayCertificate:
    gamma: float
    C: float
    table: list
    status: str

    def to_json(self) -> dict:
        return {
            "table": [{"distance": d, "max_abs_entry": v} for d, v in self.table],
            "fit": {"gamma": self.gamma, "C": self.C},
            "status": self.status,
        }


def site_distances(fine: TorusLattice, idx: np.ndarray, origin: int) -> np.ndarray:
    """Periodic Chebyshev distance in physical units from idx[origin] to every idx site."""
    c = fine.coords()[idx]
    diff = np.abs(c - c[origin])
    return np.max(np.minimum(diff, fine.n_per_axis - diff), axis=1) * fine.spacing


def decay_certificate(G: np.ndarray, fine: TorusLattice, idx: np.ndarray | None = None, max_fraction: float = 0.25) -> DecayCertificate:
    """Fit log max|G(x, y)| at each distance against the distance, up to a fraction of the torus side."""
    idx = np.arange(fine.n_sites) if idx is None else idx
    c = fine.coords()[idx]
    n = fine.n_per_axis
    best: dict = {}
    for i in range(idx.size):
        diff = np.abs(c - c[i])
        dist = np.max(np.minimum(diff, n - diff), axis=1)
        row = np.abs(G[i])
        for dv in np.unique(dist):
            m = float(row[dist == dv].max())
            key = int(dv)
            best[key] = max(best.get(key, 0.0), m)
    table = sorted((k * fine.spacing, v) for k, v in best.items())
    limit = max_fraction * n * fine.spacing
    pts = [(d, v) for d, v in table if 0 < d <= limit and v > 1e-300]
    if len(pts) < 3 or pts[0][1] / pts[-1][1] < 1e2:
        return DecayCertificate(math.nan, math.nan, table, "inconclusive")
    x = np.array([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    slope, icpt = np.polyfit(x, y, 1)
    return DecayCertificate(float(-slope), float(math.exp(icpt)), table, "ok")


def resolvent_rate_1d(mu_bar: float) -> float:
    """Exact decay rate of [-Lap + mu_bar]^{-1} on Z: cosh(gamma) = 1 + mu_bar/2."""
    return math.acosh(1 + mu_bar / 2)


# ---------------------------------------------------------------- localized fields


@dataclass(frozen=True)
class LocalizedField:
    phi: np.ndarray
    phi_loc: np.ndarray
    sup_error: float


def localized_field(op: MultiscaleOperator, f: np.ndarray, M: int, r_layers: int, halo: int = 1) -> LocalizedField:
    """phi(c) = G(s^c) f with s^c = 1 on cubes within r_layers of c; phi_loc glues phi(c) on c."""
    cover = cube_cover(op, M, halo)
    phi = np.linalg.solve(op.dense(), f)
    loc = np.zeros_like(phi)
    cache: dict = {}
    for c in range(cover.n_cubes):
        s = np.array([1.0 if cover.distance(c, b) <= r_layers else 0.0 for b in range(cover.n_cubes)])
        key = s.tobytes()
        if key not in cache:
            p = walk_pieces(op, cover, s)
            cache[key] = p.S @ np.linalg.solve(np.eye(op.n) - p.K, f)
        loc[cover.members[c]] = cache[key][cover.members[c]]
    return LocalizedField(phi, loc, float(np.max(np.abs(phi - loc))) if phi.size else 0.0)


# ---------------------------------------------------------------- field swap


def shrink_mask(fine: TorusLattice, mask: np.ndarray, M: int, layers: int) -> np.ndarray:
    """Remove every side-M cube within `layers` cube shells of the complement (mask a union of cubes)."""
    n = fine.n_per_axis
    nc = n // M
    cc = fine.coords() // M
    flat = np.ravel_multi_index(tuple(cc.T), (nc,) * fine.d)
    cube_in = np.zeros(nc ** fine.d, dtype=bool)
    cube_in[flat[mask]] = True
    cube_out = np.zeros(nc ** fine.d, dtype=bool)
    cube_out[flat[~mask]] = True
    if np.any(cube_in & cube_out):
        raise GreensError("region is not a union of cubes")
    grown = _dilate(cube_out.reshape((nc,) * fine.d), layers).reshape(-1)
    return ~grown[flat]


@dataclass(frozen=True)
class SwapReport:
    max_diff: float
    threshold: float
    holds: bool
    probe_sites: int


def field_swap_check(h: Hierarchy, Phi: list, phi_ext: np.ndarray, M: int, r_layers: int, threshold: float | None = None, shrink: bool = True) -> SwapReport:
    """Compare phi' (Phi_k = 0 on Omega_{k+1}) with phi'' (Dirichlet zero on the 2r-shrunk Omega_{k+1})
    on the complement of the r-shrunk Omega_{k+1} inside Omega_1."""
    if h.k == 0:
        raise GreensError("field swap needs at least one averaging level")
    last = h.omegas[-1]
    data = list(Phi)
    data[-1] = np.where(_coarse_mask(h.fine, last, h.k), 0.0, np.asarray(Phi[-1], dtype=float))
    first = solve_minimizer(h, data, phi_ext, plus=False).phi
    removed = shrink_mask(h.fine, last, M, 2 * r_layers) if shrink else np.zeros_like(last)
    if not _is_block_union(h.fine, removed, h.k):
        raise GreensError("removed region must be a union of unit blocks")
    h2 = h.restricted(~removed)
    ext2 = np.where(removed, 0.0, np.asarray(phi_ext, dtype=float))
    second = solve_minimizer(h2, data, ext2, plus=False).phi
    probe = h.domain & ~shrink_mask(h.fine, last, M, r_layers)
    diff = float(np.max(np.abs(first - second)[probe])) if np.any(probe) else 0.0
    scale = max([float(np.max(np.abs(p))) for p in data] + [float(np.max(np.abs(phi_ext))), 1e-300])
    thr = math.exp(-r_layers / 2) * scale if threshold is None else threshold
    return SwapReport(diff, thr, diff <= thr, int(probe.sum()))
