"""Toroidal multiscale lattices, fields, block averaging and a small quadrature oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

DEFAULT_SITE_CAP = 1 << 16


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class TorusLattice:
    """Torus (L^-k Z / L^side Z)^d, sites enumerated lexicographically (last axis fastest)."""

    d: int
    L: int
    k: int
    side_exponent: int

    @property
    def n_per_axis(self) -> int:
        return self.L ** (self.side_exponent + self.k)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_per_axis,) * self.d

    @property
    def n_sites(self) -> int:
        return self.n_per_axis ** self.d

    @property
    def spacing(self) -> float:
        return float(self.L) ** (-self.k)

    @property
    def side(self) -> int:
        return self.L ** self.side_exponent

    def coords(self) -> np.ndarray:
        """(n_sites, d) integer coordinates in units of the lattice spacing."""
        grids = np.indices(self.shape).reshape(self.d, -1)
        return grids.T.copy()

    def index(self, coords) -> np.ndarray:
        c = np.mod(np.asarray(coords), self.n_per_axis)
        return np.ravel_multi_index(tuple(np.atleast_2d(c).T), self.shape)

    def coarser(self, levels: int = 1) -> "TorusLattice":
        if levels > self.k:
            raise LatticeError(f"cannot coarsen k={self.k} by {levels} levels")
        return TorusLattice(self.d, self.L, self.k - levels, self.side_exponent)

    def finer(self, levels: int = 1) -> "TorusLattice":
        return TorusLattice(self.d, self.L, self.k + levels, self.side_exponent)

    def shift(self, axis: int, step: int = 1) -> np.ndarray:
        """Index of x + step*e_axis for every site x."""
        c = self.coords()
        c[:, axis] += step
        return self.index(c)

    def to_json(self) -> dict:
        return {"dimension": self.d, "L": self.L, "k": self.k, "side_exponent": self.side_exponent}


@dataclass(frozen=True)
class LatticeField:
    lattice: TorusLattice
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.lattice.n_sites:
            raise LatticeError(f"expected {self.lattice.n_sites} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise LatticeError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_json(self) -> str:
        doc = self.lattice.to_json()
        doc["values"] = [float(x) for x in self.values]
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "LatticeField":
        doc = json.loads(text)
        lat = TorusLattice(doc["dimension"], doc["L"], doc["k"], doc["side_exponent"])
        return cls(lat, np.array(doc["values"], dtype=float))


def build_torus(d: int, L: int, side_exponent: int, k: int, cap: int = DEFAULT_SITE_CAP) -> TorusLattice:
    if d not in (1, 2, 3):
        raise LatticeError(f"dimension must be 1, 2 or 3, got {d}")
    if L < 2 or side_exponent < 1 or k < 0:
        raise LatticeError(f"invalid parameters L={L}, side_exponent={side_exponent}, k={k}")
    lat = TorusLattice(d, L, k, side_exponent)
    if lat.n_sites > cap:
        raise LatticeError(f"{lat.n_sites} sites exceeds cap {cap}")
    return lat


def block_map(lattice: TorusLattice, levels: int = 1) -> np.ndarray:
    """For each fine site, the index of its block on lattice.coarser(levels)."""
    coarse = lattice.coarser(levels)
    return coarse.index(lattice.coords() // lattice.L ** levels)


def averaging_matrix(lattice: TorusLattice, levels: int = 1) -> sp.csr_matrix:
    """Q_levels as a sparse (n_coarse, n_fine) matrix with entries L^{-d*levels}."""
    coarse = lattice.coarser(levels)
    rows = block_map(lattice, levels)
    cols = np.arange(lattice.n_sites)
    w = float(lattice.L) ** (-lattice.d * levels)
    return sp.csr_matrix((np.full(lattice.n_sites, w), (rows, cols)), shape=(coarse.n_sites, lattice.n_sites))


def block_average(f: LatticeField, target: TorusLattice | None = None) -> LatticeField:
    lat = f.lattice
    if lat.k < 1:
        raise LatticeError("field has no finer structure to average")
    coarse = lat.coarser(1)
    if target is not None and target != coarse:
        raise LatticeError(f"target {target} is not one level coarser than {lat}")
    return LatticeField(coarse, averaging_matrix(lat, 1) @ f.values)


def block_average_k(f: LatticeField, levels: int) -> LatticeField:
    if levels < 1:
        raise LatticeError("levels must be >= 1")
    return LatticeField(f.lattice.coarser(levels), averaging_matrix(f.lattice, levels) @ f.values)


def adjoint_average(coarse_field: LatticeField, fine_lattice: TorusLattice) -> LatticeField:
    """Q^T with counting inner products: (Q^T psi)(x) = L^-d psi(block(x))."""
    if fine_lattice.k < 1 or fine_lattice.coarser(1) != coarse_field.lattice:
        raise LatticeError("coarse field does not live on the blocks of the fine lattice")
    return LatticeField(fine_lattice, averaging_matrix(fine_lattice, 1).T @ coarse_field.values)


def scaling_factor(d: int, L: int) -> float:
    return float(L) ** (-(d - 2) / 2)


def rescale_field(f: LatticeField, direction: str) -> LatticeField:
    """down: phi -> phi_L(x) = L^{-(d-2)/2} phi(x/L), spacing grows by L; up is the inverse."""
    lat = f.lattice
    s = scaling_factor(lat.d, lat.L)
    if direction == "down":
        if lat.k < 1:
            raise LatticeError("spacing L^-k with k=0 cannot be scaled down to a coarser unit")
        return LatticeField(TorusLattice(lat.d, lat.L, lat.k - 1, lat.side_exponent + 1), s * f.values)
    if direction == "up":
        if lat.side_exponent < 1:
            raise LatticeError("torus side is a single block")
        return LatticeField(TorusLattice(lat.d, lat.L, lat.k + 1, lat.side_exponent - 1), f.values / s)
    raise LatticeError(f"unknown direction {direction!r}")


def bonds(lattice: TorusLattice, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward bonds (x, x+e); with a mask only bonds with both ends inside are kept."""
    tails, heads = [], []
    base = np.arange(lattice.n_sites)
    for axis in range(lattice.d):
        tails.append(base)
        heads.append(lattice.shift(axis, 1))
    t, h = np.concatenate(tails), np.concatenate(heads)
    if mask is not None:
        keep = mask[t] & mask[h]
        t, h = t[keep], h[keep]
    return t, h


def laplacian_matrix(lattice: TorusLattice, mask: np.ndarray | None = None) -> sp.csr_matrix:
    """Counting-measure -Delta built from bonds; with a mask this is the Neumann restriction."""
    t, h = bonds(lattice, mask)
    n = lattice.n_sites
    b = sp.csr_matrix(
        (np.r_[-np.ones(t.size), np.ones(t.size)], (np.r_[np.arange(t.size), np.arange(t.size)], np.r_[t, h])),
        shape=(t.size, n),
    )
    return (b.T @ b).tocsr()


def neumann_gradient_norm(f: LatticeField, mask: np.ndarray | None = None) -> float:
    """spacing^{d-2} * sum over bonds inside X of (phi(x+e) - phi(x))^2."""
    lat = f.lattice
    if mask is not None and not np.any(mask):
        return 0.0
    t, h = bonds(lat, mask)
    diff = f.values[h] - f.values[t]
    return lat.spacing ** (lat.d - 2) * float(diff @ diff)


def block_mask(lattice: TorusLattice, coarse_mask: np.ndarray, levels: int) -> np.ndarray:
    """Fine-site mask of the union of the given blocks of lattice.coarser(levels)."""
    return np.asarray(coarse_mask, dtype=bool)[block_map(lattice, levels)]


@dataclass(frozen=True)
class QuadratureSpec:
    nodes: int = 20
    scale: float | np.ndarray = 1.0
    center: float | np.ndarray = 0.0
    max_sites: int = 8
    max_points: int = 20_000_000
    chunk: int = 1 << 18
    estimate_error: bool = True


@dataclass(frozen=True)
class IntegralResult:
    value: float
    error: float
    nodes: int


def hermite_rule(nodes: int, scale, center, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-site points (n, nodes) and weights for int f dx with Gaussian-scaled Gauss-Hermite."""
    t, w = np.polynomial.hermite_e.hermegauss(nodes)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (n,))
    center = np.broadcast_to(np.asarray(center, dtype=float), (n,))
    pts = center[:, None] + scale[:, None] * t[None, :]
    wts = scale[:, None] * (w * np.exp(t ** 2 / 2))[None, :]
    return pts, wts


def _tensor_sum(density: Callable, pts: np.ndarray, wts: np.ndarray, chunk: int) -> float:
    n, m = pts.shape
    total = 0.0
    n_points = m ** n
    done = 0
    while done < n_points:
        count = min(chunk, n_points - done)
        flat = np.arange(done, done + count)
        idx = np.array(np.unravel_index(flat, (m,) * n)).T
        x = pts[np.arange(n)[None, :], idx]
        w = np.prod(wts[np.arange(n)[None, :], idx], axis=1)
        total += float(np.dot(w, density(x)))
        done += count
    return total


def integrate_density(density: Callable, lattice: TorusLattice | int, spec: QuadratureSpec = QuadratureSpec()) -> IntegralResult:
    """Tensor Gauss-Hermite integral of a vectorized density rho(X), X of shape (m, n_sites)."""
    n = lattice if isinstance(lattice, int) else lattice.n_sites
    if n > spec.max_sites:
        raise LatticeError(f"{n} sites exceeds the tensor quadrature limit {spec.max_sites}")
    top = 2 * spec.nodes if spec.estimate_error else spec.nodes
    if float(top) ** n > spec.max_points:
        raise LatticeError(f"{top}^{n} quadrature points exceeds budget {spec.max_points}")
    pts, wts = hermite_rule(spec.nodes, spec.scale, spec.center, n)
    value = _tensor_sum(density, pts, wts, spec.chunk)
    if not spec.estimate_error:
        return IntegralResult(value, math.nan, spec.nodes)
    pts2, wts2 = hermite_rule(2 * spec.nodes, spec.scale, spec.center, n)
    fine = _tensor_sum(density, pts2, wts2, spec.chunk)
    return IntegralResult(fine, abs(fine - value), 2 * spec.nodes)


def gaussian_normalization(a: float, n_sites: int) -> float:
    """log of (2 pi / a)^{n/2}."""
    return 0.5 * n_sites * math.log(2 * math.pi / a)
