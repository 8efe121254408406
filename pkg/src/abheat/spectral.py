"""Neumann spectrum of the lattice generator and forward heat evolution."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as sla
from numpy.typing import NDArray
from scipy.stats import poisson

from .lattice import DomainSpec, Lattice, LinearOperator, adjoint_laplacian, discrete_laplacian


class SpectralError(RuntimeError):
    pass


class HeatBudgetError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Eigenpairs ``L phi_n = -lambda_n phi_n`` with ``eps^d sum phi_n^2 = 1``.

    ``eigenfunctions`` has shape ``[n_sites, k]``; column ``n`` is ``phi_n``.
    """

    eigenvalues: NDArray[np.float64]
    eigenfunctions: NDArray[np.float64]
    cell_volume: float
    origin: str
    residuals: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    modes: tuple = ()

    def __len__(self) -> int:
        return len(self.eigenvalues)

    def phi(self, n: int) -> NDArray:
        return self.eigenfunctions[:, n]


def _orient(vectors: NDArray, lattice: Lattice, w: float) -> NDArray:
    """Fix sign (and rotation inside near-degenerate groups) deterministically.

    Inside a group, the first vector is the direction most correlated with
    the decreasing ramp in ``x_1``, the next with ``x_2`` and so on; any
    remaining directions are orthonormalised in the order returned by the
    solver. Signs make that correlation positive, falling back to the largest
    entry being positive.
    """
    pos = lattice.positions
    ramps = [-(pos[:, j] - pos[:, j].mean()) for j in range(lattice.dim)]
    q = vectors.copy()
    # orthonormalise in the eps^d inner product
    q, _ = np.linalg.qr(q * math.sqrt(w))
    q /= math.sqrt(w)
    out = []
    remaining = q
    for ramp in ramps:
        if remaining.shape[1] == 0:
            break
        c = w * (remaining.T @ ramp)
        if np.linalg.norm(c) < 1e-8:
            continue
        v = remaining @ (c / np.linalg.norm(c))
        out.append(v)
        proj = remaining - np.outer(v, w * (v @ remaining))
        u, sv, _ = np.linalg.svd(proj * math.sqrt(w), full_matrices=False)
        keep = sv > 1e-8
        remaining = u[:, keep] / math.sqrt(w)
    for j in range(remaining.shape[1]):
        v = remaining[:, j]
        i = int(np.argmax(np.abs(v) > (1 - 1e-6) * np.abs(v).max()))
        out.append(v if v[i] >= 0 else -v)
    return np.column_stack(out)


def _group(vals: NDArray, rtol: float = 1e-6) -> list[list[int]]:
    groups: list[list[int]] = []
    for i, v in enumerate(vals):
        if groups and abs(v - vals[groups[-1][-1]]) <= rtol * max(1.0, abs(v)):
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def eig_neumann(lattice: Lattice, k: int, *, tol: float = 1e-8,
                laplacian: LinearOperator | None = None) -> SpectralBasis:
    """The ``k`` smallest-magnitude eigenpairs of the lattice generator.

    Right eigenvectors, real parts, normalised so that ``eps^d sum phi^2 = 1``
    with ``phi_0 > 0``. Uses shift-invert Arnoldi (ARPACK) with a positive
    shift for larger lattices, a dense solve otherwise. Raises
    :class:`SpectralError` if the residual ``max|L phi + lambda phi|``
    exceeds ``tol * max(1, lambda)``.
    """
    n = lattice.n_sites
    if not 0 < k <= n - 1 and not (n == 1 and k == 1):
        raise ValueError(f"need 0 < k < site count ({n}), got {k}")
    lap = laplacian if laplacian is not None else discrete_laplacian(lattice)
    A = lap.matrix
    w = lattice.cell_volume
    if n <= 400 or k + 2 >= n:
        vals, vecs = np.linalg.eig(A.toarray())
    else:
        v0 = np.ones(n) + np.linspace(0.0, 1.0, n)
        ncv = min(n - 1, max(2 * k + 1, k + 20))
        try:
            vals, vecs = sla.eigs(A.tocsc(), k=min(k + 4, n - 2), sigma=1.0, v0=v0,
                                  ncv=max(ncv, min(n - 1, 2 * (k + 4) + 1)), tol=1e-13)
        except sla.ArpackNoConvergence as exc:
            raise SpectralError(f"eigensolver did not converge: {exc}") from exc
    lam = -vals.real
    order = np.argsort(lam, kind="stable")[:k]
    lam = lam[order]
    phis = vecs[:, order].real
    lam[0] = abs(lam[0]) if abs(lam[0]) < 1e-9 else lam[0]

    cols = []
    for grp in _group(lam):
        cols.append(_orient(phis[:, grp], lattice, w))
    phis = np.column_stack(cols)
    phis /= np.sqrt(w * (phis ** 2).sum(axis=0))
    # Rayleigh-type refinement of eigenvalues against the normalised vectors
    lam = np.array([-(phis[:, j] @ (A @ phis[:, j])) / (phis[:, j] @ phis[:, j])
                    for j in range(phis.shape[1])])
    if abs(lam[0]) < 1e-9:
        lam[0] = 0.0
    res = np.abs(A @ phis + phis * lam).max(axis=0)
    bad = res > tol * np.maximum(1.0, np.abs(lam))
    if bad.any():
        raise SpectralError(f"eigen residuals too large: {res[bad]} for n={np.flatnonzero(bad)}")
    return SpectralBasis(lam, phis, w, "numeric", res)


def closed_form_basis(domain: DomainSpec, lattice: Lattice, k: int) -> SpectralBasis:
    """Sampled cosine products for a rectangle, ``lambda = pi^2 sum (m_j / a_j)^2``."""
    if domain.kind != "rectangle":
        raise ValueError("closed-form basis needs a rectangle")
    sides = np.array(domain.sides)
    d = domain.dim
    mmax = int(math.ceil(math.sqrt(k))) + 2
    modes = []
    for m in itertools.product(range(mmax + 1), repeat=d):
        lam = math.pi ** 2 * float(((np.array(m) / sides) ** 2).sum())
        modes.append((lam, m))
    modes.sort()
    modes = modes[:k]
    x = lattice.positions
    w = lattice.cell_volume
    phis = np.empty((lattice.n_sites, k))
    for j, (_, m) in enumerate(modes):
        f = np.ones(lattice.n_sites)
        for a in range(d):
            f *= np.cos(math.pi * m[a] * x[:, a] / sides[a])
        phis[:, j] = f / math.sqrt(w * (f ** 2).sum())
    return SpectralBasis(np.array([lam for lam, _ in modes]), phis, w,
                         "closed_form_rectangle", modes=tuple(m for _, m in modes))


@dataclass(frozen=True, eq=False)
class HeatEvolver:
    """Uniformised heat semigroup ``exp(t L*)`` on lattice densities."""

    lattice: Lattice
    adjoint: LinearOperator
    laplacian: LinearOperator
    rate: float
    tol: float = 1e-12
    max_terms: int = 2_000_000

    @classmethod
    def from_lattice(cls, lattice: Lattice, tol: float = 1e-12,
                     max_terms: int = 2_000_000) -> "HeatEvolver":
        lap = discrete_laplacian(lattice)
        adj = adjoint_laplacian(lattice, lap)
        rate = float(np.abs(lap.matrix.diagonal()).max()) if lattice.n_sites else 0.0
        return cls(lattice, adj, lap, rate, tol, max_terms)

    def _uniformised(self, op: LinearOperator, f: NDArray, t: float) -> NDArray:
        if t < 0:
            raise ValueError("t must be nonnegative")
        f = np.asarray(f, dtype=float)
        if t == 0 or self.rate == 0:
            return f.copy()
        mu = self.rate * t
        kmax = int(poisson.isf(self.tol, mu)) + 1
        if kmax > self.max_terms:
            raise HeatBudgetError(f"uniformisation needs {kmax} terms (cap {self.max_terms})")
        kmin = max(0, int(poisson.ppf(self.tol, mu)) - 1)
        weights = poisson.pmf(np.arange(kmin, kmax + 1), mu)
        weights /= weights.sum()
        inv = 1.0 / self.rate
        M = op.matrix
        g = f.copy()
        for _ in range(kmin):
            g = g + inv * (M @ g)
        out = weights[0] * g
        for wk in weights[1:]:
            g = g + inv * (M @ g)
            out += wk * g
        return out

    def evolve(self, density: NDArray, t: float) -> NDArray:
        return self._uniformised(self.adjoint, density, t)

    def evolve_backward(self, f: NDArray, t: float) -> NDArray:
        """``exp(t L) f`` for test functions (the dual evolution)."""
        return self._uniformised(self.laplacian, f, t)


def evolve_heat(evolver: HeatEvolver, density0: NDArray, t: float) -> NDArray:
    """Forward heat evolution of a lattice density to time ``t``.

    Poisson-weighted powers of ``I + L*/rate``, truncated so the neglected
    Poisson mass is at most ``evolver.tol`` on each side. The kept weights are
    renormalised, so total signed mass is preserved up to rounding.
    """
    return evolver.evolve(density0, t)


def total_variation(density: NDArray, lattice: Lattice) -> float:
    return lattice.cell_volume * float(np.abs(density).sum())


def normalize_tv(density: NDArray, lattice: Lattice) -> NDArray:
    """Scale a density to total variation 2; the zero density stays zero."""
    density = np.asarray(density, dtype=float)
    tv = total_variation(density, lattice)
    if tv == 0:
        return np.zeros_like(density)
    return density * (2.0 / tv)


def normalizer_C(evolver: HeatEvolver, density0: NDArray, times) -> NDArray:
    """``C(t) = 2 / TV(exp(t L*) u0)`` on a grid of times.

    ``density0`` must have total variation 2.
    """
    lat = evolver.lattice
    tv0 = total_variation(density0, lat)
    if abs(tv0 - 2.0) > 1e-9:
        raise ValueError(f"initial density has total variation {tv0}, expected 2")
    times = np.asarray(times, dtype=float)
    order = np.argsort(times)
    out = np.empty(len(times))
    cur, t_prev = np.asarray(density0, dtype=float), 0.0
    for idx in order:
        t = times[idx]
        cur = evolver.evolve(cur, t - t_prev)
        t_prev = t
        tv = total_variation(cur, lat)
        if tv < 1e-280:
            raise FloatingPointError(f"evolved total variation underflowed at t={t}")
        out[idx] = 2.0 / tv
    return out


def write_basis(basis: SpectralBasis, path) -> None:
    """Plain text: eigenvalue line, then one row of ``phi`` values per site."""
    with open(path, "w") as fh:
        fh.write(f"# abheat basis v1 origin={basis.origin} k={len(basis)} "
                 f"sites={basis.eigenfunctions.shape[0]} cell_volume={basis.cell_volume:.17g}\n")
        fh.write(" ".join(f"{v:.17g}" for v in basis.eigenvalues) + "\n")
        for row in basis.eigenfunctions:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_basis(path) -> SpectralBasis:
    with open(path) as fh:
        header = fh.readline().split()
        meta = dict(tok.split("=", 1) for tok in header if "=" in tok)
        lam = np.array([float(v) for v in fh.readline().split()])
        phis = np.loadtxt(fh, ndmin=2)
    return SpectralBasis(lam, phis.reshape(-1, len(lam)), float(meta["cell_volume"]), meta["origin"])
