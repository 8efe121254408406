"""Lattice approximation of a bounded domain with reflecting boundary walks.

Sites are the points of ``eps * Z^d`` inside the closed domain. Sites with
fewer than ``d`` lattice neighbours are pruned (repeatedly, until nothing
changes). Interior sites jump to each of their ``2d`` neighbours with equal
probability; boundary sites get probabilities whose mean displacement points
along the inward normal of the nearest boundary point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components


class LatticeError(ValueError):
    pass


class EmptyLatticeError(LatticeError):
    pass


class DisconnectedLatticeError(LatticeError):
    pass


class InfeasibleBoundaryError(LatticeError):
    def __init__(self, message: str, site: Sequence[float] | None = None):
        super().__init__(message)
        self.site = None if site is None else tuple(site)


class NormalSearchError(LatticeError):
    pass


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    """A bounded connected domain in 2 or 3 dimensions.

    Use the constructors :meth:`rectangle`, :meth:`disc` and :meth:`implicit`.
    The signed distance is negative inside and positive outside.
    """

    kind: str
    dim: int
    sides: tuple[float, ...] = ()
    center: tuple[float, ...] = ()
    radius: float = 0.0
    sdf: Callable[[NDArray], NDArray] | None = field(default=None, compare=False)
    bounds: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.dim}")
        if self.kind == "rectangle":
            if len(self.sides) != self.dim or min(self.sides) <= 0:
                raise ValueError(f"bad rectangle sides {self.sides}")
        elif self.kind == "disc":
            if len(self.center) != self.dim or self.radius <= 0:
                raise ValueError("disc needs a center of length dim and radius > 0")
        elif self.kind == "implicit":
            if self.sdf is None or self.bounds is None:
                raise ValueError("implicit domain needs sdf and bounds")
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def rectangle(cls, *sides: float) -> "DomainSpec":
        """Axis-aligned box ``[0, a] x [0, b] (x [0, c])``."""
        return cls("rectangle", len(sides), sides=tuple(float(s) for s in sides))

    @classmethod
    def disc(cls, center: Sequence[float], radius: float) -> "DomainSpec":
        return cls("disc", len(center), center=tuple(float(c) for c in center),
                   radius=float(radius))

    @classmethod
    def implicit(cls, sdf: Callable[[NDArray], NDArray], lower: Sequence[float],
                 upper: Sequence[float]) -> "DomainSpec":
        """Domain given by a signed-distance evaluator ``sdf(points[n, d]) -> [n]``.

        ``lower``/``upper`` must enclose the domain.
        """
        lo = tuple(float(v) for v in lower)
        hi = tuple(float(v) for v in upper)
        return cls("implicit", len(lo), sdf=sdf, bounds=(lo, hi))

    def bounding_box(self) -> tuple[NDArray, NDArray]:
        if self.kind == "rectangle":
            return np.zeros(self.dim), np.array(self.sides)
        if self.kind == "disc":
            c = np.array(self.center)
            return c - self.radius, c + self.radius
        return np.array(self.bounds[0]), np.array(self.bounds[1])

    def signed_distance(self, points: NDArray) -> NDArray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "rectangle":
            half = np.array(self.sides) / 2
            q = np.abs(x - half) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside
        if self.kind == "disc":
            return np.linalg.norm(x - np.array(self.center), axis=1) - self.radius
        return np.asarray(self.sdf(x), dtype=float).reshape(len(x))


# ---------------------------------------------------------------------------
# Boundary geometry and jump probabilities
# ---------------------------------------------------------------------------


def _sdf_gradient(domain: DomainSpec, y: NDArray, h: float = 1e-6) -> NDArray:
    d = len(y)
    pts = np.repeat(y[None, :], 2 * d, axis=0)
    for j in range(d):
        pts[2 * j, j] += h
        pts[2 * j + 1, j] -= h
    s = domain.signed_distance(pts)
    return (s[0::2] - s[1::2]) / (2 * h)


def nearest_boundary_normal(domain: DomainSpec, x: Sequence[float], *,
                            tol: float = 1e-10, max_iter: int = 500) -> NDArray:
    """Inward unit normal at the boundary point nearest to ``x``.

    Rectangles: when several faces are equally near (corners), the inward
    normals of those faces are summed, i.e. the angle bisector is returned.
    Implicit domains: damped projected-gradient search for the foot point.
    """
    x = np.asarray(x, dtype=float)
    if domain.kind == "rectangle":
        sides = np.array(domain.sides)
        dist = np.concatenate([x, sides - x])
        near = np.abs(dist - dist.min()) <= 1e-9 * max(1.0, float(sides.max()))
        n = np.zeros(domain.dim)
        for j in range(domain.dim):
            n[j] += float(near[j]) - float(near[domain.dim + j])
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise NormalSearchError(f"no unique nearest face for {x.tolist()}")
        return n / norm
    if domain.kind == "disc":
        v = np.array(domain.center) - x
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise NormalSearchError("disc centre has no nearest boundary point")
        return v / norm

    # implicit: alternate a Newton projection onto the zero level set with a
    # damped tangential move that makes (x - y) parallel to the gradient.
    y = x.copy()
    for _ in range(max_iter):
        g = _sdf_gradient(domain, y)
        gg = float(g @ g)
        if gg == 0.0:
            break
        s = float(domain.signed_distance(y)[0])
        y_new = y - s * g / gg
        n = g / math.sqrt(gg)
        r = x - y_new
        y_new = y_new + 0.5 * (r - (r @ n) * n)
        step = float(np.linalg.norm(y_new - y))
        y = y_new
        if step < tol and abs(s) < tol:
            g = _sdf_gradient(domain, y)
            return -g / np.linalg.norm(g)
    raise NormalSearchError(f"nearest-point search did not converge for {x.tolist()}")


def _lp(c, A_ub, b_ub, A_eq, b_eq, nvar):
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=[(None, None)] * nvar, method="highs")
    return res


def solve_boundary_jumps(offsets: NDArray, normal: NDArray) -> tuple[NDArray, float]:
    """Jump probabilities for a boundary site.

    ``offsets`` are the displacements ``y - x`` (shape ``[k, d]``, any common
    scale) in the canonical direction order. Returns ``(p, c1)`` where ``p``
    sums to one, is nonnegative and its mean displacement equals ``c1 * normal``
    with ``c1 > 0`` (in the units of ``offsets``). Among feasible solutions the
    one maximising the smallest probability is chosen; remaining ties are
    broken by maximising ``p`` lexicographically in direction order.
    """
    offsets = np.asarray(offsets, dtype=float)
    normal = np.asarray(normal, dtype=float)
    k, d = offsets.shape
    if k < d:
        raise InfeasibleBoundaryError(f"site has {k} < {d} neighbours")
    normal = normal / np.linalg.norm(normal)
    # orthonormal complement of the normal
    q, _ = np.linalg.qr(np.column_stack([normal, np.eye(d)]))
    tangents = q[:, 1:d].T
    A_eq = np.vstack([np.ones(k), tangents @ offsets.T])
    b_eq = np.zeros(d)
    b_eq[0] = 1.0
    along = offsets @ normal

    # largest attainable normal drift; c1 must stay a fixed fraction above 0
    res = _lp(-along, -np.eye(k), np.zeros(k), A_eq, b_eq, k)
    if res.status != 0 or -res.fun <= 1e-12 * np.abs(offsets).max():
        raise InfeasibleBoundaryError("no nonnegative jump law with inward drift")
    c_floor = 1e-6 * (-res.fun)

    # variables (p_1..p_k, t); maximise t subject to p_i >= t
    A_eq_t = np.hstack([A_eq, np.zeros((d, 1))])
    A_ub = np.vstack([
        np.hstack([-np.eye(k), np.ones((k, 1))]),
        np.append(-along, 0.0)[None, :],
    ])
    b_ub = np.append(np.zeros(k), -c_floor)
    c = np.zeros(k + 1)
    c[-1] = -1.0
    res = _lp(c, A_ub, b_ub, A_eq_t, b_eq, k + 1)
    if res.status != 0:
        raise InfeasibleBoundaryError("max-min probability problem failed: " + res.message)
    t_star = res.x[-1]
    p = res.x[:k]

    # lexicographic tie-break over the optimal face
    A_ub2 = np.vstack([-np.eye(k), -along[None, :]])
    b_ub2 = np.append(np.full(k, -(t_star - 1e-12)), -c_floor)
    fixed_rows, fixed_vals = [], []
    for i in range(k):
        if fixed_rows:
            A_e = np.vstack([A_eq, np.array(fixed_rows)])
            b_e = np.concatenate([b_eq, fixed_vals])
        else:
            A_e, b_e = A_eq, b_eq
        c = np.zeros(k)
        c[i] = -1.0
        res = _lp(c, A_ub2, b_ub2, A_e, b_e, k)
        if res.status != 0:
            break
        p = res.x
        row = np.zeros(k)
        row[i] = 1.0
        fixed_rows.append(row)
        fixed_vals.append(p[i])

    # remove solver-level infeasibility by projecting onto the equality set
    resid = A_eq @ p - b_eq
    p = p - A_eq.T @ np.linalg.solve(A_eq @ A_eq.T, resid)
    p = np.where(np.abs(p) < 1e-15, 0.0, p)
    if p.min() < -1e-12:
        raise InfeasibleBoundaryError("projected probabilities became negative")
    p = np.maximum(p, 0.0)
    c1 = float(p @ along)
    if c1 <= 0:
        raise InfeasibleBoundaryError("non-positive normal drift")
    return p, c1


def compute_holding_time(offsets: NDArray, jump_prob: NDArray, qv_rate: float = 1.0) -> float:
    """Mean holding time making the summed quadratic-variation rate equal ``qv_rate``.

    ``h = sum_y p_xy |y - x|^2 / qv_rate``. With ``qv_rate=1`` and unit-length
    (``eps``) jumps this is ``eps**2``.
    """
    offsets = np.asarray(offsets, dtype=float)
    sq = np.einsum("ij,ij->i", offsets, offsets)
    return float(np.asarray(jump_prob, dtype=float) @ sq) / qv_rate


# ---------------------------------------------------------------------------
# Lattice
# ---------------------------------------------------------------------------


def _directions(d: int) -> NDArray:
    dirs = np.zeros((2 * d, d), dtype=np.int64)
    for j in range(d):
        dirs[2 * j, j] = 1
        dirs[2 * j + 1, j] = -1
    return dirs


@dataclass(frozen=True, eq=False)
class Lattice:
    """Immutable site graph with jump law and holding times.

    Directed edges are stored in CSR layout: the neighbours of site ``i`` are
    ``indices[indptr[i]:indptr[i+1]]`` (canonical direction order ``+e1, -e1,
    +e2, ...``) with probabilities ``probs`` over the same slice.
    """

    epsilon: float
    dim: int
    coords: NDArray[np.int64]
    indptr: NDArray[np.int64]
    indices: NDArray[np.int64]
    probs: NDArray[np.float64]
    holding: NDArray[np.float64]
    boundary: NDArray[np.bool_]
    normals: NDArray[np.float64]
    c1: NDArray[np.float64]
    qv_rate: float
    pruned: int = 0

    @property
    def n_sites(self) -> int:
        return len(self.coords)

    @property
    def cell_volume(self) -> float:
        return self.epsilon ** self.dim

    @property
    def positions(self) -> NDArray:
        return self.coords * self.epsilon

    @property
    def edge_sources(self) -> NDArray[np.int64]:
        return np.repeat(np.arange(self.n_sites), np.diff(self.indptr))

    @property
    def inv_holding(self) -> NDArray:
        return 1.0 / self.holding

    def neighbors(self, i: int) -> NDArray[np.int64]:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def jump_probs(self, i: int) -> NDArray:
        return self.probs[self.indptr[i]:self.indptr[i + 1]]

    def index_of(self, coord: Sequence[int]) -> int:
        hits = np.flatnonzero((self.coords == np.asarray(coord)).all(axis=1))
        if len(hits) == 0:
            raise KeyError(f"no site at {tuple(coord)}")
        return int(hits[0])

    def drift(self, i: int) -> NDArray:
        """Mean jump displacement ``sum_y p_xy (y - x)`` in length units."""
        nb = self.neighbors(i)
        return self.jump_probs(i) @ ((self.coords[nb] - self.coords[i]) * self.epsilon)

    def constraint_residuals(self) -> dict[str, float]:
        """Max deviations of the jump-law constraints over all sites."""
        row_dev = 0.0
        tang = 0.0
        min_c1 = math.inf
        for i in range(self.n_sites):
            row_dev = max(row_dev, abs(math.fsum(self.jump_probs(i)) - 1.0))
            if self.boundary[i]:
                dr = self.drift(i)
                n = self.normals[i]
                c1 = float(dr @ n)
                tang = max(tang, float(np.linalg.norm(dr - c1 * n)))
                min_c1 = min(min_c1, c1)
        return {
            "max_row_sum_deviation": row_dev,
            "max_tangential_drift": tang,
            "max_tangential_drift_over_eps": tang / self.epsilon,
            "min_c1": min_c1 if math.isfinite(min_c1) else float("nan"),
            "min_prob": float(self.probs.min()) if len(self.probs) else float("nan"),
        }

    def constraint_violations(self, row_tol: float = 1e-12,
                              drift_tol: float = 1e-10) -> list[dict]:
        """Sites breaking the jump-law constraints.

        Checks ``sum p = 1`` within ``row_tol``, ``p >= 0``, and for boundary
        sites a positive normal drift with tangential part at most
        ``drift_tol * eps``. The normal is the stored one, so corrupting
        ``probs`` alone is caught.
        """
        out = []
        for i in range(self.n_sites):
            p = self.jump_probs(i)
            dev = abs(math.fsum(p) - 1.0)
            where = {"site": i, "coord": self.coords[i].tolist()}
            if dev > row_tol:
                out.append({**where, "check": "row_sum", "value": dev})
            if len(p) and p.min() < 0:
                out.append({**where, "check": "negative_prob", "value": float(p.min())})
            if self.boundary[i] and np.all(np.isfinite(self.normals[i])):
                dr = self.drift(i)
                n = self.normals[i]
                c1 = float(dr @ n)
                tang = float(np.linalg.norm(dr - c1 * n))
                if tang > drift_tol * self.epsilon:
                    out.append({**where, "check": "tangential_drift", "value": tang / self.epsilon})
                if c1 <= 0:
                    out.append({**where, "check": "normal_drift", "value": c1})
        return out


def _prune(coords: NDArray, d: int) -> tuple[NDArray, int]:
    dirs = _directions(d)
    removed = 0
    while True:
        keyset = {tuple(c) for c in coords.tolist()}
        counts = np.array([sum((tuple(np.add(c, e)) in keyset) for e in dirs.tolist())
                           for c in coords.tolist()], dtype=np.int64)
        keep = counts >= d
        if keep.all():
            return coords, removed
        removed += int((~keep).sum())
        coords = coords[keep]
        if len(coords) == 0:
            return coords, removed


def _candidate_sites(domain: DomainSpec, epsilon: float) -> NDArray:
    lo, hi = domain.bounding_box()
    kmin = np.floor(lo / epsilon - 1e-9).astype(int)
    kmax = np.ceil(hi / epsilon + 1e-9).astype(int)
    axes = [np.arange(a, b + 1) for a, b in zip(kmin, kmax)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.dim)
    inside = domain.signed_distance(grid * epsilon) <= 1e-9 * epsilon
    return grid[inside].astype(np.int64)


def build_lattice(domain: DomainSpec, epsilon: float, *, qv_rate: float | None = None) -> Lattice:
    """Build the pruned lattice, its jump law and holding times.

    ``qv_rate`` is the summed per-coordinate quadratic-variation rate imposed
    on the walk through the holding times. The default ``2 * d`` makes the
    generator approximate the Laplacian ``Delta`` (eigenvalues ``pi^2(...)``);
    ``qv_rate=1`` gives interior holding time ``eps**2``.
    """
    d = domain.dim
    if qv_rate is None:
        qv_rate = 2.0 * d
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    coords = _candidate_sites(domain, epsilon)
    coords, removed = _prune(coords, d)
    if len(coords) == 0:
        raise EmptyLatticeError(f"no sites survive for epsilon={epsilon}")
    order = np.lexsort(coords.T[::-1])
    coords = coords[order]

    lookup = {tuple(c): i for i, c in enumerate(coords.tolist())}
    dirs = _directions(d)
    n = len(coords)
    indptr = np.zeros(n + 1, dtype=np.int64)
    nbrs: list[list[int]] = []
    nbr_dirs: list[list[int]] = []
    for i, c in enumerate(coords.tolist()):
        row, rd = [], []
        for k, e in enumerate(dirs.tolist()):
            j = lookup.get(tuple(a + b for a, b in zip(c, e)))
            if j is not None:
                row.append(j)
                rd.append(k)
        nbrs.append(row)
        nbr_dirs.append(rd)
        indptr[i + 1] = indptr[i] + len(row)
    indices = np.array([j for row in nbrs for j in row], dtype=np.int64)

    if n > 1:
        adj = sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp > 1:
            raise DisconnectedLatticeError(f"lattice has {ncomp} components")

    probs = np.empty(len(indices))
    holding = np.empty(n)
    boundary = np.zeros(n, dtype=bool)
    normals = np.full((n, d), np.nan)
    c1 = np.full(n, np.nan)
    cache: dict = {}
    for i in range(n):
        rd = nbr_dirs[i]
        offs = dirs[rd].astype(float)
        sl = slice(indptr[i], indptr[i + 1])
        if len(rd) == 2 * d:
            p = np.full(2 * d, 1.0 / (2 * d))
        else:
            boundary[i] = True
            x = coords[i] * epsilon
            nrm = nearest_boundary_normal(domain, x)
            key = (tuple(rd), tuple(np.round(nrm, 13)))
            if key not in cache:
                try:
                    cache[key] = solve_boundary_jumps(offs, nrm)
                except InfeasibleBoundaryError as exc:
                    raise InfeasibleBoundaryError(
                        f"{exc} at site {i} (x={x.tolist()})", site=x) from exc
            p, c_unit = cache[key]
            normals[i] = nrm
            c1[i] = c_unit * epsilon
        probs[sl] = p
        holding[i] = compute_holding_time(offs * epsilon, p, qv_rate)

    return Lattice(epsilon=float(epsilon), dim=d, coords=coords, indptr=indptr,
                   indices=indices, probs=probs, holding=holding, boundary=boundary,
                   normals=normals, c1=c1, qv_rate=float(qv_rate), pruned=removed)


def lattice_from_arrays(epsilon: float, coords: NDArray, boundary: NDArray,
                        holding: NDArray, edges: NDArray, probs: NDArray,
                        qv_rate: float = float("nan")) -> Lattice:
    """Assemble a lattice from raw site/edge arrays (e.g. a loaded file).

    Boundary normals and ``c1`` are recovered from the mean jump displacement.
    """
    coords = np.asarray(coords, dtype=np.int64)
    n, d = coords.shape
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    src, dst = edges[order, 0], edges[order, 1]
    probs = np.asarray(probs, dtype=float)[order]
    # restore canonical direction order within each row
    dir_id = np.zeros(len(src), dtype=np.int64)
    delta = coords[dst] - coords[src]
    for j in range(d):
        dir_id += np.where(delta[:, j] == 1, 2 * j, 0) + np.where(delta[:, j] == -1, 2 * j + 1, 0)
    order = np.lexsort((dir_id, src))
    src, dst, probs = src[order], dst[order], probs[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    normals = np.full((n, d), np.nan)
    c1 = np.full(n, np.nan)
    boundary = np.asarray(boundary, dtype=bool)
    for i in np.flatnonzero(boundary):
        sl = slice(indptr[i], indptr[i + 1])
        dr = probs[sl] @ ((coords[dst[sl]] - coords[i]) * epsilon)
        norm = np.linalg.norm(dr)
        if norm > 0:
            normals[i] = dr / norm
            c1[i] = norm
    return Lattice(epsilon=float(epsilon), dim=d, coords=coords, indptr=indptr,
                   indices=dst.astype(np.int64), probs=probs,
                   holding=np.asarray(holding, dtype=float), boundary=boundary,
                   normals=normals, c1=c1, qv_rate=float(qv_rate))


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearOperator:
    """Site-indexed sparse operator; ``tag`` is ``"laplacian"`` or ``"adjoint"``."""

    matrix: sp.csr_matrix
    tag: str

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, f):
        return self.matrix @ f

    def apply(self, f: NDArray) -> NDArray:
        return self.matrix @ np.asarray(f, dtype=float)

    def toarray(self) -> NDArray:
        return self.matrix.toarray()


def discrete_laplacian(lattice: Lattice) -> LinearOperator:
    """Generator of the walk: ``(Lf)(x) = h(x)^-1 sum_y p_xy (f(y) - f(x))``.

    Each row stores its off-diagonal entries first and the diagonal last, with
    the diagonal set to minus their running sum, so rows sum to exactly zero.
    """
    n = lattice.n_sites
    hinv = lattice.inv_holding
    deg = np.diff(lattice.indptr)
    indptr = lattice.indptr + np.arange(n + 1)
    indices = np.empty(indptr[-1], dtype=np.int64)
    data = np.empty(indptr[-1])
    for i in range(n):
        a, b = lattice.indptr[i], lattice.indptr[i + 1]
        off = hinv[i] * lattice.probs[a:b]
        acc = 0.0
        for v in off:
            acc += v
        s = indptr[i]
        indices[s:s + deg[i]] = lattice.indices[a:b]
        data[s:s + deg[i]] = off
        indices[s + deg[i]] = i
        data[s + deg[i]] = -acc
    mat = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    mat.has_sorted_indices = False
    return LinearOperator(mat, "laplacian")


def adjoint_laplacian(lattice: Lattice, laplacian: LinearOperator | None = None) -> LinearOperator:
    """Forward (density) operator: the exact transpose of the generator."""
    lap = laplacian if laplacian is not None else discrete_laplacian(lattice)
    return LinearOperator(lap.matrix.T.tocsr(), "adjoint")


# ---------------------------------------------------------------------------
# Plain-text export
# ---------------------------------------------------------------------------

_HEADER = "# abheat lattice v1"


def write_lattice(lattice: Lattice, path) -> None:
    """Write the lattice as plain text; floats carry 17 significant digits."""
    lines = [_HEADER, f"{lattice.dim} {lattice.epsilon:.17g} {lattice.n_sites} "
             f"{len(lattice.indices)} {lattice.qv_rate:.17g}"]
    for i in range(lattice.n_sites):
        c = " ".join(str(v) for v in lattice.coords[i])
        lines.append(f"s {i} {c} {int(lattice.boundary[i])} {lattice.holding[i]:.17g}")
    src = lattice.edge_sources
    for s, t, p in zip(src, lattice.indices, lattice.probs):
        lines.append(f"e {s} {t} {p:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_lattice(path) -> Lattice:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    d, eps, n, m = int(rows[0][0]), float(rows[0][1]), int(rows[0][2]), int(rows[0][3])
    qv = float(rows[0][4]) if len(rows[0]) > 4 else float("nan")
    site_rows = [r for r in rows[1:] if r[0] == "s"]
    edge_rows = [r for r in rows[1:] if r[0] == "e"]
    if len(site_rows) != n or len(edge_rows) != m:
        raise LatticeError(f"{path}: expected {n} sites / {m} edges")
    coords = np.array([[int(v) for v in r[2:2 + d]] for r in site_rows], dtype=np.int64)
    boundary = np.array([r[2 + d] == "1" for r in site_rows])
    holding = np.array([float(r[3 + d]) for r in site_rows])
    edges = np.array([[int(r[1]), int(r[2])] for r in edge_rows], dtype=np.int64)
    probs = np.array([float(r[3]) for r in edge_rows])
    return lattice_from_arrays(eps, coords, boundary, holding, edges, probs, qv)
