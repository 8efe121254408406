"""Diagnostics computed from simulation output."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .lattice import Lattice
from .spectral import HeatEvolver, SpectralBasis, normalize_tv


class InsufficientDataError(ValueError):
    pass


@dataclass(eq=False)
class ObservableSeries:
    """Time-stamped record of one run.

    ``snapshots[i]`` is the signed occupation vector at ``times[i]``;
    ``fourier[i, j]`` is the coefficient for ``modes[j]``; ``V`` is the exact
    jump intensity and ``K`` the cumulative annihilation count.
    """

    times: NDArray[np.float64]
    snapshots: NDArray[np.int64]
    V: NDArray[np.float64]
    K: NDArray[np.int64]
    fourier: NDArray[np.float64]
    modes: tuple[int, ...]
    N: int
    epsilon: float
    dim: int
    seed: int | None = None
    events: int = 0
    violations: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    def density(self, i: int) -> NDArray:
        return self.snapshots[i] / (self.N * self.epsilon ** self.dim)

    def validate(self) -> None:
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if np.any(np.diff(self.K) < 0):
            raise ValueError("K must be nondecreasing")


def fourier_coeff(density: NDArray, basis: SpectralBasis, n: int) -> float:
    """``eps^d sum_x u(x) phi_n(x)``."""
    return basis.cell_volume * float(np.asarray(density, dtype=float) @ basis.phi(n))


def integrated_V(series: ObservableSeries) -> tuple[NDArray, NDArray]:
    """Two running estimates of the integral of V over ``[0, t]``.

    Returns ``(trapezoid, compensator)``: the trapezoidal rule over the sampled
    V values, and ``K(t) / N`` which counts every annihilation exactly
    (annihilations arrive at rate ``N V``).
    """
    t = series.times
    v = series.V
    trap = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))])
    comp = series.K / series.N
    return trap, comp


def drift_residual(series: ObservableSeries, basis: SpectralBasis, n: int, *,
                   estimator: str = "compensator") -> tuple[NDArray, float]:
    """``u_n(t) - u_n(0) exp(int_0^t V - lambda_n t)`` and its max magnitude.

    Warns when the two integral estimators disagree by more than 10% at the
    final time.
    """
    trap, comp = integrated_V(series)
    if len(series) > 1 and max(abs(trap[-1]), abs(comp[-1])) > 0:
        rel = abs(trap[-1] - comp[-1]) / max(abs(trap[-1]), abs(comp[-1]))
        if rel > 0.10:
            warnings.warn(f"integral-of-V estimators disagree by {rel:.1%}; residual is ambiguous",
                          RuntimeWarning, stacklevel=2)
    iv = comp if estimator == "compensator" else trap
    lam = basis.eigenvalues[n]
    uhat = np.array([fourier_coeff(series.density(i), basis, n) for i in range(len(series))])
    resid = uhat - uhat[0] * np.exp(iv - lam * series.times)
    return resid, float(np.abs(resid).max())


def _uhat_path(series: ObservableSeries, n: int, basis: SpectralBasis | None) -> NDArray:
    if basis is None:
        return series.fourier[:, series.modes.index(n)]
    return np.array([fourier_coeff(series.density(i), basis, n) for i in range(len(series))])


def realized_qv(series: ObservableSeries, n: int, lam: float,
                basis: SpectralBasis | None = None) -> float:
    """Sum of squared increments of ``u_n`` after removing ``(V - lambda_n) u_n dt``."""
    u = _uhat_path(series, n, basis)
    dt = np.diff(series.times)
    vbar = 0.5 * (series.V[1:] + series.V[:-1])
    ubar = 0.5 * (u[1:] + u[:-1])
    inc = np.diff(u) - (vbar - lam) * ubar * dt
    return float((inc ** 2).sum())


def qv_scaling(replicas: Mapping[int, Sequence[ObservableSeries]], n: int, lam: float, *,
               basis: SpectralBasis | None = None, slack: float = 1.5) -> dict:
    """Check the realised quadratic variation against ``beta N^-1 int V``.

    ``beta`` is fitted (mean of ``QV * N / int V``) at the smallest ``N`` and
    the bound ``QV <= slack * beta * N^-1 * int V`` is checked on the replica
    means at every larger ``N``.
    """
    if len(replicas) < 2 or any(len(r) < 8 for r in replicas.values()):
        raise InsufficientDataError("need >= 8 replicas for each of >= 2 values of N")
    rows = {}
    for N in sorted(replicas):
        qv = np.array([realized_qv(s, n, lam, basis) for s in replicas[N]])
        iv = np.array([integrated_V(s)[1][-1] for s in replicas[N]])
        ratio = qv * N / np.maximum(iv, 1e-300)
        rows[N] = {"qv_mean": float(qv.mean()), "intV_mean": float(iv.mean()),
                   "ratio_mean": float(ratio.mean())}
    Ns = sorted(rows)
    beta = rows[Ns[0]]["ratio_mean"]
    ok = all(rows[N]["qv_mean"] <= slack * beta * rows[N]["intV_mean"] / N for N in Ns[1:])
    return {"beta_hat": beta, "per_N": rows, "bound_holds": bool(ok)}


# ---------------------------------------------------------------------------
# Block statistics
# ---------------------------------------------------------------------------


def block_index(lattice: Lattice, delta: float) -> tuple[NDArray[np.int64], int]:
    """Disjoint cubes of side ``delta`` anchored at the lattice's lowest corner.

    Returns ``(block_of_site, n_blocks)``; only nonempty blocks get an id.
    """
    if delta <= lattice.epsilon:
        raise ValueError("block side must exceed the lattice spacing")
    rel = (lattice.coords - lattice.coords.min(axis=0)) * lattice.epsilon
    cell = np.floor(rel / delta + 1e-9).astype(np.int64)
    _, ids = np.unique(cell, axis=0, return_inverse=True)
    ids = ids.reshape(-1)
    return ids.astype(np.int64), int(ids.max()) + 1


def _int_block_sums(values: NDArray, blocks: NDArray, n_blocks: int) -> NDArray:
    out = np.zeros(n_blocks, dtype=np.int64)
    np.add.at(out, blocks, values.astype(np.int64))
    return out


def overlap_lambda(eta: NDArray, lattice: Lattice, delta: float) -> NDArray[np.int64]:
    """Per block, ``min(plus count, minus count)``."""
    blocks, nb = block_index(lattice, delta)
    eta = np.asarray(eta, dtype=np.int64)
    plus = _int_block_sums(np.maximum(eta, 0), blocks, nb)
    minus = _int_block_sums(np.maximum(-eta, 0), blocks, nb)
    return np.minimum(plus, minus)


def overlap_identity_defect(eta: NDArray, lattice: Lattice, delta: float) -> int:
    """Max over blocks of ``|(sum|eta| - |sum eta|) - 2 Lambda|`` in integers (0 when exact)."""
    blocks, nb = block_index(lattice, delta)
    eta = np.asarray(eta, dtype=np.int64)
    lam = overlap_lambda(eta, lattice, delta)
    lhs = _int_block_sums(np.abs(eta), blocks, nb) - np.abs(_int_block_sums(eta, blocks, nb))
    return int(np.abs(lhs - 2 * lam).max())


def segregation_deficit(eta: NDArray, lattice: Lattice, delta: float) -> float:
    """``2 - sum_blocks |block mass of eps^d u|`` (0 when fully segregated)."""
    blocks, nb = block_index(lattice, delta)
    eta = np.asarray(eta, dtype=np.int64)
    N = int(np.maximum(eta, 0).sum())
    # integer numerator, so the result equals 2 sum(Lambda) / N bit for bit
    return int(2 * N - np.abs(_int_block_sums(eta, blocks, nb)).sum()) / N


@dataclass
class SegregationReport:
    delta: float
    times: NDArray
    deficit: NDArray
    lambda_total: NDArray
    lambda_max: NDArray
    frac_heavy_blocks: NDArray
    identity_defect: NDArray

    def rows(self):
        for i, t in enumerate(self.times):
            yield {"t": float(t), "deficit": float(self.deficit[i]),
                   "lambda_total": int(self.lambda_total[i]), "lambda_max": int(self.lambda_max[i]),
                   "frac_heavy_blocks": float(self.frac_heavy_blocks[i]),
                   "identity_defect": int(self.identity_defect[i])}


def segregation_report(series: ObservableSeries, lattice: Lattice, delta: float,
                       c0: float = 0.05) -> SegregationReport:
    """Deficit, overlap totals and fraction of blocks with overlap ``>= c0 (delta/2eps)^d``."""
    _, nb = block_index(lattice, delta)
    thresh = c0 * (delta / (2 * lattice.epsilon)) ** lattice.dim
    cols = {k: [] for k in ("def", "tot", "max", "frac", "idd")}
    for eta in series.snapshots:
        lam = overlap_lambda(eta, lattice, delta)
        cols["def"].append(segregation_deficit(eta, lattice, delta))
        cols["tot"].append(int(lam.sum()))
        cols["max"].append(int(lam.max()))
        cols["frac"].append(float((lam >= thresh).sum()) / nb)
        cols["idd"].append(overlap_identity_defect(eta, lattice, delta))
    return SegregationReport(delta, series.times.copy(), np.array(cols["def"]),
                             np.array(cols["tot"]), np.array(cols["max"]),
                             np.array(cols["frac"]), np.array(cols["idd"]))


def block_l1(mass_a: NDArray, mass_b: NDArray, lattice: Lattice, delta: float) -> float:
    """Block-aggregated L1 distance between two site mass vectors."""
    blocks, nb = block_index(lattice, delta)
    a = np.bincount(blocks, weights=np.asarray(mass_a, dtype=float), minlength=nb)
    b = np.bincount(blocks, weights=np.asarray(mass_b, dtype=float), minlength=nb)
    return float(np.abs(a - b).sum())


@dataclass
class ComparisonReport:
    delta: float
    times: NDArray
    distance: NDArray
    reference: str = "normalize_tv(exp(t L*) u(0))"

    def rows(self):
        for t, dist in zip(self.times, self.distance):
            yield {"t": float(t), "block_l1": float(dist)}


def compare_to_limit(series: ObservableSeries, lattice: Lattice, evolver: HeatEvolver,
                     delta: float | None = None) -> ComparisonReport:
    """Block-L1 distance between empirical masses and the normalised heat flow.

    ``delta`` defaults to ``4 eps``.
    """
    if delta is None:
        delta = 4 * lattice.epsilon
    w = lattice.cell_volume
    u0 = series.density(0)
    ref, t_prev = u0.astype(float), 0.0
    dist = []
    for i, t in enumerate(series.times):
        ref = evolver.evolve(ref, t - t_prev)
        t_prev = t
        target = normalize_tv(ref, lattice) * w
        dist.append(block_l1(series.snapshots[i] / series.N, target, lattice, delta))
    return ComparisonReport(delta, series.times.copy(), np.array(dist))


def noise_scaling(samples: Mapping[int, Sequence[float]], z: float = 1.96) -> dict:
    """Slope of ``log Var`` against ``log N``.

    Weighted least squares with the sampling variance of a log sample
    variance, ``2 / (R - 1)``; ``half_width`` is ``z`` standard errors.
    """
    Ns = sorted(samples)
    if len(Ns) < 3 or any(len(samples[N]) < 16 for N in Ns):
        raise InsufficientDataError("need >= 3 values of N with >= 16 replicas each")
    x = np.log(np.array(Ns, dtype=float))
    var = np.array([np.var(np.asarray(samples[N], dtype=float), ddof=1) for N in Ns])
    if np.any(var <= 0):
        raise InsufficientDataError("zero sample variance")
    y = np.log(var)
    wts = np.array([(len(samples[N]) - 1) / 2.0 for N in Ns])
    xm = (wts * x).sum() / wts.sum()
    ym = (wts * y).sum() / wts.sum()
    sxx = (wts * (x - xm) ** 2).sum()
    slope = float((wts * (x - xm) * (y - ym)).sum() / sxx)
    se = math.sqrt(1.0 / sxx)
    return {"slope": slope, "intercept": float(ym - slope * xm), "half_width": z * se,
            "N": Ns, "variance": var.tolist()}
