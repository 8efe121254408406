"""Two-species annihilating-branching random walk on a lattice.

Each particle jumps from ``x`` to ``y`` at rate ``p_xy / h(x)``. A jump onto a
site holding the other species removes the jumper and one particle there;
simultaneously one particle of each species, chosen uniformly from the
configuration *before* the jump, splits in two. Both species keep exactly
``N`` particles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from . import _kernels as K
from .analysis import ObservableSeries
from .lattice import Lattice
from .spectral import SpectralBasis


class EventBudgetError(RuntimeError):
    def __init__(self, message: str, partial: ObservableSeries | None = None):
        super().__init__(message)
        self.partial = partial


class ConservationError(AssertionError):
    pass


def make_rng(seed: int, replica: int = 0) -> np.random.Generator:
    """Counter-based (Philox) stream for run ``seed + replica``."""
    return np.random.Generator(np.random.Philox(int(seed) + int(replica)))


@dataclass(eq=False)
class Configuration:
    """Signed occupation numbers plus the per-species particle sites."""

    eta: NDArray[np.int64]
    plus_positions: NDArray[np.int64]
    minus_positions: NDArray[np.int64]

    @property
    def N(self) -> int:
        return len(self.plus_positions)

    @classmethod
    def from_positions(cls, n_sites: int, plus: Sequence[int], minus: Sequence[int]) -> "Configuration":
        plus = np.asarray(plus, dtype=np.int64)
        minus = np.asarray(minus, dtype=np.int64)
        eta = np.bincount(plus, minlength=n_sites) - np.bincount(minus, minlength=n_sites)
        cfg = cls(eta.astype(np.int64), plus, minus)
        cfg.validate()
        return cfg

    @classmethod
    def from_eta(cls, eta: Sequence[int]) -> "Configuration":
        eta = np.asarray(eta, dtype=np.int64)
        plus = np.repeat(np.arange(len(eta)), np.maximum(eta, 0))
        minus = np.repeat(np.arange(len(eta)), np.maximum(-eta, 0))
        cfg = cls(eta.copy(), plus, minus)
        cfg.validate()
        return cfg

    def copy(self) -> "Configuration":
        return Configuration(self.eta.copy(), self.plus_positions.copy(), self.minus_positions.copy())

    def validate(self) -> None:
        n = len(self.eta)
        if len(self.plus_positions) != len(self.minus_positions) or len(self.plus_positions) == 0:
            raise ConservationError("need N >= 1 particles of each species")
        plus = np.bincount(self.plus_positions, minlength=n)
        minus = np.bincount(self.minus_positions, minlength=n)
        if np.any((plus > 0) & (minus > 0)):
            raise ConservationError("a site hosts both species")
        if not np.array_equal(plus - minus, self.eta):
            raise ConservationError("eta disagrees with particle positions")


def density_field(config: Configuration, lattice: Lattice) -> NDArray:
    """``u(x) = eta_x / (N eps^d)``; its total variation ``eps^d sum |u|`` is 2."""
    return config.eta / (config.N * lattice.cell_volume)


def init_from_density(lattice: Lattice, density: NDArray, N: int) -> Configuration:
    """Place ``N`` particles per species proportionally to the positive and
    negative parts of ``density`` by largest-remainder rounding (ties go to the
    lower site index)."""
    density = np.asarray(density, dtype=float)
    if len(density) != lattice.n_sites:
        raise ValueError("density must have one value per site")
    if N < 1:
        raise ValueError("N must be >= 1")
    counts = []
    for part in (np.maximum(density, 0.0), np.maximum(-density, 0.0)):
        total = part.sum()
        if total <= 0:
            raise ValueError("both the positive and the negative part must be nonzero")
        quota = N * part / total
        base = np.floor(quota).astype(np.int64)
        short = N - int(base.sum())
        if short > 0:
            frac = quota - base
            order = np.lexsort((np.arange(len(frac)), -frac))
            base[order[:short]] += 1
        counts.append(base)
    plus = np.repeat(np.arange(lattice.n_sites), counts[0])
    minus = np.repeat(np.arange(lattice.n_sites), counts[1])
    return Configuration.from_positions(lattice.n_sites, plus, minus)


def total_jump_rate(config: Configuration, lattice: Lattice) -> float:
    """``sum_x |eta_x| / h(x)``."""
    if config.N < 1 or not np.any(config.eta):
        raise ValueError("configuration is empty")
    return float(np.abs(config.eta) @ lattice.inv_holding)


def compute_V(config: Configuration | NDArray, lattice: Lattice, N: int | None = None) -> float:
    """Normalised annihilation intensity, i.e. the growth rate of the mean density

    ``V = 1/N sum_{x,y} p_xy/h(x) (eta_x^+ 1{eta_y<0} + eta_x^- 1{eta_y>0})``.

    With this normalisation ``L eta_z = (L* eta)_z + V eta_z`` holds exactly
    and annihilations occur at total rate ``N V``.
    """
    if isinstance(config, Configuration):
        eta, N = config.eta, config.N
    else:
        eta = np.asarray(config, dtype=np.int64)
        N = int(np.maximum(eta, 0).sum()) if N is None else N
    src = lattice.edge_sources
    dst = lattice.indices
    rate = lattice.inv_holding[src] * lattice.probs
    es, ed = eta[src], eta[dst]
    hits = np.maximum(es, 0) * (ed < 0) + np.maximum(-es, 0) * (ed > 0)
    return float(rate @ hits) / N


# ---------------------------------------------------------------------------
# Event records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventRecord:
    time: float
    kind: str  # "move" | "annihilate_branch"
    species: str  # "+" | "-"
    from_site: int
    to_site: int
    branch: tuple[int, int] | None = None

    def to_json(self) -> str:
        d = {"time": float(f"{self.time:.17g}"), "kind": self.kind, "species": self.species,
             "from": self.from_site, "to": self.to_site}
        if self.branch is not None:
            d["u"], d["v"] = self.branch
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "EventRecord":
        d = json.loads(line)
        br = (d["u"], d["v"]) if "u" in d else None
        return cls(d["time"], d["kind"], d["species"], d["from"], d["to"], br)


def _records(rec_t: NDArray, rec_i: NDArray, n: int) -> list[EventRecord]:
    out = []
    for q in range(n):
        kind, s, x, y, u, v = (int(a) for a in rec_i[q])
        out.append(EventRecord(float(rec_t[q]), "annihilate_branch" if kind == K.ANNIHILATE else "move",
                               "+" if s == 0 else "-", x, y, (u, v) if kind == K.ANNIHILATE else None))
    return out


def apply_event(config: Configuration, event: EventRecord) -> Configuration:
    """Replay one event on a pre-event configuration."""
    sign = 1 if event.species == "+" else -1
    x, y = event.from_site, event.to_site
    plus = config.plus_positions.copy()
    minus = config.minus_positions.copy()
    own, other = (plus, minus) if sign == 1 else (minus, plus)

    def relocate(arr, old, new):
        hit = np.flatnonzero(arr == old)
        if len(hit) == 0:
            raise ConservationError(f"no particle at site {old} to move")
        arr[hit[0]] = new

    if event.kind == "move":
        if config.eta[y] * sign < 0:
            raise ConservationError("move event onto an opposite-sign site")
        relocate(own, x, y)
    else:
        u, v = event.branch
        if config.eta[y] * sign >= 0:
            raise ConservationError("annihilation without an opposite particle at the target")
        if config.eta[u] * sign <= 0 or config.eta[v] * sign >= 0:
            raise ConservationError("branch sites not occupied in the pre-event state")
        relocate(own, x, u)
        relocate(other, y, v)
    return Configuration.from_positions(len(config.eta), plus, minus)


# ---------------------------------------------------------------------------
# Simulation state
# ---------------------------------------------------------------------------


class _Engine:
    """Mutable simulation state fed to the compiled kernel."""

    def __init__(self, config: Configuration, lattice: Lattice):
        config.validate()
        self.lattice = lattice
        self.N = config.N
        self.eta = config.eta.astype(np.int64).copy()
        self.pos = np.stack([config.plus_positions, config.minus_positions]).astype(np.int64)
        self.head, self.nxt, self.prv = K.build_site_lists(self.pos, lattice.n_sites)
        self.indptr = lattice.indptr
        self.indices = lattice.indices
        cum = np.empty_like(lattice.probs)
        for i in range(lattice.n_sites):
            a, b = lattice.indptr[i], lattice.indptr[i + 1]
            cum[a:b] = np.cumsum(lattice.probs[a:b])
        self.cumprob = cum
        self.hinv = lattice.inv_holding
        self.hinv_max = float(self.hinv.max())
        self.uniform = bool(np.all(self.hinv == self.hinv_max))
        self.counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
        self.counters[K.C_ABS_MASS] = int(np.abs(self.eta).sum())
        self.counters[K.C_SIGNED_MASS] = int(self.eta.sum())
        self.t = 0.0

    def run(self, t_stop: float, rng, max_events: int, rec_t=None, rec_i=None) -> int:
        record = rec_t is not None
        if not record:
            rec_t = np.empty(0)
            rec_i = np.empty((0, 6), dtype=np.int64)
        self.t, status = K.advance(self.t, t_stop, max_events, rng, self.eta, self.pos,
                                   self.head, self.nxt, self.prv, self.indptr, self.indices,
                                   self.cumprob, self.hinv, self.hinv_max, self.uniform,
                                   self.counters, rec_t, rec_i, record)
        return status

    @property
    def events(self) -> int:
        return int(self.counters[K.C_EVENTS])

    @property
    def annihilations(self) -> int:
        return int(self.counters[K.C_ANNIHILATIONS])

    @property
    def violations(self) -> int:
        return int(self.counters[K.C_VIOLATIONS])

    def configuration(self) -> Configuration:
        return Configuration(self.eta.copy(), self.pos[0].copy(), self.pos[1].copy())

    def full_check(self) -> None:
        n = self.lattice.n_sites
        plus = np.bincount(self.pos[0], minlength=n)
        minus = np.bincount(self.pos[1], minlength=n)
        if (not np.array_equal(plus - minus, self.eta) or np.any((plus > 0) & (minus > 0))
                or np.maximum(self.eta, 0).sum() != self.N or np.maximum(-self.eta, 0).sum() != self.N):
            self.counters[K.C_VIOLATIONS] += 1


def step(config: Configuration, lattice: Lattice, rng: np.random.Generator
         ) -> tuple[float, EventRecord, Configuration]:
    """Apply exactly one event; returns ``(waiting time, event, new configuration)``."""
    eng = _Engine(config, lattice)
    rec_t = np.empty(1)
    rec_i = np.empty((1, 6), dtype=np.int64)
    eng.run(math.inf, rng, 1, rec_t, rec_i)
    if eng.violations:
        raise ConservationError("conservation violated during step")
    ev = _records(rec_t, rec_i, 1)[0]
    return eng.t, ev, eng.configuration()


@dataclass
class SimParams:
    N: int
    t_end: float
    seed: int
    sample_times: Sequence[float] = ()
    record_events: bool = False
    replica: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        st = np.asarray(self.sample_times, dtype=float)
        if st.size and (st.min() < 0 or st.max() > self.t_end):
            raise ValueError("sample times must lie in [0, t_end]")
        if st.size and np.any(np.diff(st) < 0):
            raise ValueError("sample times must be sorted")

    def grid(self) -> NDArray:
        return np.unique(np.concatenate([[0.0], np.asarray(self.sample_times, dtype=float),
                                         [self.t_end]]))


def expected_events(config: Configuration, lattice: Lattice, t_end: float) -> float:
    return total_jump_rate(config, lattice) * t_end


def simulate(config: Configuration, lattice: Lattice, params: SimParams, *,
             basis: SpectralBasis | None = None, modes: Sequence[int] = (),
             budget: int = 2_000_000_000,
             on_sample: Callable[[int, float], None] | None = None,
             ) -> tuple[ObservableSeries, Configuration, list[EventRecord]]:
    """Run the dynamics from ``config`` to ``params.t_end``.

    Records, at time 0, each sample time and ``t_end``: the occupation
    snapshot, Fourier coefficients for ``modes`` (needs ``basis``), the exact
    ``V`` and the cumulative annihilation count. Deterministic given
    ``params.seed`` and ``params.replica``. Raises :class:`EventBudgetError`
    if the expected event count, or the realised one, exceeds ``budget``.
    """
    if config.N != params.N:
        raise ValueError(f"configuration has N={config.N}, params say {params.N}")
    if modes and basis is None:
        raise ValueError("tracking Fourier modes needs a basis")
    projected = expected_events(config, lattice, params.t_end)
    if projected > budget:
        raise EventBudgetError(f"projected {projected:.3g} events exceed budget {budget}")

    rng = make_rng(params.seed, params.replica)
    eng = _Engine(config, lattice)
    grid = params.grid()
    w = lattice.cell_volume
    snaps, Vs, Ks, four = [], [], [], []
    events: list[EventRecord] = []

    def sample():
        eng.full_check()
        eta = eng.eta.copy()
        snaps.append(eta)
        Vs.append(compute_V(eta, lattice, eng.N))
        Ks.append(eng.annihilations)
        if modes:
            u = eta / (eng.N * w)
            four.append([w * float(u @ basis.phi(n)) for n in modes])

    chunk = 1 << 16
    rec_t = np.empty(chunk) if params.record_events else None
    rec_i = np.empty((chunk, 6), dtype=np.int64) if params.record_events else None

    def series(upto):
        return ObservableSeries(
            times=grid[:upto].copy(), snapshots=np.array(snaps, dtype=np.int64),
            V=np.array(Vs), K=np.array(Ks, dtype=np.int64),
            fourier=np.array(four, dtype=float).reshape(len(snaps), len(modes)),
            modes=tuple(modes), N=eng.N, epsilon=lattice.epsilon, dim=lattice.dim,
            seed=params.seed + params.replica, events=eng.events, violations=eng.violations)

    sample()
    for idx, t_next in enumerate(grid[1:], start=1):
        while True:
            remaining = budget - eng.events
            if remaining <= 0:
                raise EventBudgetError(f"event budget {budget} exhausted at t={eng.t}",
                                       partial=series(idx))
            if params.record_events:
                eng.counters[K.C_RECORDED] = 0
                status = eng.run(t_next, rng, remaining, rec_t, rec_i)
                events.extend(_records(rec_t, rec_i, int(eng.counters[K.C_RECORDED])))
            else:
                status = eng.run(t_next, rng, remaining)
            if status == 0:
                break
        sample()
        if on_sample is not None:
            on_sample(idx, t_next)

    out = series(len(grid))
    out.meta["annihilations"] = eng.annihilations
    return out, eng.configuration(), events


def free_walk_displacements(lattice: Lattice, start: int, t: float, n_walkers: int,
                            seed: int) -> NDArray:
    """Displacements (length units) of independent walkers after time ``t``."""
    eng_cum = np.empty_like(lattice.probs)
    for i in range(lattice.n_sites):
        a, b = lattice.indptr[i], lattice.indptr[i + 1]
        eng_cum[a:b] = np.cumsum(lattice.probs[a:b])
    ends = K.free_walkers(start, t, n_walkers, make_rng(seed), lattice.indptr, lattice.indices,
                          eng_cum, lattice.inv_holding)
    return (lattice.coords[ends] - lattice.coords[start]) * lattice.epsilon


# ---------------------------------------------------------------------------
# Brute-force generator
# ---------------------------------------------------------------------------


class GeneratorBudgetError(RuntimeError):
    pass


def enumerate_transitions(eta: NDArray, lattice: Lattice, max_events: int = 100_000):
    """Every transition out of ``eta`` as ``(rate, new_eta, is_annihilation)``."""
    eta = np.asarray(eta, dtype=np.int64)
    N = int(np.maximum(eta, 0).sum())
    if N != int(np.maximum(-eta, 0).sum()) or N == 0:
        raise ValueError("configuration must have N >= 1 of each species")
    hinv = lattice.inv_holding
    plus_sites = np.flatnonzero(eta > 0)
    minus_sites = np.flatnonzero(eta < 0)
    n_pairs = len(plus_sites) * len(minus_sites)
    out = []
    count = 0
    for x in np.flatnonzero(eta):
        sign = 1 if eta[x] > 0 else -1
        mult = abs(int(eta[x]))
        for j in range(lattice.indptr[x], lattice.indptr[x + 1]):
            y = lattice.indices[j]
            base = hinv[x] * lattice.probs[j] * mult
            if eta[y] * sign >= 0:
                count += 1
                if count > max_events:
                    raise GeneratorBudgetError(f"more than {max_events} transitions")
                new = eta.copy()
                new[x] -= sign
                new[y] += sign
                out.append((base, new, False))
            else:
                count += n_pairs
                if count > max_events:
                    raise GeneratorBudgetError(f"more than {max_events} transitions")
                own, other = (plus_sites, minus_sites) if sign == 1 else (minus_sites, plus_sites)
                for u in own:
                    for v in other:
                        wgt = abs(int(eta[u])) * abs(int(eta[v])) / N ** 2
                        new = eta.copy()
                        new[x] -= sign
                        new[y] += sign
                        new[u] += sign
                        new[v] -= sign
                        out.append((base * wgt, new, True))
    return out


def generator_apply(f: Callable[[NDArray], float], config: Configuration | NDArray,
                    lattice: Lattice, max_events: int = 100_000) -> float:
    """Exact ``(L f)(eta)``: sum of rate times increment over all transitions."""
    eta = config.eta if isinstance(config, Configuration) else np.asarray(config, dtype=np.int64)
    f0 = f(eta)
    return math.fsum(rate * (f(new) - f0) for rate, new, _ in
                     enumerate_transitions(eta, lattice, max_events))


def annihilation_intensity(config: Configuration | NDArray, lattice: Lattice) -> float:
    """Total rate of annihilation transitions, by enumeration."""
    eta = config.eta if isinstance(config, Configuration) else np.asarray(config, dtype=np.int64)
    return math.fsum(rate for rate, _, ann in enumerate_transitions(eta, lattice) if ann)
