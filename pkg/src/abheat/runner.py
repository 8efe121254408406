"""Command-line driver: config parsing, subcommands, manifests and sweeps.

Usage::

    abheat simulate --config run.toml --out runs/a5
    abheat compare --run runs/a5
    abheat sweep --config sweep.toml --out runs/a7 --replicas 32
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .analysis import (
    InsufficientDataError,
    ObservableSeries,
    compare_to_limit,
    integrated_V,
    noise_scaling,
    overlap_identity_defect,
    qv_scaling,
    realized_qv,
    segregation_report,
)
from .dynamics import (
    Configuration,
    EventBudgetError,
    EventRecord,
    SimParams,
    apply_event,
    compute_V,
    generator_apply,
    init_from_density,
    simulate,
)
from .lattice import (
    DomainSpec,
    Lattice,
    adjoint_laplacian,
    build_lattice,
    discrete_laplacian,
    read_lattice,
    write_lattice,
)
from .spectral import (
    HeatEvolver,
    SpectralBasis,
    closed_form_basis,
    eig_neumann,
    normalize_tv,
    write_basis,
)

log = logging.getLogger("abheat")

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3


class ConfigError(ValueError):
    """Bad or unreadable configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class InventoryError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# Configuration schema
# ---------------------------------------------------------------------------


def parse_length(v) -> float:
    """Accept a number or a fraction string like ``"1/32"``."""
    if isinstance(v, bool):
        raise ValueError("expected a number")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"cannot parse {v!r} as a number") from exc
    raise ValueError("expected a number or fraction string")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainConfig(_Section):
    kind: Literal["rectangle", "disc"]
    sides: list[float] | None = None
    center: list[float] | None = None
    radius: float | None = None

    @model_validator(mode="after")
    def _shape(self):
        if self.kind == "rectangle":
            if not self.sides or len(self.sides) not in (2, 3) or min(self.sides) <= 0:
                raise ValueError("rectangle needs 2 or 3 positive 'sides'")
        else:
            if not self.center or len(self.center) not in (2, 3):
                raise ValueError("disc needs 'center' with 2 or 3 entries")
            if self.radius is None or self.radius <= 0:
                raise ValueError("disc needs a positive 'radius'")
        return self

    def build(self) -> DomainSpec:
        if self.kind == "rectangle":
            return DomainSpec.rectangle(*self.sides)
        return DomainSpec.disc(self.center, self.radius)


class LatticeConfig(_Section):
    epsilon: float
    qv_rate: float | None = Field(default=None, gt=0)

    @field_validator("epsilon", mode="before")
    @classmethod
    def _parse(cls, v):
        return parse_length(v)

    @field_validator("epsilon")
    @classmethod
    def _positive(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v


class InitialConfig(_Section):
    preset: Literal["eigenmode", "half_split", "grid_file"]
    mode: list[int] | None = None  # closed-form cosine mode (rectangles)
    index: int | None = Field(default=None, ge=1)  # numeric eigenvector index
    axis: int = Field(default=0, ge=0, le=2)
    path: str | None = None
    sha256: str | None = None

    @model_validator(mode="after")
    def _complete(self):
        if self.preset == "eigenmode" and self.mode is None and self.index is None:
            raise ValueError("eigenmode needs 'mode' or 'index'")
        if self.preset == "grid_file" and not self.path:
            raise ValueError("grid_file needs 'path'")
        return self


class DynamicsConfig(_Section):
    N: int = Field(ge=1)
    t_end: float = Field(ge=0)
    seed: int = 0
    sample_dt: float | None = Field(default=None, gt=0)
    sample_times: list[float] | None = None
    record_events: bool = False
    budget_events: int = Field(default=2_000_000_000, ge=1)
    initial: InitialConfig

    def grid(self) -> list[float]:
        if self.sample_times is not None:
            return sorted(self.sample_times)
        if self.sample_dt is None or self.t_end == 0:
            return []
        k = int(math.floor(self.t_end / self.sample_dt + 1e-9))
        return [round(i * self.sample_dt, 12) for i in range(1, k + 1) if i * self.sample_dt <= self.t_end + 1e-12]


class ObservablesConfig(_Section):
    modes: list[int] = [1]
    n_eigen: int = Field(default=6, ge=2)
    basis: Literal["numeric", "closed_form"] = "numeric"
    delta: float | None = None
    max_distance: float | None = None

    @field_validator("delta", mode="before")
    @classmethod
    def _parse(cls, v):
        return None if v is None else parse_length(v)


class OutputConfig(_Section):
    snapshots: bool = True
    heatmaps: bool = True


class SweepConfig(_Section):
    N: list[int]
    replicas: int = Field(default=32, ge=1)
    time: float | None = Field(default=None, gt=0)
    mode: int = Field(default=1, ge=1)
    slope_min: float = -1.4
    slope_max: float = -0.6
    workers: int = Field(default=1, ge=1)


class RunConfig(_Section):
    domain: DomainConfig
    lattice: LatticeConfig
    dynamics: DynamicsConfig
    observables: ObservablesConfig = ObservablesConfig()
    output: OutputConfig = OutputConfig()
    sweep: SweepConfig | None = None

    def resolved(self) -> dict:
        return json.loads(self.model_dump_json())


def _first_key(err: ValidationError) -> str:
    e = err.errors()[0]
    return ".".join(str(p) for p in e["loc"]) or "<root>"


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a TOML config (or the ``config`` block of a run manifest)."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            raw = json.loads(path.read_text())
            raw = raw.get("config", raw)
        else:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError("--config", f"no such file {path}") from exc
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError("--config", f"cannot parse {path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        sect, key = dotted.split(".")
        raw.setdefault(sect, {})[key] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        key = _first_key(exc)
        raise ConfigError(key, exc.errors()[0]["msg"]) from exc


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _g(v) -> str:
    return f"{float(v):.17g}"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_grid(path, values, t: float, epsilon: float, dim: int, N: int | None = None,
               integer: bool = True) -> None:
    """Snapshot grid file: ``# t eps d [N]`` header, then ``site value`` rows."""
    head = f"# t={_g(t)} eps={_g(epsilon)} d={dim}" + (f" N={N}" if N is not None else "")
    if integer:
        body = "\n".join(f"{i} {int(v)}" for i, v in enumerate(values))
    else:
        body = "\n".join(f"{i} {_g(v)}" for i, v in enumerate(values))
    Path(path).write_text(head + "\n" + body + "\n")


def read_grid(path) -> tuple[dict, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(tok.split("=", 1) for tok in header)
        rows = np.loadtxt(fh, ndmin=2)
    vals = np.zeros(int(rows[:, 0].max()) + 1 if len(rows) else 0)
    vals[rows[:, 0].astype(int)] = rows[:, 1]
    return meta, vals


class Manifest:
    """Accumulates the run record and writes ``manifest.json``."""

    def __init__(self, out: Path, command: str, cfg: RunConfig | None,
                 name: str = "manifest.json"):
        self.out = out
        self.name = name
        self.data = {"tool": "abheat", "version": __version__, "command": command,
                     "config": cfg.resolved() if cfg is not None else None,
                     "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "status": "running",
                     "outputs": {}}
        self._t0 = time.perf_counter()

    def add(self, path: Path) -> None:
        self.data["outputs"][str(path.relative_to(self.out))] = sha256_file(path)

    def finish(self, status: str, **extra) -> Path:
        self.data.update(extra)
        self.data["status"] = status
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["wall_seconds"] = time.perf_counter() - self._t0
        self.data["outputs"] = dict(sorted(self.data["outputs"].items()))
        path = self.out / self.name
        _write_atomic(path, json.dumps(self.data, indent=2) + "\n")
        return path


def make_lattice(cfg: RunConfig) -> tuple[DomainSpec, Lattice]:
    dom = cfg.domain.build()
    lat = build_lattice(dom, cfg.lattice.epsilon, qv_rate=cfg.lattice.qv_rate)
    if lat.pruned:
        log.info("pruned %d sites with fewer than %d neighbours", lat.pruned, lat.dim)
    return dom, lat


def make_basis(cfg: RunConfig, dom: DomainSpec, lat: Lattice, k: int | None = None) -> SpectralBasis:
    k = k or max(cfg.observables.n_eigen, max(cfg.observables.modes, default=0) + 1)
    if cfg.observables.basis == "closed_form":
        return closed_form_basis(dom, lat, k)
    return eig_neumann(lat, k)


def initial_density(cfg: RunConfig, dom: DomainSpec, lat: Lattice,
                    basis: SpectralBasis | None = None) -> np.ndarray:
    """Signed initial density with total variation 2."""
    ini = cfg.dynamics.initial
    x = lat.positions
    if ini.preset == "eigenmode":
        if ini.mode is not None:
            if dom.kind != "rectangle":
                raise ConfigError("dynamics.initial.mode", "cosine modes need a rectangle; use 'index'")
            if len(ini.mode) != dom.dim:
                raise ConfigError("dynamics.initial.mode", f"needs {dom.dim} entries")
            f = np.ones(lat.n_sites)
            for a, m in enumerate(ini.mode):
                f *= np.cos(math.pi * m * x[:, a] / dom.sides[a])
        else:
            if basis is None or ini.index >= len(basis):
                basis = eig_neumann(lat, ini.index + 1)
            f = basis.phi(ini.index).copy()
    elif ini.preset == "half_split":
        if ini.axis >= dom.dim:
            raise ConfigError("dynamics.initial.axis", f"must be < {dom.dim}")
        lo, hi = dom.bounding_box()
        mid = 0.5 * (lo[ini.axis] + hi[ini.axis])
        f = np.where(x[:, ini.axis] < mid, 1.0, -1.0)
    else:
        path = Path(ini.path)
        if not path.exists():
            raise ConfigError("dynamics.initial.path", f"no such file {path}")
        if ini.sha256 and sha256_file(path) != ini.sha256:
            raise ConfigError("dynamics.initial.sha256", "grid file digest mismatch")
        _, f = read_grid(path)
        if len(f) != lat.n_sites:
            raise ConfigError("dynamics.initial.path", f"grid has {len(f)} sites, lattice {lat.n_sites}")
    f = np.where(np.abs(f) < 1e-12 * np.abs(f).max(), 0.0, f)
    return normalize_tv(f, lat)


def sim_grid(cfg: RunConfig, t_end: float | None = None) -> list[float]:
    dyn = cfg.dynamics
    t_end = dyn.t_end if t_end is None else t_end
    return [t for t in dyn.grid() if t <= t_end]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_lattice(cfg: RunConfig, out: Path) -> int:
    man = Manifest(out, "lattice", cfg)
    _, lat = make_lattice(cfg)
    path = out / "lattice.txt"
    write_lattice(lat, path)
    man.add(path)
    report = {"sites": lat.n_sites, "boundary_sites": int(lat.boundary.sum()),
              "pruned": lat.pruned, **lat.constraint_residuals()}
    bad = lat.constraint_violations()
    report["violations"] = bad[:20]
    rpath = out / "lattice_report.json"
    rpath.write_text(json.dumps(report, indent=2) + "\n")
    man.add(rpath)
    print(json.dumps(report))
    man.finish("ok" if not bad else "threshold_failure")
    return EXIT_OK if not bad else EXIT_THRESHOLD


def cmd_eig(cfg: RunConfig, out: Path) -> int:
    man = Manifest(out, "eig", cfg)
    dom, lat = make_lattice(cfg)
    basis = make_basis(cfg, dom, lat)
    write_basis(basis, out / "basis.txt")
    man.add(out / "basis.txt")
    ref = closed_form_basis(dom, lat, len(basis)).eigenvalues if dom.kind == "rectangle" else None
    lines = ["n,lambda,residual" + (",lambda_closed_form" if ref is not None else "")]
    for n, lam in enumerate(basis.eigenvalues):
        res = basis.residuals[n] if len(basis.residuals) else 0.0
        row = f"{n},{_g(lam)},{_g(res)}"
        if ref is not None:
            row += f",{_g(ref[n])}"
        lines.append(row)
    (out / "eigenvalues.csv").write_text("\n".join(lines) + "\n")
    man.add(out / "eigenvalues.csv")
    print("\n".join(lines))
    man.finish("ok")
    return EXIT_OK


def _series_csv(series: ObservableSeries) -> str:
    trap, comp = integrated_V(series)
    head = ["t", "V", "K", "intV_trapezoid", "intV_compensator"] + [f"uhat_{n}" for n in series.modes]
    lines = [",".join(head)]
    for i, t in enumerate(series.times):
        row = [_g(t), _g(series.V[i]), str(int(series.K[i])), _g(trap[i]), _g(comp[i])]
        row += [_g(v) for v in series.fourier[i]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _emit_series(series: ObservableSeries, lat: Lattice, out: Path, man: Manifest,
                 snapshots: bool) -> None:
    p = out / "series.csv"
    p.write_text(_series_csv(series))
    man.add(p)
    if snapshots:
        sdir = out / "snapshots"
        sdir.mkdir(exist_ok=True)
        for i, t in enumerate(series.times):
            sp_ = sdir / f"snap_{i:05d}.txt"
            write_grid(sp_, series.snapshots[i], t, lat.epsilon, lat.dim, series.N)
            man.add(sp_)


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    man = Manifest(out, "simulate", cfg)
    dom, lat = make_lattice(cfg)
    write_lattice(lat, out / "lattice.txt")
    man.add(out / "lattice.txt")
    modes = tuple(cfg.observables.modes)
    basis = make_basis(cfg, dom, lat)
    u0 = initial_density(cfg, dom, lat, basis)
    dyn = cfg.dynamics
    config = init_from_density(lat, u0, dyn.N)
    params = SimParams(N=dyn.N, t_end=dyn.t_end, seed=dyn.seed, sample_times=sim_grid(cfg),
                       record_events=dyn.record_events)
    extra = {"lattice": {"sites": lat.n_sites, "pruned": lat.pruned},
             "eigenvalues": basis.eigenvalues.tolist()}
    try:
        series, _, events = simulate(config, lat, params, basis=basis, modes=modes,
                                     budget=dyn.budget_events)
    except EventBudgetError as exc:
        log.error("%s", exc)
        if exc.partial is not None and len(exc.partial):
            _emit_series(exc.partial, lat, out, man, cfg.output.snapshots)
        man.finish("budget_exceeded", error=str(exc), **extra)
        return EXIT_BUDGET
    _emit_series(series, lat, out, man, cfg.output.snapshots)
    if dyn.record_events:
        p = out / "events.ndjson"
        with open(p, "w") as fh:
            for ev in events:
                fh.write(ev.to_json() + "\n")
        man.add(p)
    man.finish("ok", events=series.events, annihilations=int(series.K[-1]),
               violations=series.violations, **extra)
    print(json.dumps({"events": series.events, "violations": series.violations,
                      "annihilations": int(series.K[-1])}))
    return EXIT_OK if series.violations == 0 else EXIT_THRESHOLD


def cmd_evolve(cfg: RunConfig, out: Path) -> int:
    man = Manifest(out, "evolve", cfg)
    dom, lat = make_lattice(cfg)
    u0 = initial_density(cfg, dom, lat)
    ev = HeatEvolver.from_lattice(lat)
    times = [0.0] + [t for t in sim_grid(cfg) if t > 0]
    if cfg.dynamics.t_end not in times:
        times.append(cfg.dynamics.t_end)
    hdir = out / "heat"
    hdir.mkdir(exist_ok=True)
    cur, prev = u0, 0.0
    tvs = []
    for i, t in enumerate(times):
        cur = ev.evolve(cur, t - prev)
        prev = t
        tvs.append(lat.cell_volume * float(np.abs(cur).sum()))
        p = hdir / f"heat_{i:05d}.txt"
        write_grid(p, cur, t, lat.epsilon, lat.dim, integer=False)
        man.add(p)
    C = 2.0 / np.array(tvs)
    lines = ["t,C,logC_over_t"]
    for t, c in zip(times, C):
        lines.append(f"{_g(t)},{_g(c)},{_g(math.log(c) / t) if t > 0 else 'nan'}")
    p = out / "normalizer.csv"
    p.write_text("\n".join(lines) + "\n")
    man.add(p)
    monotone = bool(np.all(np.diff(C) >= -1e-12))
    man.finish("ok", C_nondecreasing=monotone)
    return EXIT_OK


def load_run(run: Path) -> tuple[dict, Lattice, ObservableSeries]:
    """Reload a finished ``simulate`` run, checking its file inventory."""
    mpath = run / "manifest.json"
    if not mpath.exists():
        raise InventoryError(f"missing {mpath}")
    man = json.loads(mpath.read_text())
    outputs = man.get("outputs", {})
    missing = [f for f in outputs if not (run / f).exists()]
    if missing:
        raise InventoryError(f"run {run} is missing {len(missing)} listed file(s): {missing[:5]}")
    changed = [f for f, digest in outputs.items() if sha256_file(run / f) != digest]
    if changed:
        raise InventoryError(f"run {run} has modified file(s): {changed[:5]}")
    snaps = sorted(f for f in outputs if f.startswith("snapshots/"))
    if not snaps:
        raise InventoryError(f"run {run} lists no snapshot files")
    lat = read_lattice(run / "lattice.txt")
    rows = np.genfromtxt(run / "series.csv", delimiter=",", names=True, ndmin=1)
    if len(rows) != len(snaps):
        raise InventoryError(f"series has {len(rows)} rows but {len(snaps)} snapshots are listed")
    etas, times = [], []
    N = None
    for f in snaps:
        meta, vals = read_grid(run / f)
        etas.append(vals.astype(np.int64))
        times.append(float(meta["t"]))
        N = int(meta["N"])
    modes = tuple(int(c.split("_")[1]) for c in rows.dtype.names if c.startswith("uhat_"))
    four = np.column_stack([rows[f"uhat_{n}"] for n in modes]) if modes else np.zeros((len(rows), 0))
    series = ObservableSeries(np.array(times), np.array(etas), np.asarray(rows["V"], dtype=float),
                              np.asarray(rows["K"], dtype=np.int64), four, modes, N,
                              lat.epsilon, lat.dim)
    return man, lat, series


def _heatmaps(lat: Lattice, emp: np.ndarray, ref: np.ndarray, t: float, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "abheat"
    c = lat.coords - lat.coords.min(axis=0)
    shape = c.max(axis=0)[:2] + 1
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.6))
    vmax = float(max(np.abs(emp).max(), np.abs(ref).max())) or 1.0
    for ax, vals, title in zip(axes, (emp, ref), ("empirical", "reference")):
        img = np.full(shape, np.nan)
        img[c[:, 0], c[:, 1]] = vals
        im = ax.imshow(img.T, origin="lower", cmap="RdBu_r", vmin=-vmax, vmax=vmax,
                       extent=(0, shape[0] * lat.epsilon, 0, shape[1] * lat.epsilon))
        ax.set_title(f"{title}, t={t:.4g}")
    fig.colorbar(im, ax=axes, shrink=0.8)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_compare(cfg: RunConfig | None, run: Path, out: Path) -> int:
    man_in, lat, series = load_run(run)
    if cfg is None:
        cfg = RunConfig.model_validate(man_in["config"])
    man = Manifest(out, "compare", cfg, name="compare_manifest.json")
    delta = cfg.observables.delta or 4 * lat.epsilon
    ev = HeatEvolver.from_lattice(lat)
    comp = compare_to_limit(series, lat, ev, delta)
    seg = segregation_report(series, lat, delta)

    lines = ["t,block_l1"] + [f"{_g(r['t'])},{_g(r['block_l1'])}" for r in comp.rows()]
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    keys = ["t", "deficit", "lambda_total", "lambda_max", "frac_heavy_blocks", "identity_defect"]
    lines = [",".join(keys)]
    for r in seg.rows():
        lines.append(",".join(_g(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys))
    (out / "segregation.csv").write_text("\n".join(lines) + "\n")
    for f in ("comparison.csv", "segregation.csv"):
        man.add(out / f)

    trap, compens = integrated_V(series)
    summary = [
        {"metric": "block_l1_final", "value": float(comp.distance[-1]), "delta": delta},
        {"metric": "block_l1_max", "value": float(comp.distance.max())},
        {"metric": "deficit_final", "value": float(seg.deficit[-1])},
        {"metric": "identity_defect_max", "value": int(seg.identity_defect.max())},
        {"metric": "intV_trapezoid_final", "value": float(trap[-1])},
        {"metric": "intV_compensator_final", "value": float(compens[-1])},
    ]
    with open(out / "summary.ndjson", "w") as fh:
        for row in summary:
            fh.write(json.dumps(row) + "\n")
    man.add(out / "summary.ndjson")

    if cfg.output.heatmaps and lat.dim == 2:
        i = len(series) - 1
        ref = normalize_tv(ev.evolve(series.density(0), float(series.times[i])), lat)
        p = out / "heatmap_final.svg"
        _heatmaps(lat, series.density(i), ref, float(series.times[i]), p)
        man.add(p)

    failed = cfg.observables.max_distance is not None and comp.distance[-1] > cfg.observables.max_distance
    failed = failed or seg.identity_defect.max() != 0
    man.finish("threshold_failure" if failed else "ok", source_run=str(run))
    print(json.dumps({r["metric"]: r["value"] for r in summary}))
    return EXIT_THRESHOLD if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplicaTask:
    N: int
    seed: int
    index: int


def _replica_path(out: Path, task: ReplicaTask) -> Path:
    return out / "replicas" / f"N{task.N:07d}_seed{task.seed}.npz"


def _run_replica(cfg_json: str, out: str, task: ReplicaTask) -> str:
    """Run one replica and store its scalar series; returns the file path."""
    cfg = RunConfig.model_validate_json(cfg_json)
    out = Path(out)
    path = _replica_path(out, task)
    if path.exists():
        return str(path)
    dom, lat = make_lattice(cfg)
    basis = make_basis(cfg, dom, lat, k=max(cfg.sweep.mode + 1, 2))
    u0 = initial_density(cfg, dom, lat, basis)
    T = cfg.sweep.time or cfg.dynamics.t_end
    config = init_from_density(lat, u0, task.N)
    params = SimParams(N=task.N, t_end=T, seed=cfg.dynamics.seed, replica=task.index,
                       sample_times=sim_grid(cfg, T))
    series, _, _ = simulate(config, lat, params, basis=basis, modes=(cfg.sweep.mode,),
                            budget=cfg.dynamics.budget_events)
    tmp = path.with_name(path.stem + ".tmp.npz")
    np.savez(tmp, times=series.times, V=series.V, K=series.K, fourier=series.fourier,
             N=task.N, seed=task.seed, epsilon=lat.epsilon, events=series.events,
             violations=series.violations, lam=basis.eigenvalues[cfg.sweep.mode],
             mode=cfg.sweep.mode, dim=lat.dim)
    os.replace(tmp, path)
    return str(path)


def _load_replica(path) -> tuple[ObservableSeries, float]:
    z = np.load(path)
    s = ObservableSeries(z["times"], np.zeros((len(z["times"]), 0), dtype=np.int64), z["V"], z["K"],
                         z["fourier"], (int(z["mode"]),), int(z["N"]), float(z["epsilon"]), int(z["dim"]),
                         seed=int(z["seed"]), events=int(z["events"]), violations=int(z["violations"]))
    return s, float(z["lam"])


def sweep_tasks(cfg: RunConfig, replicas: int | None = None) -> list[ReplicaTask]:
    R = replicas or cfg.sweep.replicas
    base = cfg.dynamics.seed
    return [ReplicaTask(N, base + r, r) for N in sorted(cfg.sweep.N) for r in range(R)]


def run_sweep(cfg: RunConfig, out: Path, replicas: int | None = None) -> dict:
    """Run (or resume) every replica and reduce deterministically by ``(N, seed)``."""
    if cfg.sweep is None:
        raise ConfigError("sweep", "section required for the sweep command")
    (out / "replicas").mkdir(parents=True, exist_ok=True)
    tasks = sweep_tasks(cfg, replicas)
    todo = [t for t in tasks if not _replica_path(out, t).exists()]
    log.info("sweep: %d replicas, %d already done", len(tasks), len(tasks) - len(todo))
    cfg_json = cfg.model_dump_json()
    if cfg.sweep.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.sweep.workers) as pool:
            list(pool.map(_run_replica, [cfg_json] * len(todo), [str(out)] * len(todo), todo))
    else:
        for t in todo:
            _run_replica(cfg_json, str(out), t)

    rows, by_N, series_by_N = [], {}, {}
    lam = None
    for t in sorted(tasks, key=lambda t: (t.N, t.seed)):
        s, lam = _load_replica(_replica_path(out, t))
        trap, comp = integrated_V(s)
        u_T = float(s.fourier[-1, 0])
        rows.append({"N": t.N, "epsilon": s.epsilon, "seed": t.seed, "uhat_T": u_T,
                     "qv": realized_qv(s, s.modes[0], lam), "intV": float(comp[-1]),
                     "events": s.events, "violations": s.violations})
        by_N.setdefault(t.N, []).append(u_T)
        series_by_N.setdefault(t.N, []).append(s)

    report = {"replicas": len(rows), "N": sorted(by_N), "violations": sum(r["violations"] for r in rows)}
    try:
        ns = noise_scaling(by_N)
        report["noise_scaling"] = ns
        report["slope_in_range"] = bool(cfg.sweep.slope_min <= ns["slope"] <= cfg.sweep.slope_max)
    except InsufficientDataError as exc:
        report["noise_scaling"] = {"insufficient": str(exc)}
    try:
        report["qv_scaling"] = qv_scaling(series_by_N, cfg.sweep.mode, lam)
    except InsufficientDataError as exc:
        report["qv_scaling"] = {"insufficient": str(exc)}
    report["insufficient"] = "slope" not in report["noise_scaling"]

    keys = list(rows[0]) if rows else []
    lines = [",".join(keys)] + [",".join(_g(r[k]) if isinstance(r[k], float) else str(r[k])
                                         for k in keys) for r in rows]
    (out / "sweep_rows.csv").write_text("\n".join(lines) + "\n")
    (out / "sweep_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_sweep(cfg: RunConfig, out: Path, replicas: int | None) -> int:
    man = Manifest(out, "sweep", cfg)
    try:
        report = run_sweep(cfg, out, replicas)
    except EventBudgetError as exc:
        log.error("%s", exc)
        man.finish("budget_exceeded", error=str(exc))
        return EXIT_BUDGET
    for f in ("sweep_rows.csv", "sweep_report.json"):
        man.add(out / f)
    for p in sorted((out / "replicas").glob("*.npz")):
        man.add(p)
    ok = report["insufficient"] or report.get("slope_in_range", False)
    ok = ok and report["violations"] == 0
    man.finish("ok" if ok else "threshold_failure", report=report)
    print(json.dumps({k: report[k] for k in ("replicas", "N", "insufficient")}
                     | {"slope": report["noise_scaling"].get("slope")}))
    return EXIT_OK if ok else EXIT_THRESHOLD


# ---------------------------------------------------------------------------
# Self test
# ---------------------------------------------------------------------------


def _check(name: str, ok: bool, detail: str, results: list) -> None:
    results.append((name, ok, detail))
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


def _random_config(rng: np.random.Generator, n_sites: int, N: int) -> Configuration:
    sites = rng.permutation(n_sites)
    k = rng.integers(1, n_sites)
    return Configuration.from_positions(n_sites, rng.choice(sites[:k], N), rng.choice(sites[k:], N))


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Exact-identity checks on tiny built-in fixtures."""
    results: list = []
    rng = np.random.default_rng(seed)
    lats = [build_lattice(DomainSpec.rectangle(1, 1), 1 / 4),
            build_lattice(DomainSpec.rectangle(1, 0.75), 1 / 4),
            build_lattice(DomainSpec.disc((0, 0), 1), 1 / 2)]

    # generator identity L eta_z = (L* eta)_z + V eta_z
    worst = 0.0
    for lat in lats:
        adj = adjoint_laplacian(lat)
        for _ in range(10):
            cfg = _random_config(rng, lat.n_sites, int(rng.integers(1, 5)))
            V = compute_V(cfg, lat)
            rhs = adj.apply(cfg.eta) + V * cfg.eta
            for z in range(lat.n_sites):
                lhs = generator_apply(lambda e, z=z: float(e[z]), cfg, lat)
                worst = max(worst, abs(lhs - rhs[z]))
    _check("generator_identity", worst <= 1e-10, f"max error {worst:.3g}", results)

    # transpose / duality and zero row sums
    worst = 0.0
    for lat in lats:
        lap = discrete_laplacian(lat)
        adj = adjoint_laplacian(lat, lap)
        f, g = rng.normal(size=lat.n_sites), rng.normal(size=lat.n_sites)
        worst = max(worst, abs(lap.apply(f) @ g - f @ adj.apply(g)),
                    float(np.abs(lap.apply(np.ones(lat.n_sites))).max()))
    _check("transpose_duality", worst <= 1e-12, f"max error {worst:.3g}", results)

    # overlap identity in integers
    defect = 0
    for lat in lats[:2]:
        for _ in range(20):
            cfg = _random_config(rng, lat.n_sites, int(rng.integers(1, 30)))
            defect = max(defect, overlap_identity_defect(cfg.eta, lat, 2 * lat.epsilon + 1e-12))
    _check("overlap_identity", defect == 0, f"max integer defect {defect}", results)

    # conservation and event replay
    lat = lats[0]
    u0 = np.cos(math.pi * lat.positions[:, 0])
    cfg0 = init_from_density(lat, normalize_tv(u0, lat), 12)
    series, final, events = simulate(cfg0, lat, SimParams(12, 0.05, seed, [0.025], True))
    cur = cfg0
    replay_ok = True
    for ev in events:
        cur = apply_event(cur, EventRecord.from_json(ev.to_json()))
    replay_ok = np.array_equal(cur.eta, final.eta)
    _check("conservation", series.violations == 0 and len(events) > 0,
           f"{len(events)} events, {series.violations} violations", results)
    _check("event_replay", bool(replay_ok), "replayed state matches final state", results)

    # the constraint checker must flag a corrupted jump law by site
    lat = build_lattice(DomainSpec.rectangle(1, 1), 1 / 4)
    target = int(np.flatnonzero(lat.boundary & (np.diff(lat.indptr) == 3))[0])
    probs = lat.probs.copy()
    a = lat.indptr[target]
    probs[a] += 0.05
    probs[a + 1] -= 0.05
    bad = dataclasses.replace(lat, probs=probs)
    found = [v for v in bad.constraint_violations() if v["site"] == target]
    _check("corrupted_fixture_detected", bool(found),
           f"site {target} flagged: {[v['check'] for v in found]}", results)
    _check("pristine_fixture_clean", not lat.constraint_violations(), "no violations", results)
    return results


def cmd_selftest(seed: int) -> int:
    t0 = time.perf_counter()
    results = run_selftest(seed)
    failed = [r for r in results if not r[1]]
    print(f"selftest: {len(results) - len(failed)}/{len(results)} passed "
          f"in {time.perf_counter() - t0:.1f}s")
    return EXIT_THRESHOLD if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="abheat", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"abheat {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("lattice", "eig", "simulate", "evolve", "compare", "sweep", "selftest"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name not in ("selftest", "compare"))
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--budget-events", type=int)
        p.add_argument("--replicas", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "compare":
            p.add_argument("--run", type=Path, required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest(args.seed or 0)
        cfg = None
        if args.config is not None:
            cfg = load_config(args.config, {"dynamics.seed": args.seed,
                                            "dynamics.budget_events": args.budget_events})
        if args.command == "compare":
            out = args.out or args.run
            out.mkdir(parents=True, exist_ok=True)
            return cmd_compare(cfg, args.run, out)
        out = args.out or Path("abheat_out")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "lattice":
            return cmd_lattice(cfg, out)
        if args.command == "eig":
            return cmd_eig(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "evolve":
            return cmd_evolve(cfg, out)
        return cmd_sweep(cfg, out, args.replicas)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InventoryError as exc:
        print(f"inventory error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EventBudgetError as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
