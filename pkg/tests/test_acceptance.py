"""Acceptance criteria A1 to A10, each reported as one PASS/FAIL line."""
from __future__ import annotations

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from abheat import (
    DomainSpec,
    HeatEvolver,
    SimParams,
    adjoint_laplacian,
    build_lattice,
    compare_to_limit,
    compute_V,
    eig_neumann,
    generator_apply,
    init_from_density,
    integrated_V,
    normalizer_C,
    segregation_report,
    simulate,
)
from abheat.dynamics import free_walk_displacements
from abheat.runner import initial_density, load_config, make_basis, make_lattice, run_sweep, sim_grid

from test_dynamics import random_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PI2 = math.pi ** 2


@pytest.fixture(scope="module")
def a5():
    """The desk-scale eigenfunction run shared by A5, A6, A8, A9 and A10."""
    cfg = load_config(CONFIGS / "square_eigenmode.toml")
    t0 = time.perf_counter()
    dom, lat = make_lattice(cfg)
    basis = make_basis(cfg, dom, lat)
    u0 = initial_density(cfg, dom, lat, basis)
    config = init_from_density(lat, u0, cfg.dynamics.N)
    params = SimParams(N=cfg.dynamics.N, t_end=cfg.dynamics.t_end, seed=cfg.dynamics.seed,
                       sample_times=sim_grid(cfg))
    series, final, _ = simulate(config, lat, params, basis=basis, modes=tuple(cfg.observables.modes),
                                budget=cfg.dynamics.budget_events)
    seconds = time.perf_counter() - t0
    return {"cfg": cfg, "lat": lat, "basis": basis, "series": series, "final": final,
            "seconds": seconds, "delta": cfg.observables.delta}


def test_A1_generator_identity(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    lattices = {}
    while cases < 100:
        a, b = (float(s) for s in rng.choice([0.5, 0.75, 1.0], 2))
        key = (a, b)
        if key not in lattices:
            lat = build_lattice(DomainSpec.rectangle(a, b), 0.25)
            lattices[key] = (lat, adjoint_laplacian(lat))
        lat, adj = lattices[key]
        cfg = random_config(rng, lat.n_sites, int(rng.integers(1, 7)))
        rhs = adj.apply(cfg.eta) + compute_V(cfg, lat) * cfg.eta
        for z in range(lat.n_sites):
            lhs = generator_apply(lambda e, z=z: float(e[z]), cfg, lat)
            worst = max(worst, abs(lhs - rhs[z]))
        cases += 1
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-10 and seconds < 10
    assert verdict("A1", ok, f"{cases} configurations, max |L eta_z - (adj eta_z + V eta_z)| = {worst:.2e}",
                   seconds)


def test_A2_boundary_construction(verdict):
    t0 = time.perf_counter()
    details, ok = [], True
    for name, dom, eps in (("square 1/32", DomainSpec.rectangle(1, 1), 1 / 32),
                           ("disc 1/16", DomainSpec.disc((0, 0), 1), 1 / 16)):
        lat = build_lattice(dom, eps)
        bad = lat.constraint_violations(row_tol=1e-12, drift_tol=1e-10)
        res = lat.constraint_residuals()
        c1_min = float(lat.c1[lat.boundary].min())
        ok &= not bad and c1_min > 0
        details.append(f"{name}: {int(lat.boundary.sum())} boundary sites, {len(bad)} violations, "
                       f"row dev {res['max_row_sum_deviation']:.1e}, "
                       f"tangential/eps {res['max_tangential_drift'] / eps:.1e}, min c1 {c1_min:.3g}")
    seconds = time.perf_counter() - t0
    ok = ok and seconds < 5
    assert verdict("A2", ok, "; ".join(details), seconds)


def test_A3_free_particle_diffusion(verdict):
    t0 = time.perf_counter()
    lat = build_lattice(DomainSpec.rectangle(1, 1), 1 / 64)
    t = 0.02
    disp = free_walk_displacements(lat, lat.index_of((32, 32)), t, 10_000, seed=3)
    var = disp.var(axis=0)
    seconds = time.perf_counter() - t0
    rel = np.abs(var - t) / t
    ok = bool(np.all(rel <= 0.05)) and seconds < 30
    assert verdict("A3", ok, f"per-coordinate variance {np.round(var, 5).tolist()} vs t = {t} "
                             f"(ratio {np.round(var / t, 3).tolist()})", seconds)


def test_A4_spectrum(verdict):
    t0 = time.perf_counter()
    lams = [eig_neumann(build_lattice(DomainSpec.rectangle(1, 1), e), 2).eigenvalues[1]
            for e in (1 / 8, 1 / 16, 1 / 32)]
    errs = [abs(x - PI2) / PI2 for x in lams]
    ratios = [errs[1] / errs[0], errs[2] / errs[1]]
    seconds = time.perf_counter() - t0
    ok = errs[2] <= 0.05 and all(r <= 0.7 for r in ratios) and seconds < 60
    assert verdict("A4", ok, f"lambda_1 = {np.round(lams, 4).tolist()}, rel errors "
                             f"{np.round(errs, 4).tolist()}, ratios {np.round(ratios, 3).tolist()}", seconds)


def test_A5_eigenfunction_stability(a5, verdict):
    s, lat = a5["series"], a5["lat"]
    rep = compare_to_limit(s, lat, HeatEvolver.from_lattice(lat), a5["delta"])
    dist = float(rep.distance[-1])
    late = (s.times >= 0.25) & (s.times <= 0.5)
    V_bar = float(s.V[late].mean())
    v_rel = abs(V_bar - PI2) / PI2
    ok = s.times[-1] == 0.5 and dist < 0.2 and v_rel <= 0.2 and a5["seconds"] < 120
    assert verdict("A5", ok, f"block-L1 distance at t=0.5 = {dist:.4f}, mean V on [0.25, 0.5] = "
                             f"{V_bar:.3f} ({v_rel:.1%} from pi^2), {s.events} events", a5["seconds"])


def test_A6_segregation(a5, verdict):
    s = a5["series"]
    rows = list(segregation_report(s, a5["lat"], a5["delta"]).rows())
    late = [r["deficit"] for r in rows if r["t"] >= 0.1]
    defects = [r["identity_defect"] for r in rows]
    ok = max(late) < 0.3 and all(d == 0 for d in defects)
    assert verdict("A6", ok, f"max deficit for t >= 0.1 = {max(late):.4f}, identity defect nonzero at "
                             f"{sum(d != 0 for d in defects)} of {len(rows)} sample times")


@pytest.mark.slow
def test_A7_noise_scaling(tmp_path_factory, verdict):
    cfg = load_config(CONFIGS / "noise_sweep.toml")
    out = Path(os.environ.get("ABHEAT_A7_DIR") or tmp_path_factory.mktemp("a7"))
    reused = len(list((out / "replicas").glob("*.npz"))) if (out / "replicas").exists() else 0
    t0 = time.perf_counter()
    report = run_sweep(cfg, out)
    seconds = time.perf_counter() - t0
    ns = report["noise_scaling"]
    slope = ns.get("slope", float("nan"))
    ok = (-1.4 <= slope <= -0.6) and report["violations"] == 0 and seconds < 1800
    note = f", {reused} replicas reused" if reused else ""
    assert verdict("A7", ok, f"slope {slope:.3f} +/- {ns.get('half_width', float('nan')):.3f} over N = "
                             f"{report['N']}, {report['replicas']} replicas{note}", seconds)


def test_A8_compensator(a5, verdict):
    s = a5["series"]
    trap, _ = integrated_V(s)
    lhs = 2 * s.K[-1] / s.N
    rel = abs(lhs - trap[-1]) / trap[-1]
    ok = rel <= 0.1
    assert verdict("A8", ok, f"2K/N = {lhs:.4f}, trapezoidal integral of V = {trap[-1]:.4f} at t = 0.5 "
                             f"(ratio {lhs / trap[-1]:.3f})")


def test_A9_conservation(a5, verdict):
    s = a5["series"]
    N = s.N
    plus = np.maximum(s.snapshots, 0).sum(axis=1)
    minus = np.maximum(-s.snapshots, 0).sum(axis=1)
    tv = np.abs(s.snapshots).sum(axis=1) / N
    ok = s.violations == 0 and np.all(plus == N) and np.all(minus == N) and np.all(tv == 2)
    a5["final"].validate()
    assert verdict("A9", bool(ok), f"{s.violations} in-loop violations over {s.events} events; "
                                   f"{len(s)} snapshots with sum eta+ = sum eta- = N and TV = {tv[-1]:g}")


def test_A10_normalizer(a5, verdict):
    s, lat = a5["series"], a5["lat"]
    lam = float(a5["basis"].eigenvalues[1])
    u0 = s.density(0)
    C = normalizer_C(HeatEvolver.from_lattice(lat), u0, s.times)
    mask = (s.times >= 0.2) & (s.times <= 0.5)
    rates = np.log(C[mask]) / s.times[mask]
    worst = float(np.abs(rates - lam).max() / lam)
    mono = bool(np.all(np.diff(C) >= 0))
    ok = worst <= 0.1 and mono
    assert verdict("A10", ok, f"log C/t on [0.2, 0.5] in [{rates.min():.3f}, {rates.max():.3f}] vs "
                              f"lambda_1 = {lam:.4f} (worst {worst:.1%}), C nondecreasing: {mono}")
