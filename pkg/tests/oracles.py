"""Independent reference computations, written without the package.

Run ``python tests/oracles.py`` to regenerate ``tests/data/derived.json``.
The tests read the frozen file and also recompute the cheap entries.
"""

from __future__ import annotations

import json
import math
from fractions import Fraction
from pathlib import Path

FROZEN = Path(__file__).parent / "data" / "derived.json"


def disc_sites(radius: float, eps: Fraction) -> set[tuple[int, int]]:
    """Closed-disc lattice points, pruned to >= 2 neighbours by repeated sweeps."""
    r2 = Fraction(radius) ** 2
    m = int(radius / eps) + 1
    pts = {(i, j) for i in range(-m, m + 1) for j in range(-m, m + 1)
           if (i * eps) ** 2 + (j * eps) ** 2 <= r2}
    while True:
        weak = {p for p in pts
                if sum((p[0] + a, p[1] + b) in pts for a, b in ((1, 0), (-1, 0), (0, 1), (0, -1))) < 2}
        if not weak:
            return pts
        pts -= weak


def largest_remainder(weights: list[Fraction], n: int) -> list[int]:
    total = sum(weights)
    quota = [w * n / total for w in weights]
    base = [q.numerator // q.denominator for q in quota]
    short = n - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(quota[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def square_sites(n_side: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n_side) for j in range(n_side)]


def V_bruteforce(eta: dict, n_side: int, eps: Fraction, N: int) -> Fraction:
    """Growth-rate intensity on a closed square grid whose occupied sites are interior.

    Interior jump law ``1/4`` per neighbour, holding time ``eps**2``.
    """
    total = Fraction(0)
    for (i, j), e in eta.items():
        for a, b in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            y = (i + a, j + b)
            ey = eta.get(y, 0)
            if (e > 0 and ey < 0) or (e < 0 and ey > 0):
                total += abs(e) * Fraction(1, 4) / eps ** 2
    return total / N


def cos_split_counts(n_side: int, N: int) -> tuple[list[int], list[int]]:
    """Largest-remainder counts for cos(pi x) on the closed unit-square grid."""
    eps = 1.0 / (n_side - 1)
    vals = [math.cos(math.pi * i * eps) for i, _ in square_sites(n_side)]
    vals = [0.0 if abs(v) < 1e-12 else v for v in vals]
    pos = [Fraction(max(v, 0.0)) for v in vals]
    neg = [Fraction(max(-v, 0.0)) for v in vals]
    return largest_remainder(pos, N), largest_remainder(neg, N)


def build() -> dict:
    eps8 = Fraction(1, 8)
    disc = disc_sites(1.0, eps8)
    out = {
        "disc_r1_eps8_sites": len(disc),
        "disc_r1_eps8_area_estimate": math.pi / float(eps8) ** 2,
        "flat_face_probs": [1 / 3, 1 / 3, 1 / 3],
        "flat_face_drift_over_eps": 1 / 3,
        "corner_probs": [0.5, 0.5],
        "holding_mixed_over_eps2": 0.5 * 1 + 0.5 * 2,
        "laplacian_interior_eps_half": {"off": 1.0, "diag": -4.0},
        "jump_rate_N1_eps_half": 2 * 1 * 4,
        "jump_rate_N10_eps_tenth": 2 * 10 * 100,
        "lambda1_unit_square": math.pi ** 2,
    }
    # V example: one + and one - adjacent at interior sites, eps = 1/2, N = 1
    out["V_pair_eps_half"] = float(V_bruteforce({(1, 1): 1, (2, 1): -1}, 4, Fraction(1, 2), 1))
    # doubling: same pattern with two particles each
    out["V_pair_doubled_eps_half"] = float(V_bruteforce({(1, 1): 2, (2, 1): -2}, 4, Fraction(1, 2), 2))
    plus, minus = cos_split_counts(9, 100)
    out["cos_split_9x9_N100"] = {"plus": plus, "minus": minus}
    return out


if __name__ == "__main__":
    FROZEN.write_text(json.dumps(build(), indent=2) + "\n")
    print(FROZEN.read_text())
