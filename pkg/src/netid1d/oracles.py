"""Brute-force structural check suite over random unit-scaled systems.

Each check compares a structured construction against a direct dense-algebra
computation on the same system: banded/Toeplitz patterns of the cluster
Markov matrices, band values against the shift-coefficient expansion, the
layered observability-controllability product, the shift identity of the
layered observability matrix, and the block-incidence affine operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    assemble_observability,
    build_affine_operator,
    build_G,
    build_H,
    markov_band_oracle,
    markov_oracle,
    params_from_markov_matrices,
    tv_controllability,
    tv_observability,
    two_layer_param_map,
    extract_markov_band,
    we_sequences,
    _w_blocks,
)
from .network import lift_cluster_matrices, random_subsystem

__all__ = ["CheckResult", "run_structural_checks"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    max_dev: float
    tol: float


def _band_pattern_dev(M: np.ndarray, j: int, w: int, p: int, m: int) -> tuple[float, float]:
    """(max |out-of-band block|, max in-region same-diagonal mismatch)."""
    out_dev = 0.0
    toe_dev = 0.0
    from .blocks import _in_region

    diag_values: dict[int, np.ndarray] = {}
    for l in range(1, w + 1):
        for q in range(1, w + 1):
            blk = M[(l - 1) * p:l * p, (q - 1) * m:q * m]
            if abs(l - q) > j:
                out_dev = max(out_dev, float(np.max(np.abs(blk))))
            elif _in_region(j, l, q, (w - 1) // 2):
                k = q - l
                if k in diag_values:
                    toe_dev = max(toe_dev, float(np.max(np.abs(blk - diag_values[k]))))
                else:
                    diag_values[k] = blk
    return out_dev, toe_dev


def run_structural_checks(
    count: int = 20,
    seed: int = 0,
    n: int | None = None,
    m: int | None = None,
    p: int | None = None,
    R: int | None = None,
    s: int | None = None,
    tol: float = 1e-10,
) -> list[CheckResult]:
    """Run every structural check on `count` random systems.

    Dimensions left as None are drawn per system (n <= 4, m, p <= 3, R <= 5,
    s in {4, 6}) subject to the structural constraints linking R and s.
    """
    rng = np.random.default_rng(seed)
    devs = {
        "markov band pattern": 0.0,
        "markov Toeplitz region": 0.0,
        "band values vs shift expansion": 0.0,
        "layered product equals H": 0.0,
        "observability shift identity": 0.0,
        "affine operator round trip": 0.0,
        "stacked factor ranks": 0.0,
    }

    for trial in range(count):
        ni = n if n is not None else int(rng.integers(1, 5))
        mi = m if m is not None else int(rng.integers(1, 4))
        pi = p if p is not None else int(rng.integers(1, 4))
        si = s if s is not None else int(rng.choice([4, 6]))
        Rmin = max(1, si // 2 - 1, si - 2 - (si - 2) // 2)
        Ri = R if R is not None else int(rng.integers(Rmin, 6))
        if Ri < si // 2 - 1 or si - 2 > 2 * Ri:
            si = 4
        sub = random_subsystem(ni, mi, pi, seed=int(rng.integers(0, 2**31)))
        lifted = lift_cluster_matrices(sub, Ri)
        w = 2 * Ri + 1

        markov = [markov_oracle(lifted, j) for j in range(si - 1)]
        for j, M in enumerate(markov):
            out_dev, toe_dev = _band_pattern_dev(M, j, w, pi, mi)
            devs["markov band pattern"] = max(devs["markov band pattern"], out_dev)
            devs["markov Toeplitz region"] = max(devs["markov Toeplitz region"], toe_dev)

        pmap = two_layer_param_map(Ri, si, pi, mi)
        band = extract_markov_band(params_from_markov_matrices(pmap, markov))
        oracle = markov_band_oracle(sub, si)
        band_dev = max(
            float(np.max(np.abs(band.blocks[k] - oracle.blocks[k]))) for k in oracle.blocks
        )
        devs["band values vs shift expansion"] = max(
            devs["band values vs shift expansion"], band_dev
        )

        H = build_H(oracle, Ri, si)
        O = tv_observability(w, si // 2, sub)
        Cm = tv_controllability(w, si // 2, sub)
        devs["layered product equals H"] = max(
            devs["layered product equals H"],
            float(np.max(np.abs(O.matrix @ Cm.matrix - H))),
        )

        half = si // 2
        W = _w_blocks(sub, half - 1)
        L_mat, _ = assemble_observability(2 * Ri - 1, range(half - 1), W, pi, ni)
        Rhs, _ = assemble_observability(2 * Ri + 1, range(1, half), W, pi, ni)
        G = build_G(2 * Ri - 1, sub.A_l, sub.A, sub.A_r)
        devs["observability shift identity"] = max(
            devs["observability shift identity"],
            float(np.max(np.abs(L_mat @ G - Rhs))),
        )

        wes = we_sequences(sub, si)
        op = build_affine_operator(Ri, si, pi, mi)
        devs["affine operator round trip"] = max(
            devs["affine operator round trip"],
            float(np.max(np.abs(op.apply(wes.W_stack @ wes.E_stack) - H))),
        )

        svW = np.linalg.svd(wes.W_stack, compute_uv=False)
        svE = np.linalg.svd(wes.E_stack, compute_uv=False)
        rank_dev = 0.0
        if len(svW) > ni or wes.W_stack.shape[1] != ni:
            rank_dev = 1.0
        if svW[min(ni, len(svW)) - 1] / svW[0] < 1e-10:
            rank_dev = 1.0
        if svE[min(ni, len(svE)) - 1] / svE[0] < 1e-10:
            rank_dev = 1.0
        devs["stacked factor ranks"] = max(devs["stacked factor ranks"], rank_dev)

    results = []
    for name, dev in devs.items():
        check_tol = 0.5 if name == "stacked factor ranks" else tol
        results.append(CheckResult(name=name, passed=dev <= check_tol, max_dev=dev, tol=check_tol))
    return results
