"""Markov-parameter estimation from local cluster data.

Solves the structure-constrained low-rank program

    min_{phi, yhat}  sum_t ||yhat(t) - y(t)||^2
                     + lambda * rank[ Yhat(yhat) - Theta(phi) U ]

over the two-layer structured Toeplitz set, with the rank term handled by a
reweighted nuclear-norm heuristic.  The decision variables are exactly the
free parameter blocks phi and the denoised output sequence yhat; both
structures are enforced by parameterization, never by projection.

Inner solver: each reweighting pass minimizes the convex surrogate

    sum ||yhat - y||^2 + lambda ||W_L (Yhat - Theta U) W_R||_*

by a two-block method of multipliers: the weighted residual is matched to an
auxiliary matrix Z through an augmented quadratic coupling (penalty mu,
scaled so one soft-threshold step shaves a few percent of the top weighted
singular value, then residual-balanced), Z is updated by singular-value soft
thresholding, phi by an exact weighted least-squares solve with a
pair-indexed Gram assembled once per pass, and yhat by a warm-started
preconditioned conjugate-gradient step.  Every block update minimizes the
augmented Lagrangian over its variables, which is asserted per iteration.
Weights are refreshed between passes as the smoothed inverse square roots
(M M^T + delta^2 I)^{-1/2} with delta proportional to the top singular value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .blocks import (
    MarkovBand,
    TwoLayerToeplitzParams,
    extract_markov_band,
    toeplitz_from_impulse,
    two_layer_param_map,
)
from .linalg import fast_svd, rank_with_margin
from .network import ClusterData, LiftedModel

__all__ = [
    "EstimatorOptions",
    "DimensionReport",
    "MarkovEstimate",
    "EstimationError",
    "check_dimension_conditions",
    "pe_check",
    "PEResult",
    "estimate_markov",
    "nonuniqueness_witness",
    "markov_estimate_to_json",
    "trace_to_csv",
]


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimatorOptions:
    lam: float = 1e-3            # regularization weight of the rank term
    reweight_iters: int = 5      # outer reweighting passes
    inner_iters: int = 500       # cap on inner iterations per pass
    inner_tol: float = 1e-6      # relative objective-change stopping tolerance
    delta_factor: float = 1e-2   # weight smoothing, delta = factor * sigma_max
    h: int | None = None         # Hankel column count, default L - s + 1
    mu0: float = 1.0             # penalty prefactor (1.0 = neutral scaling)
    mu_growth: float = 1.5       # residual-balancing multiplier
    noise_free: bool = False     # with lam == 0: freeze yhat = y, fit phi only

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.lam == 0 and not self.noise_free:
            raise ValueError("lam == 0 requires the noise_free flag")


@dataclass(frozen=True)
class DimensionReport:
    lhs: int
    rhs: int
    holds: bool
    R_vs_s: bool
    nu_o: int | None = None
    s_vs_observability: bool | None = None
    obsv_full_rank: bool | None = None
    warnings: tuple = ()


@dataclass(frozen=True)
class PEResult:
    pe: bool
    margin: float
    rank: int
    rows: int


@dataclass(frozen=True)
class MarkovEstimate:
    band: MarkovBand
    theta: TwoLayerToeplitzParams
    residual_rank_surrogate: float   # final weighted nuclear norm
    denoised_output_error: float     # sum ||yhat - y||^2
    iterations: int
    converged: bool
    residual_rank: int
    objective_trace: tuple = field(repr=False, default=())
    warnings: tuple = ()
    dimension_report: DimensionReport | None = None


def check_dimension_conditions(
    n: int, p: int, m: int, R: int, s: int, subsystem=None
) -> DimensionReport:
    """Evaluate the row-count condition and the sufficient-condition checklist.

    Never blocks execution; violated conditions only produce warnings, since
    the sufficient conditions are known to be conservative in practice.
    """
    if min(n, p, m) < 1 or R < 0 or s < 1:
        raise ValueError("dimensions must be positive (R nonnegative)")
    warnings: list[str] = []
    lhs = (2 * R + 1) * s * p
    rhs = (2 * R + 1) * n + min((s - 1) * s * p, 2 * (s - 1) * n)
    holds = lhs > rhs
    if not holds:
        warnings.append(
            f"low-rank row condition fails: {lhs} <= {rhs}; the stacked residual "
            "need not be rank deficient"
        )
    R_vs_s = R >= s - 1
    if not R_vs_s:
        warnings.append(
            f"sufficient condition R >= s-1 fails ({R} < {s - 1}); proceeding anyway"
        )

    nu_o = None
    s_vs_obs = None
    obsv_full = None
    if subsystem is not None:
        from .network import lift_cluster_matrices

        lifted = lift_cluster_matrices(subsystem, R)
        wn = (2 * R + 1) * n
        blocks = [lifted.C_R]
        nu_o = None
        for k in range(1, wn + 1):
            Ok = np.vstack(blocks)
            if np.linalg.matrix_rank(Ok, tol=None) == wn:
                nu_o = k
                break
            blocks.append(blocks[-1] @ lifted.A_R)
        if nu_o is None:
            warnings.append("lifted pair not observable; observability index undefined")
            s_vs_obs = False
        else:
            s_vs_obs = s > nu_o
            if not s_vs_obs:
                warnings.append(f"condition s > nu_o fails (s={s}, nu_o={nu_o})")
        if 2 * R + 1 > 2 * (s - 2) and s >= 2:
            from .blocks import tv_observability

            O = tv_observability(2 * R + 1, s - 1, subsystem)
            obsv_full = np.linalg.matrix_rank(O.matrix) == wn
            if not obsv_full:
                warnings.append("time-varying observability matrix is column-rank deficient")
        else:
            warnings.append(
                "time-varying observability check undefined for this (R, s); skipped"
            )
    return DimensionReport(
        lhs=lhs, rhs=rhs, holds=holds, R_vs_s=R_vs_s, nu_o=nu_o,
        s_vs_observability=s_vs_obs, obsv_full_rank=obsv_full, warnings=tuple(warnings),
    )


def pe_check(u_seq: np.ndarray, order: int, h: int | None = None, rtol: float = 1e-8) -> PEResult:
    """Persistency of excitation: full row rank of the order-`order` block Hankel."""
    from .blocks import block_hankel

    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim == 1:
        u_seq = u_seq[:, None]
    L = u_seq.shape[0]
    if h is None:
        h = L - order + 1
    if h < 1 or order + h - 1 > L:
        raise ValueError(f"insufficient data: L={L} for order={order}, h={h}")
    H = block_hankel(u_seq, order, h).matrix
    rank, _ = rank_with_margin(H, rtol)
    sv = np.linalg.svd(H, compute_uv=False)
    margin = float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0
    return PEResult(pe=rank == H.shape[0], margin=margin, rank=rank, rows=H.shape[0])


def nonuniqueness_witness(lifted: LiftedModel, s: int, G_R: np.ndarray) -> np.ndarray:
    """First-layer Toeplitz perturbation that cannot change the rank objective.

    Returns the boundary-channel impulse Toeplitz matrix times I_s kron G_R.
    For the result to be conformable with the structured Toeplitz matrix
    acting on the input Hankel, G_R must have (2R+1)*m columns (and 2n rows).
    """
    n = lifted.subsystem.n
    G_R = np.asarray(G_R, dtype=float)
    if G_R.shape[0] != 2 * n:
        raise ValueError(f"G_R must have {2 * n} rows")
    blocks = []
    P = lifted.D_R
    for _ in range(s - 1):
        blocks.append(lifted.C_R @ P)
        P = lifted.A_R @ P
    T_D = toeplitz_from_impulse(blocks, s)
    return T_D @ np.kron(np.eye(s), G_R)


# -- the reweighted two-block solver -------------------------------------------


class _RightWeight:
    """W_R = delta_inv * I + V diag(w) V^T, applied from the right; the squared
    form (for normal equations) keeps the same structure."""

    def __init__(self, h: int):
        self.h = h
        self.identity = True
        self.delta_inv = 1.0
        self.V: np.ndarray | None = None
        self.w: np.ndarray | None = None       # W_R coefficients on V
        self.w2: np.ndarray | None = None      # Omega_R = W_R^2 coefficients on V
        self.delta_inv2 = 1.0

    def set_from_svd(self, V: np.ndarray, sigma: np.ndarray, delta: float):
        self.identity = False
        inv = 1.0 / np.sqrt(sigma**2 + delta**2)
        self.delta_inv = 1.0 / delta
        self.delta_inv2 = self.delta_inv**2
        self.V = V
        self.w = inv - self.delta_inv
        self.w2 = inv**2 - self.delta_inv2

    def right_apply(self, M: np.ndarray) -> np.ndarray:
        if self.identity:
            return M
        return self.delta_inv * M + ((M @ self.V) * self.w) @ self.V.T

    def right_apply_sq(self, M: np.ndarray) -> np.ndarray:
        if self.identity:
            return M
        return self.delta_inv2 * M + ((M @ self.V) * self.w2) @ self.V.T

    def diag_sq(self) -> np.ndarray:
        if self.identity:
            return np.ones(self.h)
        return self.delta_inv2 + np.sum(self.V**2 * self.w2, axis=1)


_PHI_PAIR_CACHE: dict = {}


class _Solver:
    """Per-problem precomputation and the closed-form / iterative block steps."""

    def __init__(
        self,
        y: np.ndarray,            # (L', wp) data restricted to the window
        U: np.ndarray,            # (s*wm, h) input Hankel
        pmap: TwoLayerToeplitzParams,
        opts: EstimatorOptions,
        fit_data: bool,
    ):
        self.opts = opts
        self.pmap = pmap
        self.s, self.R = pmap.s, pmap.R
        self.w = 2 * pmap.R + 1
        self.p, self.m = pmap.p, pmap.m
        self.U = U
        self.h = U.shape[1]
        self.y = y
        self.Lp = y.shape[0]
        self.wp = self.w * self.p
        self.wm = self.w * self.m
        self.rows = self.s * self.wp
        self.fit_data = fit_data
        self.lam = opts.lam if opts.lam > 0 else 1.0
        self.nphi = pmap.n_params * self.p * self.m

        # block-level positions of every parameter on the (s*w)^2 grid
        self.pos_I: list[np.ndarray] = []
        self.pos_J: list[np.ndarray] = []
        for pid in range(pmap.n_params):
            Is, Js = [], []
            for (j, l, q) in pmap.positions[pid]:
                for b in range(self.s - 1 - j):
                    a = b + j + 1
                    Is.append(a * self.w + (l - 1))
                    Js.append(b * self.w + (q - 1))
            self.pos_I.append(np.array(Is, dtype=int))
            self.pos_J.append(np.array(Js, dtype=int))

        t = np.arange(self.Lp)
        self.mult = np.minimum.reduce(
            [t + 1, np.full_like(t, self.s), np.full_like(t, self.h), self.Lp - t]
        ).astype(float)

        self._pair_arrays = self._build_pair_arrays()
        self._phi_factor = None

    # -- linear plumbing --------------------------------------------------------

    def hankel(self, yhat: np.ndarray) -> np.ndarray:
        out = np.empty((self.rows, self.h))
        for a in range(self.s):
            out[a * self.wp:(a + 1) * self.wp, :] = yhat[a:a + self.h].T
        return out

    def hankel_adjoint(self, Mat: np.ndarray) -> np.ndarray:
        acc = np.zeros((self.Lp, self.wp))
        for a in range(self.s):
            acc[a:a + self.h] += Mat[a * self.wp:(a + 1) * self.wp, :].T
        return acc

    def assemble_theta(self, values: np.ndarray) -> np.ndarray:
        T4 = np.zeros((self.s * self.w, self.p, self.s * self.w, self.m))
        for pid in range(self.pmap.n_params):
            if len(self.pos_I[pid]):
                T4[self.pos_I[pid], :, self.pos_J[pid], :] = values[pid]
        return T4.reshape(self.rows, self.s * self.wm)

    def _build_pair_arrays(self):
        """All ordered pairs of parameter positions, for the weighted Gram."""
        key = (self.R, self.s)
        if key in _PHI_PAIR_CACHE:
            return _PHI_PAIR_CACHE[key]
        cs, Is, Js = [], [], []
        for pid in range(self.pmap.n_params):
            for I, J in zip(self.pos_I[pid], self.pos_J[pid]):
                cs.append(pid)
                Is.append(int(I))
                Js.append(int(J))
        cs = np.array(cs, dtype=int)
        Is = np.array(Is, dtype=int)
        Js = np.array(Js, dtype=int)
        npos = len(cs)
        a_idx, b_idx = np.meshgrid(np.arange(npos), np.arange(npos), indexing="ij")
        a_idx = a_idx.ravel()
        b_idx = b_idx.ravel()
        arrays = (
            cs[a_idx], Is[a_idx], Js[a_idx],
            cs[b_idx], Is[b_idx], Js[b_idx],
        )
        _PHI_PAIR_CACHE[key] = arrays
        return arrays

    def prepare_phi_gram(self, Omega_L: np.ndarray | None, Omega_Ru: np.ndarray):
        """Cholesky of the weighted design Gram; Omega_L = W_L^2 (or None for
        identity) and Omega_Ru = U W_R^2 U^T, both fixed within a pass."""
        P, p, m = self.pmap.n_params, self.p, self.m
        sw = self.s * self.w
        if Omega_L is None:
            Omega_L = np.eye(self.rows)
        OL4 = Omega_L.reshape(sw, p, sw, p)
        OR4 = Omega_Ru.reshape(sw, m, sw, m)
        c1, I1, J1, c2, I2, J2 = self._pair_arrays
        G6 = np.zeros((P, P, p, m, p, m))
        chunk = 200_000
        for lo in range(0, len(c1), chunk):
            sl = slice(lo, lo + chunk)
            OLb = OL4[I1[sl], :, I2[sl], :]          # (k, p, p)
            ORb = OR4[J1[sl], :, J2[sl], :]          # (k, m, m)
            contrib = np.einsum("kax,kiy->kaixy", OLb, ORb)
            np.add.at(G6, (c1[sl], c2[sl]), contrib)
        Gram = G6.transpose(0, 2, 3, 1, 4, 5).reshape(self.nphi, self.nphi)
        ridge = 1e-12 * max(np.trace(Gram) / self.nphi, 1e-30)
        self._phi_factor = scipy.linalg.cho_factor(Gram + ridge * np.eye(self.nphi))

    def solve_phi(self, C_mat: np.ndarray) -> np.ndarray:
        """argmin_phi of the weighted quadratic whose right-hand side is the
        gathered correlation matrix C_mat = (W_L target W_R^2 ... ) U^T."""
        P, p, m = self.pmap.n_params, self.p, self.m
        sw = self.s * self.w
        C4 = C_mat.reshape(sw, p, sw, m)
        rhs = np.zeros((P, p, m))
        for pid in range(P):
            if len(self.pos_I[pid]):
                rhs[pid] = C4[self.pos_I[pid], :, self.pos_J[pid], :].sum(axis=0)
        x = scipy.linalg.cho_solve(self._phi_factor, rhs.reshape(self.nphi))
        return x.reshape(P, p, m)

    # -- yhat step: preconditioned CG on the weighted normal equations ----------

    def yhat_step(
        self, yhat: np.ndarray, target_w: np.ndarray, ThetaU: np.ndarray,
        mu: float, W_L: np.ndarray | None, W_R: _RightWeight,
        Omega_L: np.ndarray | None, cg_iters: int = 4,
    ) -> np.ndarray:
        """Decrease ||yhat - y||^2 + mu/2 ||W_L(Hank(yhat) - ThetaU)W_R - target_w||^2
        by warm-started preconditioned conjugate gradients (exact quadratic)."""

        def weighted(Mat):
            out = Mat if W_L is None else W_L @ Mat
            return W_R.right_apply(out)

        def weighted_sq(Mat):
            out = Mat if Omega_L is None else Omega_L @ Mat
            return W_R.right_apply_sq(out)

        def normal_apply(v):
            Yv = self.hankel(v)
            return 2.0 * v + mu * self.hankel_adjoint(weighted_sq(Yv))

        b = 2.0 * self.y + mu * self.hankel_adjoint(
            weighted(target_w) + weighted_sq(ThetaU)
        )
        # Jacobi preconditioner from the exact diagonal of the normal operator
        dL = np.ones(self.wp * self.s) if Omega_L is None else np.diag(Omega_L)
        dR = W_R.diag_sq()
        diag = 2.0 + mu * np.zeros((self.Lp, self.wp))
        dL4 = dL.reshape(self.s, self.wp)
        for a in range(self.s):
            seg = np.zeros((self.Lp, self.wp))
            seg[a:a + self.h] = np.outer(dR, dL4[a])
            diag = diag + mu * seg

        x = yhat.copy()
        r = b - normal_apply(x)
        z = r / diag
        pdir = z.copy()
        rz = float(np.sum(r * z))
        for _ in range(cg_iters):
            Ap = normal_apply(pdir)
            denom = float(np.sum(pdir * Ap))
            if denom <= 0:
                break
            alpha = rz / denom
            x = x + alpha * pdir
            r = r - alpha * Ap
            z = r / diag
            rz_new = float(np.sum(r * z))
            if rz_new < 1e-30:
                break
            pdir = z + (rz_new / rz) * pdir
            rz = rz_new
        return x


def _solve_structured(
    y_full: np.ndarray,
    U: np.ndarray,
    pmap: TwoLayerToeplitzParams,
    opts: EstimatorOptions,
    fit_data: bool,
):
    """Reweighted nuclear-norm loop; returns (values, yhat, info dict)."""
    sol = _Solver(y_full, U, pmap, opts, fit_data)
    P, p, m = pmap.n_params, pmap.p, pmap.m
    lam = sol.lam

    values = np.zeros((P, p, m))
    yhat = sol.y.copy()
    Yh = sol.hankel(yhat)
    Theta = sol.assemble_theta(values)
    ThetaU = Theta @ sol.U
    M = Yh - ThetaU

    W_L: np.ndarray | None = None
    Omega_L: np.ndarray | None = None
    W_R = _RightWeight(sol.h)
    UUt = sol.U @ sol.U.T

    def weighted(Mat):
        out = Mat if W_L is None else W_L @ Mat
        return W_R.right_apply(out)

    def true_objective(M_cur, yh):
        sv = fast_svd(weighted(M_cur))[1]
        nuc = float(np.sum(sv))
        data = float(np.sum((yh - sol.y) ** 2)) if fit_data else 0.0
        return data + lam * nuc, nuc, data

    trace: list[tuple] = []
    total_iters = 0
    last_converged = False
    prev_round_values = None

    for outer in range(opts.reweight_iters):
        # weighted Gram of the structured design, fixed within the pass
        Omega_Ru = UUt if W_R.identity else W_R.right_apply_sq(sol.U) @ sol.U.T
        sol.prepare_phi_gram(Omega_L, Omega_Ru)

        WMW = weighted(M)
        Z = WMW.copy()
        L1 = np.zeros_like(Z)
        sigma1_w = float(fast_svd(Z)[1][0]) if Z.size else 0.0
        if sigma1_w <= 0.0:
            sigma1_w = 1.0
        mu = opts.mu0 * lam / (0.05 * sigma1_w)
        prev_obj, _, _ = true_objective(M, yhat)
        inner_converged = False
        stable = 0
        best_round = (values.copy(), yhat.copy(), prev_obj, np.inf)
        z_nuc = float(np.sum(fast_svd(Z)[1]))
        Z_prev = Z.copy()

        def lagrangian(Z_c, M_c, yh_c, z_nuc_c):
            data_term = float(np.sum((yh_c - sol.y) ** 2)) if fit_data else 0.0
            WMW_c = weighted(M_c)
            return (
                data_term
                + lam * z_nuc_c
                + 0.5 * mu * float(np.sum((Z_c - WMW_c + L1) ** 2))
            )

        # the first pass only seeds the weights; a coarse solve suffices
        round_cap = min(opts.inner_iters, 160) if outer == 0 else opts.inner_iters
        for it in range(round_cap):
            total_iters += 1
            L_before = lagrangian(Z, M, yhat, z_nuc)

            # (i) singular-value soft-thresholding on the weighted auxiliary
            WMW = weighted(M)
            Uz, sz, Vzt = fast_svd(WMW - L1)
            shr = np.maximum(sz - lam / mu, 0.0)
            Z = (Uz * shr) @ Vzt
            z_nuc = float(np.sum(shr))

            # (ii) least-squares update of (phi, yhat) matching Z
            T_w = Z + L1
            C_mat = (weighted(Yh) - T_w)
            C_mat = (W_L @ C_mat if W_L is not None else C_mat)
            C_mat = W_R.right_apply(C_mat) @ sol.U.T
            values = sol.solve_phi(C_mat)
            Theta = sol.assemble_theta(values)
            ThetaU = Theta @ sol.U
            if fit_data:
                yhat = sol.yhat_step(yhat, T_w, ThetaU, mu, W_L, W_R, Omega_L)
                Yh = sol.hankel(yhat)
            M = Yh - ThetaU

            L_after = lagrangian(Z, M, yhat, z_nuc)
            if not np.isfinite(L_after):
                raise EstimationError("augmented Lagrangian diverged (non-finite)")
            if L_after > L_before * (1 + 1e-9) + 1e-12:
                raise AssertionError(
                    f"inner block solves increased the surrogate: "
                    f"{L_before} -> {L_after} at iteration {it}"
                )

            # dual ascent
            WMW = weighted(M)
            r1 = Z - WMW
            dual_move = float(np.linalg.norm(Z - Z_prev))
            Z_prev = Z.copy()
            L1 = L1 + r1

            primal_abs = float(np.linalg.norm(r1))
            primal = primal_abs / max(float(np.linalg.norm(WMW)), 1e-12)
            # the feasibility gap bounds the nuclear-norm error, so near
            # feasibility the auxiliary's nuclear norm is the cheap surrogate
            data_term = float(np.sum((yhat - sol.y) ** 2)) if fit_data else 0.0
            nuc = z_nuc if primal < 1e-3 else float(np.sum(fast_svd(WMW)[1]))
            obj = data_term + lam * nuc
            trace.append((outer, it, mu, data_term, nuc, obj, primal))
            if obj < best_round[2] and primal < max(3e-4, best_round[3]):
                best_round = (values.copy(), yhat.copy(), obj, primal)

            rel = abs(obj - prev_obj) / max(abs(prev_obj), 1e-12)
            prev_obj = obj
            if rel < opts.inner_tol and primal < 3e-4:
                stable += 1
                if stable >= 3:
                    inner_converged = True
                    break
            else:
                stable = 0
            # residual balancing
            if primal_abs > 10.0 * mu * dual_move and mu < 1e12:
                mu *= opts.mu_growth
                L1 /= opts.mu_growth
            elif mu * dual_move > 10.0 * primal_abs and mu > 1e-12:
                mu /= opts.mu_growth
                L1 *= opts.mu_growth

        if best_round[2] < prev_obj and best_round[3] < 1e-4:
            values, yhat = best_round[0], best_round[1]
            Yh = sol.hankel(yhat)
            Theta = sol.assemble_theta(values)
            ThetaU = Theta @ sol.U
            M = Yh - ThetaU
        last_converged = inner_converged

        if prev_round_values is not None:
            scale = max(float(np.max(np.abs(values))), 1e-12)
            if float(np.max(np.abs(values - prev_round_values))) < 1e-8 * scale:
                break
        prev_round_values = values.copy()
        if outer == opts.reweight_iters - 1:
            break

        # refresh weights from the current residual
        UL_basis, sigma, Vt = fast_svd(M)
        if sigma[0] <= 0.0:
            W_L = None
            Omega_L = None
            W_R = _RightWeight(sol.h)
            continue
        delta = opts.delta_factor * sigma[0]
        inv_l = 1.0 / np.sqrt(sigma**2 + delta**2)
        rows = M.shape[0]
        W_L = (UL_basis * (inv_l - 1.0 / delta)) @ UL_basis.T + np.eye(rows) / delta
        Omega_L = (UL_basis * (inv_l**2 - 1.0 / delta**2)) @ UL_basis.T + np.eye(rows) / delta**2
        W_R = _RightWeight(sol.h)
        W_R.set_from_svd(Vt.T, sigma, delta)

    _, nuc_final, data_final = true_objective(M, yhat)
    resid_rank, _ = rank_with_margin(M, 1e-8)
    info = {
        "iterations": total_iters,
        "converged": last_converged,
        "nuclear": nuc_final,
        "data": data_final,
        "residual_rank": resid_rank,
        "trace": tuple(trace),
    }
    return values, yhat, info


def estimate_markov(
    cluster: ClusterData,
    R: int,
    s: int,
    opts: EstimatorOptions | None = None,
    n_hint: int | None = None,
) -> MarkovEstimate:
    """Estimate the in-region Markov blocks of the lifted cluster from local data."""
    opts = opts or EstimatorOptions()
    if R != cluster.radius:
        raise ValueError(f"cluster has radius {cluster.radius}, estimator called with R={R}")
    p, m = cluster.p, cluster.m
    w = 2 * R + 1
    L = cluster.L
    h = opts.h if opts.h is not None else L - s + 1
    if h < 1 or L < s + h - 1:
        raise ValueError(f"cluster length {L} too short for s={s}, h={h}")

    warnings: list[str] = []
    if h <= w * p * s:
        warnings.append(
            f"h={h} is not larger than the stacked row count {w * p * s}; "
            "the residual cannot be column-rank deficient"
        )
    report = None
    if n_hint is not None:
        report = check_dimension_conditions(n_hint, p, m, R, s)
        warnings.extend(report.warnings)

    pmap = two_layer_param_map(R, s, p, m)
    Lp = h + s - 1
    y_used = np.asarray(cluster.y[:Lp], dtype=float)
    from .blocks import block_hankel

    U = block_hankel(cluster.u, s, h).matrix

    # trivial fixed point: no data at all
    if np.max(np.abs(y_used)) == 0.0 and np.max(np.abs(U)) == 0.0:
        values = np.zeros((pmap.n_params, p, m))
        theta = pmap.with_values(values)
        return MarkovEstimate(
            band=extract_markov_band(theta), theta=theta,
            residual_rank_surrogate=0.0, denoised_output_error=0.0,
            iterations=0, converged=True, residual_rank=0,
            warnings=tuple(warnings), dimension_report=report,
        )

    fit_data = not (opts.noise_free and opts.lam == 0.0)
    values, yhat, info = _solve_structured(y_used, U, pmap, opts, fit_data)
    theta = pmap.with_values(values)
    return MarkovEstimate(
        band=extract_markov_band(theta),
        theta=theta,
        residual_rank_surrogate=info["nuclear"],
        denoised_output_error=info["data"],
        iterations=info["iterations"],
        converged=info["converged"],
        residual_rank=info["residual_rank"],
        objective_trace=info["trace"],
        warnings=tuple(warnings),
        dimension_report=report,
    )


def markov_estimate_to_json(est: MarkovEstimate, path: str | Path | None = None) -> str:
    from .blocks import markov_band_to_json

    doc = {
        "band": json.loads(markov_band_to_json(est.band)),
        "residual_rank_surrogate": est.residual_rank_surrogate,
        "denoised_output_error": est.denoised_output_error,
        "iterations": est.iterations,
        "converged": est.converged,
        "residual_rank": est.residual_rank,
        "warnings": list(est.warnings),
        "theta": {
            "n_params": est.theta.n_params,
            "is_corner": est.theta.is_corner.tolist(),
            "values": None if est.theta.values is None else est.theta.values.tolist(),
        },
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def trace_to_csv(est: MarkovEstimate, path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["outer", "inner", "mu", "data_term", "nuclear_term", "objective", "primal_residual"]
        )
        for row in est.objective_trace:
            writer.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
