"""Homogeneous 1D network model: generation, simulation, clusters, noise.

A chain of N identical subsystems, each coupled to its left/right neighbour:

    x_i(k+1) = A x_i(k) + A_l x_{i-1}(k) + A_r x_{i+1}(k) + B u_i(k)
    y_i(k)   = C x_i(k) + e_i(k)

with the boundary subsystems missing the absent neighbour term.  Time is
1-based in the data convention: x(1) = x0 and y(k) is read out before the
state update, so with x0 = 0 the first output is pure noise and
y(2) = C B u(1) blockwise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .linalg import minimality_rank, spectral_radius

__all__ = [
    "SubsystemMatrices",
    "NetworkSpec",
    "Trajectory",
    "ClusterData",
    "LiftedModel",
    "random_network",
    "simulate",
    "add_noise_at_snr",
    "extract_cluster",
    "lift_cluster",
    "simulate_lifted",
    "white_noise_input",
    "random_subsystem",
    "network_spec_to_json",
    "network_spec_from_json",
    "trajectory_to_csv",
]


@dataclass(frozen=True)
class SubsystemMatrices:
    """The quintuple (A, A_l, A_r, B, C) of one subsystem."""

    A: np.ndarray
    A_l: np.ndarray
    A_r: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.A_l.shape != (n, n) or self.A_r.shape != (n, n):
            raise ValueError("A, A_l, A_r must all be n x n")
        if self.B.shape[0] != n or self.C.shape[1] != n:
            raise ValueError("B must be n x m and C must be p x n")


@dataclass(frozen=True)
class NetworkSpec:
    """A generated chain: subsystem matrices plus chain length and provenance."""

    subsystem: SubsystemMatrices
    N: int
    seed: int
    stability_margin: float

    def __post_init__(self):
        if self.N < 3:
            raise ValueError("N must be at least 3")
        if not 0.0 < self.stability_margin < 1.0:
            raise ValueError("stability_margin must lie in (0, 1)")


@dataclass(frozen=True)
class Trajectory:
    """Simulated network data over k = 1..L (row k-1 of each array)."""

    u: np.ndarray        # (L, N*m)
    y_clean: np.ndarray  # (L, N*p)
    y: np.ndarray        # (L, N*p)
    e: np.ndarray        # (L, N*p)
    x: np.ndarray        # (L, N*n) states, kept for oracle-mode cluster extraction
    spec: NetworkSpec

    @property
    def L(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class ClusterData:
    """Local input/output data of subsystems center-R .. center+R."""

    center: int
    radius: int
    u: np.ndarray              # (L, (2R+1)*m)
    y: np.ndarray              # (L, (2R+1)*p)
    y_clean: np.ndarray | None = None
    v: np.ndarray | None = None  # (L, 2n) oracle boundary states, when available
    m: int = 0
    p: int = 0

    @property
    def L(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class LiftedModel:
    """Cluster state-space matrices (A_R, B_R, C_R, D_R) for radius R."""

    A_R: np.ndarray
    B_R: np.ndarray
    C_R: np.ndarray
    D_R: np.ndarray
    R: int
    subsystem: SubsystemMatrices


def _global_A(sub: SubsystemMatrices, N: int, sparse: bool = False):
    """Block-tridiagonal global state matrix (A diag, A_l sub, A_r super)."""
    n = sub.n
    if sparse:
        eye = scipy.sparse.identity(N, format="csr")
        low = scipy.sparse.diags([np.ones(N - 1)], [-1], format="csr")
        upp = scipy.sparse.diags([np.ones(N - 1)], [1], format="csr")
        return (
            scipy.sparse.kron(eye, sub.A)
            + scipy.sparse.kron(low, sub.A_l)
            + scipy.sparse.kron(upp, sub.A_r)
        ).tocsr()
    A = np.zeros((N * n, N * n))
    for i in range(N):
        A[i * n:(i + 1) * n, i * n:(i + 1) * n] = sub.A
        if i > 0:
            A[i * n:(i + 1) * n, (i - 1) * n:i * n] = sub.A_l
        if i < N - 1:
            A[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = sub.A_r
    return A


def global_matrices(spec: NetworkSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense (global A, B, C); only sensible for small N*n (test oracle)."""
    sub = spec.subsystem
    A = _global_A(sub, spec.N)
    B = np.kron(np.eye(spec.N), sub.B)
    C = np.kron(np.eye(spec.N), sub.C)
    return A, B, C


def _global_spectral_radius(sub: SubsystemMatrices, N: int) -> float:
    n = sub.n
    if N * n <= 400:
        return spectral_radius(_global_A(sub, N))
    A = _global_A(sub, N, sparse=True)
    vals = scipy.sparse.linalg.eigs(A, k=1, which="LM", return_eigenvectors=False)
    return float(np.abs(vals[0]))


def _ctrb(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def _obsv(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


def random_network(
    n: int,
    m: int,
    p: int,
    N: int,
    seed: int,
    stability_margin: float = 0.95,
    minimality_radius: int = 1,
    max_retries: int = 50,
) -> NetworkSpec:
    """Draw a random stable chain whose subsystem satisfies all invariants.

    Gaussian entries are rescaled so the global block-tridiagonal state matrix
    has spectral radius exactly ``stability_margin``; candidates are rejected
    (and redrawn from the same seeded stream) until [A_l B] and [A_r B] have
    row rank n and both the subsystem triple and the lifted cluster triple for
    ``minimality_radius`` are minimal.
    """
    if min(n, m, p) < 1:
        raise ValueError("n, m, p must be positive")
    if N < 3:
        raise ValueError("N must be at least 3")
    if not 0.0 < stability_margin < 1.0:
        raise ValueError("stability_margin must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    last_failure = "no attempt made"
    for _ in range(max_retries):
        A = rng.standard_normal((n, n))
        A_l = rng.standard_normal((n, n))
        A_r = rng.standard_normal((n, n))
        B = rng.standard_normal((n, m))
        C = rng.standard_normal((p, n))

        sub = SubsystemMatrices(A, A_l, A_r, B, C)
        rho = _global_spectral_radius(sub, N)
        if rho <= 0.0:
            last_failure = "zero spectral radius"
            continue
        scale = stability_margin / rho
        sub = SubsystemMatrices(A * scale, A_l * scale, A_r * scale, B, C)

        if minimality_rank(np.hstack([sub.A_l, sub.B])) < n:
            last_failure = "[A_l B] row rank deficient"
            continue
        if minimality_rank(np.hstack([sub.A_r, sub.B])) < n:
            last_failure = "[A_r B] row rank deficient"
            continue
        if minimality_rank(_ctrb(sub.A, sub.B)) < n:
            last_failure = "(A, B) not controllable"
            continue
        if minimality_rank(_obsv(sub.A, sub.C)) < n:
            last_failure = "(A, C) not observable"
            continue
        lifted = lift_cluster_matrices(sub, minimality_radius)
        nl = (2 * minimality_radius + 1) * n
        if minimality_rank(_ctrb(lifted.A_R, lifted.B_R)) < nl:
            last_failure = "lifted pair not controllable"
            continue
        if minimality_rank(_obsv(lifted.A_R, lifted.C_R)) < nl:
            last_failure = "lifted pair not observable"
            continue
        return NetworkSpec(sub, N, seed, stability_margin)

    raise RuntimeError(
        f"random_network exhausted {max_retries} retries; last failure: {last_failure}"
    )


def white_noise_input(spec: NetworkSpec, L: int, seed: int) -> np.ndarray:
    """Unit-variance Gaussian input, shape (L, N*m)."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((L, spec.N * spec.subsystem.m))


def random_subsystem(n: int, m: int, p: int, seed: int, coupling_norm: float = 0.3) -> SubsystemMatrices:
    """Unit-scaled generic matrices for structural checks: the three state
    blocks are rescaled to a common spectral norm so matrix powers stay O(1)
    and absolute tolerances are meaningful."""
    rng = np.random.default_rng(seed)

    def unit(mat: np.ndarray, target: float) -> np.ndarray:
        sv = np.linalg.svd(mat, compute_uv=False)
        return mat * (target / sv[0])

    A = unit(rng.standard_normal((n, n)), coupling_norm)
    A_l = unit(rng.standard_normal((n, n)), coupling_norm)
    A_r = unit(rng.standard_normal((n, n)), coupling_norm)
    B = unit(rng.standard_normal((n, m)), 1.0)
    C = unit(rng.standard_normal((p, n)), 1.0)
    return SubsystemMatrices(A, A_l, A_r, B, C)


def simulate(spec: NetworkSpec, u: np.ndarray, x0: np.ndarray | None, L: int) -> Trajectory:
    """Noise-free simulation exploiting the tridiagonal coupling, O(N n^2)/step."""
    sub = spec.subsystem
    N, n, m, p = spec.N, sub.n, sub.m, sub.p
    u = np.asarray(u, dtype=float)
    if u.shape != (L, N * m):
        raise ValueError(f"u must have shape ({L}, {N * m}), got {u.shape}")
    if x0 is None:
        x0 = np.zeros(N * n)
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (N * n,):
        raise ValueError(f"x0 must have length {N * n}")

    X = x0.reshape(N, n).copy()
    xs = np.empty((L, N, n))
    ys = np.empty((L, N, p))
    U = u.reshape(L, N, m)
    Ct, At, Alt, Art, Bt = sub.C.T, sub.A.T, sub.A_l.T, sub.A_r.T, sub.B.T
    for k in range(L):
        xs[k] = X
        ys[k] = X @ Ct
        Xn = X @ At + U[k] @ Bt
        Xn[1:] += X[:-1] @ Alt   # left-neighbour coupling
        Xn[:-1] += X[1:] @ Art   # right-neighbour coupling
        X = Xn

    y_clean = ys.reshape(L, N * p)
    zeros = np.zeros_like(y_clean)
    return Trajectory(
        u=u, y_clean=y_clean, y=y_clean.copy(), e=zeros, x=xs.reshape(L, N * n), spec=spec
    )


def add_noise_at_snr(traj: Trajectory, snr_db: float, seed: int) -> Trajectory:
    """White Gaussian measurement noise scaled per subsystem to hit ``snr_db`` exactly.

    SNR per subsystem is 10*log10(var(clean output)/var(noise)), with empirical
    variances, so the realized ratio matches snr_db by construction.
    """
    spec = traj.spec
    N, p = spec.N, spec.subsystem.p
    L = traj.L
    yc = traj.y_clean.reshape(L, N, p)
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((L, N, p))

    var_clean = yc.var(axis=(0, 2))
    if np.any(var_clean <= 0.0):
        raise ValueError("clean output of some subsystem has zero variance; SNR undefined")
    var_noise_raw = e.var(axis=(0, 2))
    target_var = var_clean / (10.0 ** (snr_db / 10.0))
    e *= np.sqrt(target_var / var_noise_raw)[None, :, None]

    e = e.reshape(L, N * p)
    return Trajectory(
        u=traj.u, y_clean=traj.y_clean, y=traj.y_clean + e, e=e, x=traj.x, spec=spec
    )


def measured_snr_db(traj: Trajectory) -> np.ndarray:
    """Empirical per-subsystem SNR of a noisy trajectory, in dB."""
    spec = traj.spec
    N, p = spec.N, spec.subsystem.p
    yc = traj.y_clean.reshape(traj.L, N, p)
    e = traj.e.reshape(traj.L, N, p)
    return 10.0 * np.log10(yc.var(axis=(0, 2)) / e.var(axis=(0, 2)))


def extract_cluster(traj: Trajectory, center: int, radius: int) -> ClusterData:
    """Stacked block rows center-R..center+R of u and y (1-based center index).

    When the trajectory carries states (it always does for simulated data) the
    boundary-neighbour sequence v(k) = (x_{center-R-1}(k), x_{center+R+1}(k))
    is attached for oracle-mode consistency checks; it is None at the ends of
    the chain where a boundary neighbour does not exist.
    """
    spec = traj.spec
    sub = spec.subsystem
    N, n, m, p = spec.N, sub.n, sub.m, sub.p
    lo, hi = center - radius, center + radius
    if lo < 1 or hi > N:
        raise ValueError(f"cluster [{lo}, {hi}] out of range for N={N}")

    L = traj.L
    u = traj.u.reshape(L, N, m)[:, lo - 1:hi, :].reshape(L, -1)
    y = traj.y.reshape(L, N, p)[:, lo - 1:hi, :].reshape(L, -1)
    yc = traj.y_clean.reshape(L, N, p)[:, lo - 1:hi, :].reshape(L, -1)

    v = None
    if lo - 1 >= 1 and hi + 1 <= N:
        xs = traj.x.reshape(L, N, n)
        v = np.concatenate([xs[:, lo - 2, :], xs[:, hi, :]], axis=1)

    return ClusterData(
        center=center, radius=radius, u=u.copy(), y=y.copy(), y_clean=yc.copy(), v=v, m=m, p=p
    )


def lift_cluster_matrices(sub: SubsystemMatrices, radius: int) -> LiftedModel:
    """(A_R, B_R, C_R, D_R) of the lifted cluster model for the given radius."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    w = 2 * radius + 1
    n, m, p = sub.n, sub.m, sub.p
    A_R = np.kron(np.eye(w), sub.A)
    if w > 1:
        A_R += np.kron(np.diag(np.ones(w - 1), -1), sub.A_l)
        A_R += np.kron(np.diag(np.ones(w - 1), 1), sub.A_r)
    B_R = np.kron(np.eye(w), sub.B)
    C_R = np.kron(np.eye(w), sub.C)
    D_R = np.zeros((w * n, 2 * n))
    D_R[:n, :n] = sub.A_l
    D_R[(w - 1) * n:, n:] = sub.A_r
    return LiftedModel(A_R=A_R, B_R=B_R, C_R=C_R, D_R=D_R, R=radius, subsystem=sub)


def lift_cluster(spec: NetworkSpec, radius: int) -> LiftedModel:
    return lift_cluster_matrices(spec.subsystem, radius)


def simulate_lifted(
    lifted: LiftedModel, u: np.ndarray, v: np.ndarray, x0: np.ndarray | None = None
) -> np.ndarray:
    """Noise-free outputs of the cluster model driven by local inputs and
    the (oracle) boundary-neighbour sequence v."""
    w = 2 * lifted.R + 1
    n = lifted.subsystem.n
    L = u.shape[0]
    if v.shape != (L, 2 * n):
        raise ValueError(f"v must have shape ({L}, {2 * n})")
    x = np.zeros(w * n) if x0 is None else np.asarray(x0, dtype=float).ravel()
    ys = np.empty((L, lifted.C_R.shape[0]))
    for k in range(L):
        ys[k] = lifted.C_R @ x
        x = lifted.A_R @ x + lifted.B_R @ u[k] + lifted.D_R @ v[k]
    return ys


# -- serialization ------------------------------------------------------------


def network_spec_to_json(spec: NetworkSpec, path: str | Path | None = None) -> str:
    sub = spec.subsystem
    doc = {
        "n": sub.n,
        "m": sub.m,
        "p": sub.p,
        "N": spec.N,
        "seed": spec.seed,
        "stability_margin": spec.stability_margin,
        "A": sub.A.tolist(),
        "A_l": sub.A_l.tolist(),
        "A_r": sub.A_r.tolist(),
        "B": sub.B.tolist(),
        "C": sub.C.tolist(),
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def network_spec_from_json(source: str | Path) -> NetworkSpec:
    text = Path(source).read_text(encoding="utf-8") if Path(str(source)).exists() else str(source)
    doc = json.loads(text)
    sub = SubsystemMatrices(
        A=np.array(doc["A"], dtype=float),
        A_l=np.array(doc["A_l"], dtype=float),
        A_r=np.array(doc["A_r"], dtype=float),
        B=np.array(doc["B"], dtype=float),
        C=np.array(doc["C"], dtype=float),
    )
    return NetworkSpec(
        subsystem=sub,
        N=int(doc["N"]),
        seed=int(doc["seed"]),
        stability_margin=float(doc["stability_margin"]),
    )


def trajectory_to_csv(traj: Trajectory, path: str | Path) -> None:
    """One row per (k, subsystem, channel); u blank for channels >= m and
    y columns blank for channels >= p."""
    spec = traj.spec
    N, m, p = spec.N, spec.subsystem.m, spec.subsystem.p
    L = traj.L
    u = traj.u.reshape(L, N, m)
    yc = traj.y_clean.reshape(L, N, p)
    y = traj.y.reshape(L, N, p)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "subsystem", "channel", "u", "y_clean", "y"])
        for k in range(L):
            for i in range(N):
                for c in range(max(m, p)):
                    row = [k + 1, i + 1, c + 1]
                    row.append(repr(float(u[k, i, c])) if c < m else "")
                    if c < p:
                        row.extend([repr(float(yc[k, i, c])), repr(float(y[k, i, c]))])
                    else:
                        row.extend(["", ""])
                    writer.writerow(row)
