"""Structured-matrix machinery for the lifted cluster model.

Everything here is deterministic block bookkeeping:

* block Hankel builders for the stacked data equation;
* the banded / partially-Toeplitz structure of the cluster Markov matrices
  M_j = C_R A_R^j B_R, exposed as an indexed parameterization whose in-band
  diagonals are the identifiable Markov blocks F_{j,k};
* the trinomial band recursion behind F_{j,k}, W_{j,l}, E_{j,l}: these are
  the coefficients of the non-commutative expansion of
  (A_l 'left' + A 'stay' + A_r 'right')^j, indexed by net spatial shift;
* layered time-varying observability/controllability matrices and the block
  matrix H they multiply out to;
* the 0/1 block-incidence affine operator mapping X = W_stack E_stack to H.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse

from .network import LiftedModel, SubsystemMatrices

__all__ = [
    "BlockHankel",
    "TwoLayerToeplitzParams",
    "MarkovBand",
    "TVObservability",
    "TVControllability",
    "WESequences",
    "AffineOperator",
    "block_hankel",
    "markov_oracle",
    "shift_coeffs",
    "two_layer_param_map",
    "params_from_markov_matrices",
    "assemble_theta",
    "extract_markov_band",
    "markov_band_oracle",
    "build_G",
    "build_Gamma",
    "tv_observability",
    "tv_controllability",
    "observability_row_range",
    "we_sequences",
    "build_H",
    "build_affine_operator",
    "toeplitz_from_impulse",
    "markov_band_to_json",
    "markov_band_from_json",
]


# -- block Hankel -------------------------------------------------------------


@dataclass(frozen=True)
class BlockHankel:
    matrix: np.ndarray
    rows_per_block: int
    cols_per_block: int
    s: int
    h: int


def block_hankel(seq: np.ndarray, s: int, h: int, start: int = 0) -> BlockHankel:
    """Block Hankel with block (a, b) = seq[start + a + b] as a column block."""
    seq = np.asarray(seq, dtype=float)
    if seq.ndim == 1:
        seq = seq[:, None]
    T, d = seq.shape
    if start < 0 or start + s + h - 1 > T:
        raise ValueError(
            f"sequence of length {T} too short for s={s}, h={h}, start={start}"
        )
    mat = np.empty((s * d, h))
    for a in range(s):
        mat[a * d:(a + 1) * d, :] = seq[start + a:start + a + h].T
    hk = BlockHankel(matrix=mat, rows_per_block=d, cols_per_block=1, s=s, h=h)
    # anti-diagonal block constancy, cheap shifted-slice check
    for a in range(1, s):
        assert np.array_equal(
            mat[a * d:(a + 1) * d, : h - 1], mat[(a - 1) * d:a * d, 1:]
        ), "Hankel anti-diagonal constancy violated"
    return hk


def hankel_matrix(seq: np.ndarray, s: int, h: int, start: int = 0) -> np.ndarray:
    return block_hankel(seq, s, h, start).matrix


# -- Markov matrices of the lifted model --------------------------------------


def markov_oracle(lifted: LiftedModel, j: int) -> np.ndarray:
    """C_R A_R^j B_R by direct multiplication; the brute-force oracle."""
    if j < 0:
        raise ValueError("moment must be nonnegative")
    return lifted.C_R @ np.linalg.matrix_power(lifted.A_R, j) @ lifted.B_R


def shift_coeffs(sub: SubsystemMatrices, jmax: int) -> list[dict[int, np.ndarray]]:
    """Coefficients c_j[d] of the ordered trinomial expansion.

    c_j[d] sums, over all length-j words in {A_l, A, A_r} whose net spatial
    shift is d (A_l: -1, A: 0, A_r: +1), the ordered matrix products.  Then
    F_{j,k} = C c_j[k] B, W_{j,l} = C c_j[l] and E_{j,l} = c_j[l] B.
    """
    n = sub.n
    coeffs: list[dict[int, np.ndarray]] = [{0: np.eye(n)}]
    for _ in range(jmax):
        prev = coeffs[-1]
        nxt: dict[int, np.ndarray] = {}
        for d, M in prev.items():
            for shift, fac in ((-1, sub.A_l), (0, sub.A), (1, sub.A_r)):
                key = d + shift
                if key in nxt:
                    nxt[key] = nxt[key] + M @ fac
                else:
                    nxt[key] = M @ fac
        coeffs.append(nxt)
    return coeffs


# -- two-layer Toeplitz parameterization --------------------------------------


def _in_region(j: int, l: int, q: int, R: int) -> bool:
    """Partial-Toeplitz region of moment j (1-based block indices l, q)."""
    return j + 1 <= l + q <= 4 * R + 3 - j


@dataclass(frozen=True)
class TwoLayerToeplitzParams:
    """Free parameter blocks of the structured Toeplitz matrix and their index map.

    Every in-band block position (j, l, q) maps either to the shared band
    parameter of diagonal k = q - l (inside the partial-Toeplitz region) or to
    a corner parameter owned by that single position.  Corner parameters are
    not identifiable and are never reported as Markov blocks.
    """

    R: int
    s: int
    p: int
    m: int
    n_params: int
    band_ids: dict  # (j, k) -> param id
    corner_ids: dict  # (j, l, q) -> param id, 1-based l, q
    positions: tuple  # param id -> tuple of (j, l, q)
    is_corner: np.ndarray
    values: np.ndarray | None = None

    def index_of(self, j: int, l: int, q: int) -> int | None:
        """Param id at block (l, q) of moment j, or None for a structural zero."""
        if abs(l - q) > j:
            return None
        if _in_region(j, l, q, self.R):
            return self.band_ids[(j, q - l)]
        return self.corner_ids[(j, l, q)]

    def with_values(self, values: np.ndarray) -> "TwoLayerToeplitzParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_params, self.p, self.m):
            raise ValueError(f"values must have shape {(self.n_params, self.p, self.m)}")
        return TwoLayerToeplitzParams(
            R=self.R, s=self.s, p=self.p, m=self.m, n_params=self.n_params,
            band_ids=self.band_ids, corner_ids=self.corner_ids,
            positions=self.positions, is_corner=self.is_corner, values=values,
        )


def two_layer_param_map(R: int, s: int, p: int, m: int) -> TwoLayerToeplitzParams:
    """Index map of the free blocks of the structured Toeplitz matrix."""
    if s < 2 or R < 0:
        raise ValueError("need s >= 2 and R >= 0")
    w = 2 * R + 1
    band_ids: dict = {}
    corner_ids: dict = {}
    positions: list[list] = []
    is_corner: list[bool] = []
    for j in range(s - 1):
        for l in range(1, w + 1):
            for q in range(max(1, l - j), min(w, l + j) + 1):
                if _in_region(j, l, q, R):
                    key = (j, q - l)
                    if key not in band_ids:
                        band_ids[key] = len(positions)
                        positions.append([])
                        is_corner.append(False)
                    positions[band_ids[key]].append((j, l, q))
                else:
                    corner_ids[(j, l, q)] = len(positions)
                    positions.append([(j, l, q)])
                    is_corner.append(True)
    return TwoLayerToeplitzParams(
        R=R, s=s, p=p, m=m, n_params=len(positions),
        band_ids=band_ids, corner_ids=corner_ids,
        positions=tuple(tuple(pos) for pos in positions),
        is_corner=np.array(is_corner, dtype=bool),
    )


def params_from_markov_matrices(
    pmap: TwoLayerToeplitzParams, markov: list[np.ndarray]
) -> TwoLayerToeplitzParams:
    """Populate the parameter blocks from dense M_0 .. M_{s-2} matrices."""
    if len(markov) < pmap.s - 1:
        raise ValueError(f"need {pmap.s - 1} Markov matrices, got {len(markov)}")
    p, m = pmap.p, pmap.m
    values = np.zeros((pmap.n_params, p, m))
    for pid, pos in enumerate(pmap.positions):
        j, l, q = pos[0]
        values[pid] = markov[j][(l - 1) * p:l * p, (q - 1) * m:q * m]
    return pmap.with_values(values)


def assemble_markov_matrix(pmap: TwoLayerToeplitzParams, j: int) -> np.ndarray:
    """Dense M_j from the populated parameter blocks."""
    if pmap.values is None:
        raise ValueError("parameter values not populated")
    w = 2 * pmap.R + 1
    p, m = pmap.p, pmap.m
    M = np.zeros((w * p, w * m))
    for l in range(1, w + 1):
        for q in range(max(1, l - j), min(w, l + j) + 1):
            pid = pmap.index_of(j, l, q)
            M[(l - 1) * p:l * p, (q - 1) * m:q * m] = pmap.values[pid]
    return M


def toeplitz_from_impulse(blocks: list[np.ndarray], s: int) -> np.ndarray:
    """Strictly-lower block Toeplitz with blocks[j] on the (j+1)-th subdiagonal.

    The zero diagonal encodes the one-step output delay of the state-space
    model (no direct feedthrough)."""
    if not blocks:
        raise ValueError("need at least one impulse block")
    bp, bm = blocks[0].shape
    T = np.zeros((s * bp, s * bm))
    for a in range(s):
        for b in range(a):
            j = a - b - 1
            if j < len(blocks):
                T[a * bp:(a + 1) * bp, b * bm:(b + 1) * bm] = blocks[j]
    return T


def assemble_theta(pmap: TwoLayerToeplitzParams) -> np.ndarray:
    """Dense structured Toeplitz matrix from populated parameters."""
    Ms = [assemble_markov_matrix(pmap, j) for j in range(pmap.s - 1)]
    return toeplitz_from_impulse(Ms, pmap.s)


def theta_membership(pmap: TwoLayerToeplitzParams, T: np.ndarray, tol: float = 1e-9) -> bool:
    """True iff T lies in the two-layer structured set (up to tol, scaled)."""
    w = 2 * pmap.R + 1
    p, m, s = pmap.p, pmap.m, pmap.s
    if T.shape != (s * w * p, s * w * m):
        return False
    scale = max(np.max(np.abs(T)), 1.0)
    # read parameters off the first occurrence, then rebuild and compare
    values = np.zeros((pmap.n_params, p, m))
    for pid, pos in enumerate(pmap.positions):
        j, l, q = pos[0]
        a, b = j + 1, 0
        rows = slice(a * w * p + (l - 1) * p, a * w * p + l * p)
        cols = slice(b * w * m + (q - 1) * m, b * w * m + q * m)
        values[pid] = T[rows, cols]
    rebuilt = assemble_theta(pmap.with_values(values))
    return bool(np.max(np.abs(rebuilt - T)) <= tol * scale)


# -- Markov band ---------------------------------------------------------------


@dataclass(frozen=True)
class MarkovBand:
    """The identifiable Markov blocks F_{j,k}, j = 0..s-2, k = -j..j."""

    s: int
    p: int
    m: int
    blocks: dict  # (j, k) -> (p, m) array

    def __post_init__(self):
        expected = (self.s - 1) ** 2
        if len(self.blocks) != expected:
            raise ValueError(f"expected {expected} blocks, got {len(self.blocks)}")

    def F(self, j: int, k: int) -> np.ndarray:
        return self.blocks[(j, k)]


def extract_markov_band(pmap: TwoLayerToeplitzParams) -> MarkovBand:
    """Read F_{j,k} off the in-region band parameters."""
    if pmap.values is None:
        raise ValueError("parameter values not populated")
    if pmap.s - 2 >= 2 * pmap.R + 1:
        raise ValueError(
            f"moments up to {pmap.s - 2} leave the partial-Toeplitz region for R={pmap.R}"
        )
    blocks = {}
    for j in range(pmap.s - 1):
        for k in range(-j, j + 1):
            if (j, k) not in pmap.band_ids:
                raise ValueError(f"band diagonal (j={j}, k={k}) has no in-region position")
            blocks[(j, k)] = pmap.values[pmap.band_ids[(j, k)]].copy()
    return MarkovBand(s=pmap.s, p=pmap.p, m=pmap.m, blocks=blocks)


def markov_band_oracle(sub: SubsystemMatrices, s: int) -> MarkovBand:
    """Ground-truth band F_{j,k} = C c_j[k] B from the shift-coefficient recursion."""
    coeffs = shift_coeffs(sub, s - 2)
    blocks = {}
    for j in range(s - 1):
        for k in range(-j, j + 1):
            blocks[(j, k)] = sub.C @ coeffs[j][k] @ sub.B
    return MarkovBand(s=s, p=sub.p, m=sub.m, blocks=blocks)


def markov_band_to_json(band: MarkovBand, path: str | Path | None = None) -> str:
    doc = {
        "s": band.s,
        "p": band.p,
        "m": band.m,
        "blocks": [
            {"j": j, "k": k, "value": band.blocks[(j, k)].tolist()}
            for j in range(band.s - 1)
            for k in range(-j, j + 1)
        ],
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def markov_band_from_json(source: str | Path) -> MarkovBand:
    text = Path(source).read_text(encoding="utf-8") if Path(str(source)).exists() else str(source)
    doc = json.loads(text)
    blocks = {
        (int(e["j"]), int(e["k"])): np.array(e["value"], dtype=float)
        for e in doc["blocks"]
    }
    return MarkovBand(s=int(doc["s"]), p=int(doc["p"]), m=int(doc["m"]), blocks=blocks)


# -- banded shift factors and layered observability/controllability -----------


def build_G(j: int, A_l: np.ndarray, A: np.ndarray, A_r: np.ndarray) -> np.ndarray:
    """j x (j+2) block Toeplitz with [A_l A A_r] sliding along each block row."""
    if j < 1:
        raise ValueError("j must be at least 1")
    n = A.shape[0]
    G = np.zeros((j * n, (j + 2) * n))
    for r in range(j):
        G[r * n:(r + 1) * n, r * n:(r + 1) * n] = A_l
        G[r * n:(r + 1) * n, (r + 1) * n:(r + 2) * n] = A
        G[r * n:(r + 1) * n, (r + 2) * n:(r + 3) * n] = A_r
    return G


def build_Gamma(j: int, A_l: np.ndarray, A: np.ndarray, A_r: np.ndarray) -> np.ndarray:
    """(j+2) x j block Toeplitz, [A_r; A; A_l] sliding down each block column."""
    if j < 1:
        raise ValueError("j must be at least 1")
    n = A.shape[0]
    Gm = np.zeros(((j + 2) * n, j * n))
    for c in range(j):
        Gm[c * n:(c + 1) * n, c * n:(c + 1) * n] = A_r
        Gm[(c + 1) * n:(c + 2) * n, c * n:(c + 1) * n] = A
        Gm[(c + 2) * n:(c + 3) * n, c * n:(c + 1) * n] = A_l
    return Gm


@dataclass(frozen=True)
class TVObservability:
    j: int
    k: int
    matrix: np.ndarray
    layer_row_offsets: tuple  # scalar row offset of each layer, plus total
    p: int
    n: int


@dataclass(frozen=True)
class TVControllability:
    j: int
    k: int
    matrix: np.ndarray
    layer_col_offsets: tuple
    m: int
    n: int


def _check_layer_count(j: int, k: int) -> None:
    if k < 1:
        raise ValueError("layer count k must be at least 1")
    if j <= 2 * (k - 1):
        raise ValueError(f"need spatial width j > 2(k-1); got j={j}, k={k}")


def assemble_observability(
    j: int, layers: range, W: dict, p: int, n: int
) -> tuple[np.ndarray, tuple]:
    """Stack observability layers; layer a places W_{a, q-r-a} at block (r, q)."""
    heights = [(j - 2 * a) * p for a in layers]
    offsets = np.concatenate([[0], np.cumsum(heights)])
    mat = np.zeros((int(offsets[-1]), j * n))
    for li, a in enumerate(layers):
        base = int(offsets[li])
        for r in range(j - 2 * a):
            for l in range(-a, a + 1):
                q = r + a + l
                if 0 <= q < j:
                    mat[base + r * p:base + (r + 1) * p, q * n:(q + 1) * n] = W[(a, l)]
    return mat, tuple(int(o) for o in offsets)


def assemble_controllability(
    j: int, layers: range, E: dict, m: int, n: int
) -> tuple[np.ndarray, tuple]:
    """Concatenate controllability layers; layer b places E_{b, q+b-r} at block (r, q)."""
    widths = [(j - 2 * b) * m for b in layers]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    mat = np.zeros((j * n, int(offsets[-1])))
    for li, b in enumerate(layers):
        base = int(offsets[li])
        for q in range(j - 2 * b):
            for l in range(-b, b + 1):
                r = q + b - l
                if 0 <= r < j:
                    mat[r * n:(r + 1) * n, base + q * m:base + (q + 1) * m] = E[(b, l)]
    return mat, tuple(int(o) for o in offsets)


def _w_blocks(sub: SubsystemMatrices, jmax: int) -> dict:
    coeffs = shift_coeffs(sub, jmax)
    return {(a, l): sub.C @ coeffs[a][l] for a in range(jmax + 1) for l in range(-a, a + 1)}


def _e_blocks(sub: SubsystemMatrices, jmax: int) -> dict:
    coeffs = shift_coeffs(sub, jmax)
    return {(a, l): coeffs[a][l] @ sub.B for a in range(jmax + 1) for l in range(-a, a + 1)}


def tv_observability(j: int, k: int, sub: SubsystemMatrices) -> TVObservability:
    _check_layer_count(j, k)
    W = _w_blocks(sub, k - 1)
    mat, offsets = assemble_observability(j, range(k), W, sub.p, sub.n)
    return TVObservability(j=j, k=k, matrix=mat, layer_row_offsets=offsets, p=sub.p, n=sub.n)


def tv_controllability(j: int, k: int, sub: SubsystemMatrices) -> TVControllability:
    _check_layer_count(j, k)
    E = _e_blocks(sub, k - 1)
    mat, offsets = assemble_controllability(j, range(k), E, sub.m, sub.n)
    return TVControllability(j=j, k=k, matrix=mat, layer_col_offsets=offsets, m=sub.m, n=sub.n)


def observability_row_range(j: int, k1: int, k2: int, W: dict, p: int, n: int) -> np.ndarray:
    """Stacked layers k1..k2 of the width-j observability matrix (inclusive)."""
    if not 0 <= k1 <= k2:
        raise ValueError("need 0 <= k1 <= k2")
    if j <= 2 * k2:
        raise ValueError(f"need j > 2*k2; got j={j}, k2={k2}")
    mat, _ = assemble_observability(j, range(k1, k2 + 1), W, p, n)
    return mat


# -- W/E sequences -------------------------------------------------------------


def stack_order(half: int) -> list[tuple[int, int]]:
    """Canonical block order (0,0), (1,-1), (1,0), (1,1), (2,-2), ..."""
    return [(a, l) for a in range(half) for l in range(-a, a + 1)]


@dataclass(frozen=True)
class WESequences:
    s: int
    W: dict  # (j, l) -> (p, n)
    E: dict  # (j, l) -> (n, m)
    W_stack: np.ndarray  # ((s/2)^2 p, n)
    E_stack: np.ndarray  # (n, (s/2)^2 m)
    order: tuple


def we_sequences(sub: SubsystemMatrices, s: int) -> WESequences:
    if s < 2 or s % 2 != 0:
        raise ValueError("s must be even and at least 2")
    half = s // 2
    coeffs = shift_coeffs(sub, half - 1)
    order = stack_order(half)
    W = {(a, l): sub.C @ coeffs[a][l] for a, l in order}
    E = {(a, l): coeffs[a][l] @ sub.B for a, l in order}
    W_stack = np.vstack([W[key] for key in order])
    E_stack = np.hstack([E[key] for key in order])
    return WESequences(s=s, W=W, E=E, W_stack=W_stack, E_stack=E_stack, order=tuple(order))


# -- the H matrix and its affine operator --------------------------------------


def _h_layout(R: int, s: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """(layer, within-layer index) label of every block row/column of H."""
    w = 2 * R + 1
    half = s // 2
    rows = [(a, r) for a in range(half) for r in range(w - 2 * a)]
    cols = [(b, q) for b in range(half) for q in range(w - 2 * b)]
    return rows, cols


def build_H(markov: MarkovBand, R: int, s: int) -> np.ndarray:
    """Block matrix with entry F_{a+b, (q+b)-(r+a)} at layered position (a,r;b,q)."""
    if s % 2 != 0:
        raise ValueError("s must be even")
    if markov.s < s:
        raise ValueError(f"band covers moments up to {markov.s - 2}, need {s - 2}")
    if s - 2 > 2 * R:
        raise ValueError("need s - 2 <= 2R so all referenced blocks are in-region")
    p, m = markov.p, markov.m
    rows, cols = _h_layout(R, s)
    H = np.zeros((len(rows) * p, len(cols) * m))
    for ri, (a, r) in enumerate(rows):
        for ci, (b, q) in enumerate(cols):
            d = (q + b) - (r + a)
            if abs(d) <= a + b:
                H[ri * p:(ri + 1) * p, ci * m:(ci + 1) * m] = markov.F(a + b, d)
    return H


@dataclass(frozen=True)
class AffineOperator:
    """Linear 0/1 block-incidence map from X = W_stack E_stack onto H.

    Built once per shape by symbolic multiplication: each block of X carries a
    distinct symbol (its (W index, E index) pair) and the layered product is
    expanded to record which X blocks sum into each H block.
    """

    R: int
    s: int
    p: int
    m: int
    X_shape: tuple
    H_shape: tuple
    n_w_blocks: int
    n_e_blocks: int
    # flat term arrays: output block (out_r, out_c) accumulates X block (w, e)
    out_r: np.ndarray
    out_c: np.ndarray
    w_ids: np.ndarray
    e_ids: np.ndarray
    n_out_rows: int
    n_out_cols: int
    # anti-diagonal groups: each X block belongs to exactly one group, and each
    # output block is a replica of exactly one group sum
    group_of_term: np.ndarray
    group_block_ids: tuple     # group -> (w ids, e ids) of its X blocks
    group_out_ids: tuple       # group -> (out_r ids, out_c ids) of its replicas
    # flat block-level views of the same partition (one entry per X block)
    blk_w: np.ndarray
    blk_e: np.ndarray
    blk_group: np.ndarray
    group_sizes: np.ndarray
    group_mult: np.ndarray     # replica count of each group among the outputs
    matrix: scipy.sparse.csr_matrix = field(repr=False)

    def _to_blocks(self, X: np.ndarray) -> np.ndarray:
        return X.reshape(self.n_w_blocks, self.p, self.n_e_blocks, self.m).swapaxes(1, 2)

    def _from_blocks(self, Xb: np.ndarray) -> np.ndarray:
        return Xb.swapaxes(1, 2).reshape(self.n_w_blocks * self.p, self.n_e_blocks * self.m)

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.shape != self.X_shape:
            raise ValueError(f"X must have shape {self.X_shape}")
        Xb = self._to_blocks(np.ascontiguousarray(X))
        Hb = np.zeros((self.n_out_rows, self.n_out_cols, self.p, self.m))
        np.add.at(Hb, (self.out_r, self.out_c), Xb[self.w_ids, self.e_ids])
        return Hb.swapaxes(1, 2).reshape(self.H_shape)

    def adjoint(self, Y: np.ndarray) -> np.ndarray:
        if Y.shape != self.H_shape:
            raise ValueError(f"Y must have shape {self.H_shape}")
        Yb = Y.reshape(self.n_out_rows, self.p, self.n_out_cols, self.m).swapaxes(1, 2)
        Xb = np.zeros((self.n_w_blocks, self.n_e_blocks, self.p, self.m))
        np.add.at(Xb, (self.w_ids, self.e_ids), Yb[self.out_r, self.out_c])
        return self._from_blocks(Xb)

    def lstsq(self, H: np.ndarray) -> np.ndarray:
        """Minimum-norm least-squares solution of apply(X) = H.

        The incidence decouples into anti-diagonal groups: every output block
        replicates one group sum, so the optimal sum is the replica mean and
        the minimum-norm spread divides it equally over the group's blocks.
        """
        if H.shape != self.H_shape:
            raise ValueError(f"H must have shape {self.H_shape}")
        Hb = H.reshape(self.n_out_rows, self.p, self.n_out_cols, self.m).swapaxes(1, 2)
        Xb = np.zeros((self.n_w_blocks, self.n_e_blocks, self.p, self.m))
        for (w_arr, e_arr), (or_arr, oc_arr) in zip(self.group_block_ids, self.group_out_ids):
            target = Hb[or_arr, oc_arr].mean(axis=0)
            Xb[w_arr, e_arr] = target / len(w_arr)
        return self._from_blocks(Xb)

    def operator_norm(self) -> float:
        """Largest singular value of the scalar-level map."""
        return float(scipy.sparse.linalg.svds(self.matrix.astype(float), k=1,
                                              return_singular_vectors=False)[0])


_AFFINE_CACHE: dict = {}


def build_affine_operator(
    R: int, s: int, p: int, m: int,
    n_rows_of_X: int | None = None, n_cols_of_X: int | None = None,
) -> AffineOperator:
    """Construct (and cache) the affine operator for the given shape."""
    key = (R, s, p, m)
    if key in _AFFINE_CACHE:
        op = _AFFINE_CACHE[key]
    else:
        op = _build_affine_operator(R, s, p, m)
        _AFFINE_CACHE[key] = op
    half = s // 2
    if n_rows_of_X is not None and n_rows_of_X != half * half * p:
        raise ValueError(f"X has {half * half * p} rows for s={s}, p={p}")
    if n_cols_of_X is not None and n_cols_of_X != half * half * m:
        raise ValueError(f"X has {half * half * m} columns for s={s}, m={m}")
    return op


def _build_affine_operator(R: int, s: int, p: int, m: int) -> AffineOperator:
    if s % 2 != 0 or s < 2:
        raise ValueError("s must be even and at least 2")
    if s - 2 > 2 * R:
        raise ValueError("need s - 2 <= 2R")
    half = s // 2
    order = stack_order(half)
    block_index = {key: i for i, key in enumerate(order)}
    rows, cols = _h_layout(R, s)

    out_r, out_c, w_ids, e_ids, group_keys = [], [], [], [], []
    for ri, (a, r) in enumerate(rows):
        for ci, (b, q) in enumerate(cols):
            d = (q + b) - (r + a)
            if abs(d) > a + b:
                continue
            for l in range(max(-a, d - b), min(a, d + b) + 1):
                out_r.append(ri)
                out_c.append(ci)
                w_ids.append(block_index[(a, l)])
                e_ids.append(block_index[(b, d - l)])
                group_keys.append((a, b, d))

    group_order = sorted(set(group_keys))
    group_index = {g: i for i, g in enumerate(group_order)}
    group_of_term = np.array([group_index[g] for g in group_keys], dtype=int)

    group_blocks: list[set] = [set() for _ in group_order]
    group_outs: list[set] = [set() for _ in group_order]
    for t in range(len(out_r)):
        g = group_of_term[t]
        group_blocks[g].add((w_ids[t], e_ids[t]))
        group_outs[g].add((out_r[t], out_c[t]))
    group_block_ids = tuple(
        (np.array([w for w, _ in sorted(bl)]), np.array([e for _, e in sorted(bl)]))
        for bl in group_blocks
    )
    group_out_ids = tuple(
        (np.array([r for r, _ in sorted(ou)]), np.array([c for _, c in sorted(ou)]))
        for ou in group_outs
    )
    blk_w, blk_e, blk_group = [], [], []
    for gi, (w_arr, e_arr) in enumerate(group_block_ids):
        blk_w.extend(w_arr.tolist())
        blk_e.extend(e_arr.tolist())
        blk_group.extend([gi] * len(w_arr))
    group_sizes = np.array([len(w) for w, _ in group_block_ids], dtype=int)
    group_mult = np.array([len(r) for r, _ in group_out_ids], dtype=int)

    n_w = len(order)
    X_shape = (n_w * p, n_w * m)
    H_shape = (len(rows) * p, len(cols) * m)

    # scalar-level sparse matrix: each block incidence contributes an identity
    # pattern between the p*m scalars of the two blocks
    rr, cc = [], []
    pm = p * m
    cell = np.arange(pm)
    cell_r, cell_c = cell // m, cell % m
    for t in range(len(out_r)):
        hr = (out_r[t] * p + cell_r) * H_shape[1] + (out_c[t] * m + cell_c)
        xr = (w_ids[t] * p + cell_r) * X_shape[1] + (e_ids[t] * m + cell_c)
        rr.extend(hr.tolist())
        cc.extend(xr.tolist())
    S = scipy.sparse.coo_matrix(
        (np.ones(len(rr)), (rr, cc)),
        shape=(H_shape[0] * H_shape[1], X_shape[0] * X_shape[1]),
    ).tocsr()

    return AffineOperator(
        R=R, s=s, p=p, m=m, X_shape=X_shape, H_shape=H_shape,
        n_w_blocks=n_w, n_e_blocks=n_w,
        out_r=np.array(out_r, dtype=int), out_c=np.array(out_c, dtype=int),
        w_ids=np.array(w_ids, dtype=int), e_ids=np.array(e_ids, dtype=int),
        n_out_rows=len(rows), n_out_cols=len(cols),
        group_of_term=group_of_term,
        group_block_ids=group_block_ids, group_out_ids=group_out_ids,
        blk_w=np.array(blk_w, dtype=int), blk_e=np.array(blk_e, dtype=int),
        blk_group=np.array(blk_group, dtype=int),
        group_sizes=group_sizes, group_mult=group_mult,
        matrix=S,
    )
