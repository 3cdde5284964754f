"""Transverse-field spectra and the true/false avoided crossing.

Everything here works with the dimensionless Hamiltonian

    H(Gamma) = -Gamma * sum_i sigma^x_i + H_prob

in the computational basis (2^n dimensional, real symmetric, n off-diagonal
entries of -Gamma per row).  Low-lying eigenpairs come from a preconditioned
block iterative solver with optional warm starts; the avoided crossing
between the true minimum and the degenerate false manifold is located by
bisection on the numerical derivative of the spectral gap and its gap is
reported as an upper bound only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ising import IsingProblem, diagonal_energies, enumerate_states
from .schedule import Device, s_of_gamma, synthetic_schedule

_DENSE_CUTOFF = 2048         # below this dimension just diagonalize densely
_RESIDUAL_SCALE = 1e-10      # residual tolerance relative to matrix scale

# Default crossing bracket.  The lower edge stays above the quasi-degenerate
# regime (all separations O(Gamma) there, which stalls block iteration) and
# well below the crossing itself, which sits near 0.033 for every barrier
# strength of interest.
DEFAULT_BRACKET = (0.015, 0.2)


class SpectrumError(RuntimeError):
    """Eigensolver failure or ill-posed crossing search."""


@lru_cache(maxsize=8)
def _hypercube_structure(n: int):
    """CSR skeleton (indptr, indices, diagonal mask) of diag + sum sigma^x."""
    dim = 1 << n
    z = np.arange(dim, dtype=np.int64)
    cols = z[:, None] ^ (np.int64(1) << np.arange(n, dtype=np.int64))[None, :]
    cols = np.concatenate([cols, z[:, None]], axis=1)
    cols.sort(axis=1)
    indices = cols.ravel()
    indptr = np.arange(0, (n + 1) * dim + 1, n + 1, dtype=np.int64)
    rows = np.repeat(z, n + 1)
    diag_mask = indices == rows
    return indptr, indices.astype(np.int32), diag_mask


@lru_cache(maxsize=32)
def _cached_diagonal(problem: IsingProblem) -> np.ndarray:
    return diagonal_energies(problem)


@dataclass(frozen=True)
class SparseHamiltonian:
    """H(Gamma)/B as an explicit sparse matrix plus its ingredients."""

    problem: IsingProblem
    gamma: float
    matrix: sp.csr_matrix

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def scale(self) -> float:
        """Crude matrix norm bound used for relative tolerances."""
        d = _cached_diagonal(self.problem)
        return float(np.abs(d).max() + self.problem.n_qubits * abs(self.gamma))


def assemble(problem: IsingProblem, gamma: float) -> SparseHamiltonian:
    """Build H(Gamma)/B in the computational basis."""
    if gamma < 0:
        raise ValueError(f"Gamma must be >= 0, got {gamma}")
    n = problem.n_qubits
    diag = _cached_diagonal(problem)          # also enforces the n <= 24 guard
    indptr, indices, diag_mask = _hypercube_structure(n)
    data = np.full(indices.size, -float(gamma), dtype=np.float64)
    data[diag_mask] = diag
    mat = sp.csr_matrix((data, indices, indptr), shape=(diag.size, diag.size))
    return SparseHamiltonian(problem=problem, gamma=float(gamma), matrix=mat)


@dataclass(frozen=True)
class EigenSystem:
    gamma: float
    eigenvalues: np.ndarray     # ascending
    eigenvectors: np.ndarray    # columns, aligned with eigenvalues
    residual_norms: np.ndarray
    # full converged iteration block (k + guard columns); best warm start for
    # a neighbouring Gamma -- random guard columns would restart from scratch
    block: "np.ndarray | None" = None

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def warm_block(self) -> np.ndarray:
        return self.eigenvectors if self.block is None else self.block


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Deterministic gauge: largest-magnitude component of each column > 0."""
    idx = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _rayleigh_ritz(A, V: np.ndarray):
    """Orthonormalize V, project, and return sorted Ritz pairs + residuals."""
    V, _ = np.linalg.qr(V)
    AV = A @ V
    T = V.T @ AV
    T = 0.5 * (T + T.T)
    vals, U = np.linalg.eigh(T)
    V = V @ U
    AV = AV @ U
    resid = np.linalg.norm(AV - V * vals[None, :], axis=0)
    return vals, _fix_signs(V), resid


_SKETCH_WIDTH = 512    # basis states kept in the restricted (dense) sketch
_BLOCK_CAP = 48        # never grow the iteration block beyond this
_CLUSTER_FLOOR = 0.01  # spectral separation considered healthy for a boundary


def _subspace_sketch(A: sp.csr_matrix, width: int = _SKETCH_WIDTH):
    """Exact Ritz pairs of H restricted to the ``width`` lowest-diagonal
    basis states, embedded in the full space.

    Near-degenerate low-energy clusters (wide classical levels split only at
    O(Gamma^2)) are rotated correctly from the outset, which a random start
    cannot do within a small block.  The Ritz values also sketch the low
    spectrum well enough to choose a block boundary clear of tight clusters.
    """
    diag = A.diagonal()
    width = min(diag.size, width)
    idx = np.sort(np.argsort(diag, kind="stable")[:width])
    sub = A[np.ix_(idx, idx)].toarray()
    vals, U = np.linalg.eigh(sub)
    X = np.zeros((diag.size, width))
    X[idx, :] = U
    return vals, X


def _healthy_boundary(vals: np.ndarray, lo: int, cap: int,
                      floor: float = _CLUSTER_FLOOR) -> int:
    """Smallest block size >= lo whose boundary separation is >= floor.

    Block iteration converges a column only as fast as its separation from
    the first state outside the block, so a boundary inside a tight cluster
    (split at O(Gamma^2)) stalls; a boundary in an O(Gamma) gap does not.
    Falls back to the widest available separation when none reaches floor.
    """
    best_m, best_sep = lo, -1.0
    for m in range(lo, min(cap, vals.size - 1) + 1):
        sep = float(vals[m] - vals[m - 1])
        if sep >= floor:
            return m
        if sep > best_sep:
            best_sep, best_m = sep, m
    return best_m


def lowest_eigenpairs(H: SparseHamiltonian, k: int,
                      guesses: "np.ndarray | None" = None,
                      maxiter: int = 600) -> EigenSystem:
    """k smallest eigenpairs to residual <= 1e-10 * matrix scale.

    ``guesses`` (dim x m, m >= 1) warm-start the block iteration.  Small
    problems are diagonalized densely.  Raises SpectrumError with the best
    residuals on non-convergence.
    """
    if not 1 <= k <= H.dim:
        raise ValueError(f"need 1 <= k <= dim, got k={k}, dim={H.dim}")
    tol = _RESIDUAL_SCALE * H.scale
    A = H.matrix
    if H.dim <= _DENSE_CUTOFF:
        vals, vecs = np.linalg.eigh(A.toarray())
        vals, vecs, resid = _rayleigh_ritz(A, vecs[:, :k])
        return EigenSystem(H.gamma, vals[:k], vecs[:, :k], resid[:k])
    if H.gamma == 0.0:
        # exactly diagonal: eigenvectors are basis states; ties by code
        diag = A.diagonal()
        order = np.argsort(diag, kind="stable")[:k]
        vecs = np.zeros((H.dim, k))
        vecs[order, np.arange(k)] = 1.0
        return EigenSystem(0.0, diag[order].astype(np.float64), vecs,
                           np.zeros(k))

    diag = A.diagonal()
    denom = diag - (diag.min() - 1.0)

    def _precondition(v):
        return v / (denom[:, None] if v.ndim == 2 else denom)

    M = spla.LinearOperator((H.dim, H.dim), matvec=_precondition,
                            matmat=_precondition, dtype=np.float64)

    def _iterate(X, budget, chunk=150):
        # chunked restarts with a Rayleigh-Ritz cleanup between chunks keep
        # the iteration healthy when near-degenerate clusters ill-condition
        # the internal Gram matrices
        best = None
        spent = 0
        prev = np.inf
        while spent < budget:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    _, V = spla.lobpcg(A, X, M=M, tol=tol * 0.5,
                                       maxiter=min(chunk, budget - spent),
                                       largest=False)
                except Exception:
                    V = X
            vals, vecs, resid = _rayleigh_ritz(A, V)
            worst = resid[:k].max()
            if best is None or worst < best[2][:k].max():
                best = (vals, vecs, resid)
            if worst <= tol or worst > 0.9 * prev:
                break
            prev = worst
            X = vecs
            spent += chunk
        return best

    cap = min(_BLOCK_CAP, H.dim - 1)
    sketch = None
    if guesses is not None:
        g = np.atleast_2d(np.asarray(guesses, dtype=np.float64))
        if g.shape[0] != H.dim:
            g = g.T
        m = max(min(k + 2, cap), min(g.shape[1], cap))
        if g.shape[1] >= m:
            X = np.ascontiguousarray(g[:, :m])
        else:
            sketch = _subspace_sketch(A)
            X = np.hstack([g, sketch[1][:, g.shape[1]:m]])
        vals, vecs, resid = _iterate(X, min(maxiter, 300))
        ok = not (resid[:k] > tol).any()
    else:
        ok = False

    if not ok:
        # cold start (or warm-start rescue): exact Ritz vectors of the
        # restricted sketch, block grown so its boundary clears any tight
        # cluster (separations O(Gamma^2) stall the iteration; O(Gamma)
        # separations do not)
        if sketch is None:
            sketch = _subspace_sketch(A)
        m = _healthy_boundary(sketch[0], min(k + 2, cap), cap)
        vals, vecs, resid = _iterate(sketch[1][:, :m], 3 * maxiter)
    if (resid[:k] > tol).any():
        raise SpectrumError(
            f"eigensolver did not reach tol {tol:.3e}; residuals {resid[:k]}")
    return EigenSystem(H.gamma, vals[:k], vecs[:, :k], resid[:k], block=vecs)


def gap(problem: IsingProblem, gamma: float,
        warm_start: "EigenSystem | np.ndarray | None" = None,
        return_eigensystem: bool = False):
    """Dimensionless spectral gap E1 - E0 at the given Gamma."""
    guesses = None
    if isinstance(warm_start, EigenSystem):
        guesses = warm_start.warm_block
    elif warm_start is not None:
        guesses = np.asarray(warm_start)
    dim = 1 << problem.n_qubits
    es = lowest_eigenpairs(assemble(problem, gamma),
                           k=max(2, min(6, dim - 1)), guesses=guesses)
    g = float(es.eigenvalues[1] - es.eigenvalues[0])
    return (g, es) if return_eigensystem else g


def crossing_warm_start(problem: IsingProblem, k: int = 5) -> np.ndarray:
    """Continuation seed: k eigenstates at Gamma = 1 plus the classical
    ground state as an extra basis column."""
    k = min(k, (1 << problem.n_qubits) - 1)
    es = lowest_eigenpairs(assemble(problem, 1.0), k)
    ground_code = int(enumerate_states(problem).codes[0])
    extra = np.zeros((es.eigenvectors.shape[0], 1))
    extra[ground_code, 0] = 1.0
    return np.hstack([es.eigenvectors, extra])


@dataclass(frozen=True)
class CrossingReport:
    j_t: float
    gamma_cross: float
    gap_upper_bound: float      # gap at gamma_cross; not the true minimal gap
    b_at_crossing: dict         # device label -> B(s{gamma_cross}) in GHz
    bracket_history: tuple      # of (lo, hi)

    def to_json_dict(self) -> dict:
        return {
            "j_t": self.j_t,
            "gamma_cross": self.gamma_cross,
            "gap_upper_bound": self.gap_upper_bound,
            "b_at_crossing_ghz": dict(self.b_at_crossing),
            "bracket_history": [list(b) for b in self.bracket_history],
        }


def locate_crossing(problem: IsingProblem, j_t: float,
                    bracket: "tuple[float, float]" = DEFAULT_BRACKET,
                    deriv_step: float = 1e-5,
                    width_tol: float = 1e-10,
                    max_bisections: int = 80) -> CrossingReport:
    """Bisection on d(gap)/dGamma to find the avoided crossing.

    The derivative is a central difference with step ``deriv_step``; bisection
    stops when the bracket is narrower than ``width_tol`` or the derivative
    falls under the 1e-6 * gap noise floor.  The reported gap is explicitly an
    upper bound on the true minimal gap, which sits between grid evaluations.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 <= lo < hi:
        raise ValueError(f"bad bracket {bracket}")
    cache: dict = {}

    def gap_at(g: float) -> float:
        key = round(g, 14)
        if key in cache:
            return cache[key][0]
        warm = None
        if cache:
            nearest = min(cache, key=lambda x: abs(x - key))
            warm = cache[nearest][1].warm_block
        val, es = gap(problem, g, warm_start=warm, return_eigensystem=True)
        cache[key] = (val, es)
        return val

    def deriv(g: float) -> "tuple[float, float]":
        h = deriv_step
        return (gap_at(g + h) - gap_at(g - h)) / (2 * h), gap_at(g)

    d_lo, _ = deriv(lo + deriv_step)
    d_hi, _ = deriv(hi - deriv_step)
    if not (d_lo < 0 < d_hi):
        raise SpectrumError(
            f"gap derivative does not change sign on bracket {bracket}: "
            f"d(lo)={d_lo:.3e}, d(hi)={d_hi:.3e}")

    history = [(lo, hi)]
    for _ in range(max_bisections):
        if hi - lo <= width_tol:
            break
        mid = 0.5 * (lo + hi)
        d_mid, gap_mid = deriv(mid)
        if abs(d_mid) < 1e-6 * gap_mid:
            lo = hi = mid          # derivative noise floor: call it converged
            history.append((lo, hi))
            break
        if d_mid < 0:
            lo = mid
        else:
            hi = mid
        history.append((lo, hi))

    gamma_cross = 0.5 * (lo + hi)
    gap_cross = gap_at(gamma_cross)
    b_at = {}
    for device in Device:
        table = synthetic_schedule(device)
        b_at[device.value] = table.b(s_of_gamma(table, gamma_cross))
    return CrossingReport(
        j_t=float(j_t),
        gamma_cross=gamma_cross,
        gap_upper_bound=gap_cross,
        b_at_crossing=b_at,
        bracket_history=tuple(history),
    )
