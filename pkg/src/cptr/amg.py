"""Classical Ruge-Stuben AMG and its unknown-based variant for coupled p-T blocks.

Strength of connection is computed here; the two-pass C/F split, direct
interpolation and Gauss-Seidel sweeps use pyamg's compiled kernels.  A V(1,1)
cycle relaxes once on the way down and once on the way up; each relaxation is
a symmetric Gauss-Seidel sweep (forward then backward), so the cycle is a
symmetric operator for symmetric matrices.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from pyamg.classical.interpolate import direct_interpolation
from pyamg.classical.split import RS
from pyamg.relaxation.relaxation import gauss_seidel
from sklearn.base import BaseEstimator

from .sparse import as_csr


def strength_of_connection(A, theta=0.25):
    """Strong-connection graph (zero diagonal, unit weights) of ``A``.

    Row ``i`` depends strongly on ``j`` when ``-a_ij >= theta * max_k(-a_ik)``.
    Rows whose off-diagonal mass is mostly positive fall back to
    ``|a_ij| >= theta * max_k |a_ik|``, which keeps advection-dominated,
    non-M-matrix rows coarsenable.
    """
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    A = as_csr(A)
    n = A.shape[0]
    coo = A.tocoo()
    off = coo.row != coo.col
    row, col, val = coo.row[off], coo.col[off], coo.data[off]
    neg_mass = np.bincount(row, np.where(val < 0, -val, 0.0), minlength=n)
    pos_mass = np.bincount(row, np.where(val > 0, val, 0.0), minlength=n)
    use_abs = pos_mass > neg_mass
    measure = np.where(use_abs[row], np.abs(val), -val)
    row_max = np.zeros(n)
    np.maximum.at(row_max, row, measure)
    strong = (measure > 0) & (measure >= theta * row_max[row])
    S = sp.csr_matrix((np.ones(strong.sum()), (row[strong], col[strong])), shape=(n, n))
    S.sort_indices()
    return S


def _split_and_interpolate(A, theta):
    """C/F split and direct interpolation; ``None`` if ``A`` cannot be coarsened."""
    S = strength_of_connection(A, theta)
    if S.nnz == 0:
        return None
    splitting = RS(S, second_pass=True)
    nc = int(splitting.sum())
    if nc == 0 or nc == A.shape[0]:
        return None
    P = direct_interpolation(A, S, splitting)
    return sp.csr_matrix(P)


@dataclass
class Level:
    A: sp.csr_matrix
    P: sp.csr_matrix = None
    R: sp.csr_matrix = None


@dataclass
class AmgHierarchy:
    levels: list = field(default_factory=list)
    coarse_solver: object = None
    pre_sweep: str = "symmetric"
    post_sweep: str = "symmetric"

    @property
    def n_levels(self):
        return len(self.levels)

    def level_sizes(self):
        return [lv.A.shape[0] for lv in self.levels]

    def operator_complexity(self):
        return sum(lv.A.nnz for lv in self.levels) / self.levels[0].A.nnz

    def _coarse_solve(self, b):
        return self.coarse_solver(b)

    def vcycle(self, b, level=0):
        b = np.asarray(b, dtype=float)
        if level == self.n_levels - 1:
            return self._coarse_solve(b)
        lv = self.levels[level]
        x = np.zeros_like(b)
        gauss_seidel(lv.A, x, b, iterations=1, sweep=self.pre_sweep)
        r = b - lv.A @ x
        x += lv.P @ self.vcycle(lv.R @ r, level + 1)
        gauss_seidel(lv.A, x, b, iterations=1, sweep=self.post_sweep)
        return x


def _coarse_solver(A, dense_limit):
    if A.shape[0] <= dense_limit:
        lu = scipy.linalg.lu_factor(A.toarray())
        return lambda b: scipy.linalg.lu_solve(lu, b)
    lu = spla.splu(sp.csc_matrix(A))
    return lu.solve


def _galerkin(A, P):
    R = sp.csr_matrix(P.T)
    Ac = as_csr(R @ A @ P)
    return R, Ac


def amg_setup(A, theta=0.25, max_levels=25, coarse_size=50):
    A = as_csr(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("AMG needs a square matrix")
    if np.any(A.diagonal() == 0):
        raise ValueError("AMG needs a nonzero diagonal")
    levels = [Level(A)]
    while len(levels) < max_levels and levels[-1].A.shape[0] > coarse_size:
        cur = levels[-1]
        P = _split_and_interpolate(cur.A, theta)
        if P is None:
            break
        cur.P = P
        cur.R, Ac = _galerkin(cur.A, P)
        levels.append(Level(Ac))
    return AmgHierarchy(levels, _coarse_solver(levels[-1].A, coarse_size))


def uamg_setup(A, block_sizes, theta=0.25, max_levels=25, coarse_size=50):
    """Unknown-based AMG for a field-ordered system ``[[A_pp, A_pT], [A_Tp, A_TT]]``.

    Each unknown's diagonal block is split and interpolated on its own; the
    prolongation is block diagonal and coarse operators are Galerkin products
    of the full coupled matrix, so coupling blocks survive on every level.
    A block stops coarsening (identity prolongation) once it is at most
    ``coarse_size`` rows or has no strong connections left.
    """
    A = as_csr(A)
    sizes = [int(s) for s in block_sizes]
    if sum(sizes) != A.shape[0]:
        raise ValueError("block sizes do not add up to the matrix size")
    active = [s > coarse_size for s in sizes]
    levels = [Level(A)]
    while len(levels) < max_levels and any(active):
        cur = levels[-1]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        blocks = []
        for b, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
            P = _split_and_interpolate(as_csr(cur.A[lo:hi, lo:hi]), theta) if active[b] else None
            if P is None:
                active[b] = False
                P = sp.identity(hi - lo, format="csr")
            blocks.append(P)
        new_sizes = [P.shape[1] for P in blocks]
        if new_sizes == sizes:
            break
        cur.P = sp.csr_matrix(sp.block_diag(blocks, format="csr"))
        cur.R, Ac = _galerkin(cur.A, cur.P)
        levels.append(Level(Ac))
        sizes = new_sizes
        active = [a and s > coarse_size for a, s in zip(active, sizes)]
    hier = AmgHierarchy(levels, _coarse_solver(levels[-1].A, coarse_size))
    hier.block_sizes = sizes
    return hier


def amg_vcycle(hierarchy, b):
    return hierarchy.vcycle(b)


class RugeStubenAMG(BaseEstimator):
    """One classical AMG V(1,1) cycle per application."""

    def __init__(self, theta=0.25, max_levels=25, coarse_size=50):
        self.theta = theta
        self.max_levels = max_levels
        self.coarse_size = coarse_size

    def fit(self, A):
        self.hierarchy_ = amg_setup(A, self.theta, self.max_levels, self.coarse_size)
        return self

    def apply(self, b):
        return self.hierarchy_.vcycle(b)


class UnknownAMG(BaseEstimator):
    """Unknown-based AMG V(1,1) cycle for a field-ordered multi-unknown block."""

    def __init__(self, theta=0.25, max_levels=25, coarse_size=50):
        self.theta = theta
        self.max_levels = max_levels
        self.coarse_size = coarse_size

    def fit(self, A, block_sizes=None):
        if block_sizes is None:
            if A.shape[0] % 2:
                raise ValueError("give block_sizes for an odd-sized system")
            block_sizes = (A.shape[0] // 2, A.shape[0] // 2)
        self.hierarchy_ = uamg_setup(A, block_sizes, self.theta, self.max_levels,
                                     self.coarse_size)
        return self

    def apply(self, b):
        return self.hierarchy_.vcycle(b)
