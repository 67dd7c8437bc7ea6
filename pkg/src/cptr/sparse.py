"""Sparse kernels: right-preconditioned GMRES, ILU(k), block-Jacobi ILU, direct solves.

Preconditioners follow a small estimator protocol: ``fit(A)`` builds the
factorisation or hierarchy and ``apply(r)`` returns an approximation of
``A^{-1} r``.  ``get_params``/``set_params`` come from scikit-learn's
``BaseEstimator``.
"""
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from sklearn.base import BaseEstimator


class SolverError(RuntimeError):
    pass


class FactorizationError(RuntimeError):
    pass


def as_csr(A):
    """Canonical CSR copy-free view: float64 values, sorted column indices."""
    A = sp.csr_matrix(A, dtype=float)
    if not A.has_sorted_indices:
        A = A.sorted_indices()
    return A


def spmv(A, x):
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {x.shape}")
    return A @ x


# ---------------------------------------------------------------------------
# GMRES


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residuals: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.x, self.iterations, self.converged))


def _identity(r):
    return r


def gmres(A, b, precond=None, rtol=1e-8, maxit=200, restart=None):
    """Right-preconditioned GMRES from a zero initial guess.

    ``precond`` is a callable or an object with ``apply``.  The iteration
    count is the number of preconditioner applications.  ``residuals`` holds
    the relative residual estimate after every iteration, starting with 1.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if A.shape != (n, n):
        raise ValueError(f"matrix shape {A.shape} does not match rhs of size {n}")
    M = _identity if precond is None else getattr(precond, "apply", precond)
    restart = maxit if restart is None else max(1, min(restart, maxit))

    x = np.zeros(n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return GmresResult(x, 0, True, [0.0])
    history = [1.0]
    it = 0
    r = b.copy()
    while True:
        beta = np.linalg.norm(r)
        m = min(restart, maxit - it)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j = -1
        for j in range(m):
            Z[j] = M(V[j])
            w = A @ Z[j]
            it += 1
            for i in range(j + 1):
                H[i, j] = np.dot(w, V[i])
                w -= H[i, j] * V[i]
            h_next = np.linalg.norm(w)
            H[j + 1, j] = h_next
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            if not np.isfinite(denom):
                raise SolverError(f"non-finite Hessenberg entry at iteration {it}")
            if denom == 0:
                raise SolverError(f"GMRES breakdown with zero Krylov direction at iteration {it}")
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            rel = abs(g[j + 1]) / bnorm
            history.append(rel)
            # lucky breakdown: the Krylov space is invariant, the solve is exact
            lucky = h_next <= 1e-14 * denom
            if rel <= rtol or lucky:
                break
            V[j + 1] = w / h_next
        k = j + 1
        y = scipy.linalg.solve_triangular(H[:k, :k], g[:k])
        x = x + Z[:k].T @ y
        r = b - A @ x
        true_rel = np.linalg.norm(r) / bnorm
        if not np.isfinite(true_rel):
            raise SolverError("GMRES produced a non-finite iterate")
        if true_rel <= rtol or it >= maxit:
            return GmresResult(x, it, bool(true_rel <= rtol), history)
        # estimate and true residual disagree, or a restart cycle ended: go on from x


# ---------------------------------------------------------------------------
# ILU(k)


@numba.njit(cache=True)
def _grow(arr, size):
    out = np.empty(max(2 * arr.size, size), dtype=arr.dtype)
    out[:arr.size] = arr
    return out


@numba.njit(cache=True)
def _ilu_symbolic(n, indptr, indices, fill):
    """Level-of-fill pattern; returns (indptr, indices, diag_pos) or diag_pos[-1] = -1 on error."""
    cap = indices.size * 2 + n
    f_ind = np.empty(cap, dtype=np.int64)
    f_lev = np.empty(cap, dtype=np.int64)
    f_ptr = np.zeros(n + 1, dtype=np.int64)
    diag = np.empty(n, dtype=np.int64)
    nxt = np.full(n + 1, -1, dtype=np.int64)
    lev = np.full(n, -1, dtype=np.int64)
    nnz = 0
    for i in range(n):
        head = n  # sentinel
        nxt[head] = -1
        # seed with the (sorted) pattern of row i of A
        last = head
        has_diag = False
        for q in range(indptr[i], indptr[i + 1]):
            c = indices[q]
            nxt[last] = c
            nxt[c] = -1
            lev[c] = 0
            last = c
            if c == i:
                has_diag = True
        if not has_diag:
            diag[0] = -1 - i
            return f_ptr, f_ind[:0], diag
        k = nxt[head]
        while k != -1 and k < i:
            lk = lev[k]
            prev = k
            for q in range(diag[k] + 1, f_ptr[k + 1]):
                j = f_ind[q]
                new = lk + f_lev[q] + 1
                if new > fill:
                    continue
                if lev[j] >= 0:
                    if new < lev[j]:
                        lev[j] = new
                    continue
                # insert j keeping the list sorted; entries after k are > k
                while nxt[prev] != -1 and nxt[prev] < j:
                    prev = nxt[prev]
                nxt[j] = nxt[prev]
                nxt[prev] = j
                lev[j] = new
                prev = j
            k = nxt[k]
        c = nxt[head]
        while c != -1:
            if nnz >= f_ind.size:
                f_ind = _grow(f_ind, nnz + 1)
                f_lev = _grow(f_lev, nnz + 1)
            f_ind[nnz] = c
            f_lev[nnz] = lev[c]
            if c == i:
                diag[i] = nnz
            lev[c] = -1
            nnz += 1
            c = nxt[c]
        f_ptr[i + 1] = nnz
    return f_ptr, f_ind[:nnz].copy(), diag


@numba.njit(cache=True)
def _ilu_numeric(n, a_ptr, a_ind, a_val, f_ptr, f_ind, diag):
    val = np.zeros(f_ind.size)
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for q in range(f_ptr[i], f_ptr[i + 1]):
            pos[f_ind[q]] = q
        for q in range(a_ptr[i], a_ptr[i + 1]):
            val[pos[a_ind[q]]] += a_val[q]
        for q in range(f_ptr[i], diag[i]):
            k = f_ind[q]
            lik = val[q] / val[diag[k]]
            val[q] = lik
            for s in range(diag[k] + 1, f_ptr[k + 1]):
                t = pos[f_ind[s]]
                if t >= 0:
                    val[t] -= lik * val[s]
        if val[diag[i]] == 0.0 or not np.isfinite(val[diag[i]]):
            return val, i
        for q in range(f_ptr[i], f_ptr[i + 1]):
            pos[f_ind[q]] = -1
    return val, -1


@numba.njit(cache=True)
def _ilu_solve(n, f_ptr, f_ind, val, diag, r):
    z = r.copy()
    for i in range(n):
        s = z[i]
        for q in range(f_ptr[i], diag[i]):
            s -= val[q] * z[f_ind[q]]
        z[i] = s
    for i in range(n - 1, -1, -1):
        s = z[i]
        for q in range(diag[i] + 1, f_ptr[i + 1]):
            s -= val[q] * z[f_ind[q]]
        z[i] = s / val[diag[i]]
    return z


@dataclass
class IluFactors:
    """Combined L (unit, strictly lower part) and U factors in one CSR pattern."""
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    diag: np.ndarray
    level: int

    @property
    def n(self):
        return self.indptr.size - 1

    def as_csr(self):
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def L(self):
        return sp.tril(self.as_csr(), -1, format="csr") + sp.identity(self.n, format="csr")

    def U(self):
        return sp.triu(self.as_csr(), 0, format="csr")

    def solve(self, r):
        return _ilu_solve(self.n, self.indptr, self.indices, self.data, self.diag,
                          np.asarray(r, dtype=float))

    apply = solve


def ilu_factor(A, k=0):
    """ILU(k) by symbolic level-of-fill followed by IKJ elimination, no pivoting."""
    if k < 0 or int(k) != k:
        raise ValueError("fill level must be a non-negative integer")
    A = as_csr(A)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("ILU needs a square matrix")
    a_ptr = A.indptr.astype(np.int64)
    a_ind = A.indices.astype(np.int64)
    f_ptr, f_ind, diag = _ilu_symbolic(n, a_ptr, a_ind, int(k))
    if n and diag[0] < 0:
        raise FactorizationError(f"row {-1 - diag[0]} has no structural diagonal entry")
    data, bad = _ilu_numeric(n, a_ptr, a_ind, A.data, f_ptr, f_ind, diag)
    if bad >= 0:
        raise FactorizationError(f"zero pivot in ILU({k}) at row {bad}")
    return IluFactors(f_ptr, f_ind, data, diag, int(k))


def ilu_apply(factors, r):
    return factors.solve(r)


# ---------------------------------------------------------------------------
# partitions and block Jacobi


@dataclass
class Partition:
    ids: np.ndarray
    count: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.count < 1:
            raise ValueError("partition needs at least one subdomain")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.count):
            raise ValueError("subdomain ids must lie in [0, count)")

    @classmethod
    def contiguous(cls, n_rows, count):
        if count > n_rows:
            raise ValueError("more subdomains than rows")
        ids = np.empty(n_rows, dtype=np.int64)
        for s, chunk in enumerate(np.array_split(np.arange(n_rows), count)):
            ids[chunk] = s
        return cls(ids, count)

    @classmethod
    def slabs(cls, grid, count):
        """Cut the grid into ``count`` slabs along its longest axis.

        Ties go to the slowest-varying axis, so slabs are contiguous ranges of
        cell indices whenever possible.
        """
        lengths = np.array([grid.Lx, grid.Ly, grid.Lz])
        dims = np.array(grid.shape)
        lengths = np.where(dims > 1, lengths, -1.0)
        axis = int(np.flatnonzero(lengths == lengths.max())[-1])
        n_axis = dims[axis]
        if count > n_axis:
            raise ValueError(f"cannot cut {n_axis} cell layers into {count} slabs")
        layer = np.empty(n_axis, dtype=np.int64)
        for s, chunk in enumerate(np.array_split(np.arange(n_axis), count)):
            layer[chunk] = s
        ijk = grid.cell_ijk(np.arange(grid.n_cells))
        return cls(layer[ijk[axis]], count)

    def expand(self, index_maps):
        """Row partition of a multi-unknown system given per-field row indices."""
        n_rows = sum(ix.size for ix in index_maps)
        ids = np.empty(n_rows, dtype=np.int64)
        for ix in index_maps:
            ids[ix] = self.ids
        return Partition(ids, self.count)


def drop_off_block(A, partition):
    A = as_csr(A)
    if partition.ids.size != A.shape[0]:
        raise ValueError("partition does not cover all rows")
    if partition.count == 1:
        return A
    coo = A.tocoo()
    keep = partition.ids[coo.row] == partition.ids[coo.col]
    B = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=A.shape)
    return as_csr(B)


def block_jacobi_ilu(A, partition, k=0):
    """ILU(k) of the subdomain diagonal blocks of ``A``.

    Couplings between subdomains are removed first; fill can then never cross
    a subdomain boundary, so factoring the masked matrix is the same as
    factoring each block on its own.
    """
    return ilu_factor(drop_off_block(A, partition), k)


class ILU(BaseEstimator):
    """ILU(k) preconditioner, optionally block-Jacobi over a row partition."""

    def __init__(self, level=0, partition=None):
        self.level = level
        self.partition = partition

    def fit(self, A):
        if self.partition is None:
            self.factors_ = ilu_factor(A, self.level)
        else:
            self.factors_ = block_jacobi_ilu(A, self.partition, self.level)
        return self

    def apply(self, r):
        return self.factors_.solve(r)


class DirectSolver(BaseEstimator):
    """Sparse LU (SuperLU) used as an exact stage solver."""

    def __init__(self, permc_spec="COLAMD"):
        self.permc_spec = permc_spec

    def fit(self, A):
        try:
            self.lu_ = spla.splu(sp.csc_matrix(A, dtype=float), permc_spec=self.permc_spec)
        except RuntimeError as exc:
            raise FactorizationError(f"sparse LU failed: {exc}") from exc
        return self

    def apply(self, r):
        return self.lu_.solve(np.asarray(r, dtype=float))


def dense_lu_solve(A, b):
    A = np.asarray(A, dtype=float)
    with warnings.catch_warnings():
        # singularity is reported below as a FactorizationError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    d = np.abs(np.diag(lu))
    if d.min() <= np.finfo(float).eps * max(d.max(), 1e-300) * A.shape[0]:
        raise FactorizationError("matrix is singular to machine precision")
    return scipy.linalg.lu_solve((lu, piv), np.asarray(b, dtype=float))


def write_matrix_market(path, A, comment=""):
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment)


def read_matrix_market(path):
    return as_csr(scipy.io.mmread(str(path)))
