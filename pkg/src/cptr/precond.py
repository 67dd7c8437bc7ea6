"""Two-stage CPR/CPTR preconditioners.

A two-stage preconditioner combines a restricted first stage ``M1`` (a solve
on the pressure or pressure-temperature subsystem, prolonged by zero) with a
global ILU second stage ``M2``::

    x1 = M1 b;   x = M2 (b - A x1) + x1

``order="ilu-first"`` swaps the roles of the two stages.  Decoupling (QI or
TI) happens inside the first stage, so the outer system is never modified.
"""
import warnings

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .amg import RugeStubenAMG, UnknownAMG
from .sparse import ILU, DirectSolver, Partition, as_csr

DECOUPLINGS = ("none", "qi", "ti")
ORDERS = ("restricted-first", "ilu-first")
PRESSURE_SOLVERS = ("amg", "lu")
PT_SOLVERS = ("block-schur-amg", "block-schur-lu", "uamg", "block-diag-amg",
              "block-diag-lu", "lu")

VARIANTS = {
    "cpr-amg": dict(restriction="pressure", solver="amg"),
    "cpr-lu": dict(restriction="pressure", solver="lu"),
    "cpr-amg-ilu1": dict(restriction="pressure", solver="amg", ilu_level=1),
    "cpr-amg-ti": dict(restriction="pressure", solver="amg", decouple="ti"),
    "cptr-block-amg": dict(restriction="pressure-temperature", solver="block-schur-amg"),
    "cptr-block-lu": dict(restriction="pressure-temperature", solver="block-schur-lu"),
    "cptr-uamg": dict(restriction="pressure-temperature", solver="uamg"),
    "cptr-uamg-ti": dict(restriction="pressure-temperature", solver="uamg", decouple="ti"),
    "cptr-bd-lu": dict(restriction="pressure-temperature", solver="block-diag-lu"),
    "cptr-bd-amg": dict(restriction="pressure-temperature", solver="block-diag-amg"),
}


class StageError(RuntimeError):
    """A preconditioner stage failed; the message names the stage."""


def _scalar_solver(kind):
    return RugeStubenAMG() if kind == "amg" else DirectSolver()


def _checked(stage, x):
    if not np.all(np.isfinite(x)):
        raise StageError(f"{stage} produced non-finite values")
    return x


# ---------------------------------------------------------------------------
# decoupling


def _cell_diag(B):
    return np.asarray(B.diagonal(), dtype=float)


def _cell_colsum(B):
    return np.asarray(B.sum(axis=0), dtype=float).ravel()


def decoupling_weights(system, kind, rows=("p",)):
    """Per-cell decoupling weights ``D`` (one array per row field).

    QI uses the cell-block diagonals, ``D = diag(A_xs) diag(A_ss)^-1``; TI uses
    column sums, ``D = colsum(A_xs) colsum(A_ss)^-1``.  Cells with a zero
    ``s``-block get ``D = 0`` and a warning.
    """
    if kind not in DECOUPLINGS:
        raise ValueError(f"unknown decoupling {kind!r}")
    n = system.n_cells
    if kind == "none":
        return {f: np.zeros(n) for f in rows}
    reduce = _cell_diag if kind == "qi" else _cell_colsum
    A_ss = reduce(system.block("s", "s"))
    singular = (A_ss == 0) | ~np.isfinite(A_ss)
    if np.any(singular):
        warnings.warn(f"{kind.upper()} decoupling: singular saturation block in "
                      f"{int(singular.sum())} cells (first: {int(np.flatnonzero(singular)[0])}); "
                      "using D = 0 there", RuntimeWarning, stacklevel=2)
    inv = np.where(singular, 0.0, 1.0 / np.where(singular, 1.0, A_ss))
    return {f: reduce(system.block(f, "s")) * inv for f in rows}


def decouple_operator(system, kind, rows=("p",)):
    """Decoupled first-stage matrix ``A_rr - D A_sr`` and the weights ``D``.

    ``rows=("p",)`` gives ``S_p`` for CPR, ``rows=("p", "T")`` gives ``S_0``
    for CPTR (field-wise ordered).
    """
    D = decoupling_weights(system, kind, rows)
    A_rr = system.block(rows, rows)
    if kind == "none":
        return A_rr, D
    A_sr = system.block("s", rows)
    Dmat = sp.vstack([sp.diags(D[f]) for f in rows], format="csr")
    return as_csr(A_rr - Dmat @ A_sr), D


# ---------------------------------------------------------------------------
# block solvers on A00


class BlockSchurSolver(BaseEstimator):
    """Lower-upper block solve of ``A00`` with an approximate temperature Schur complement.

    Step 1 solves ``A_pp x_p = b_p``, step 2 forms ``b_T - A_Tp x_p``, step 3
    solves with ``S_T``, step 4 forms ``b_p - A_pT dT`` and step 5 solves
    ``A_pp dp = b_p~``.  Sub-solves are one AMG V-cycle or a sparse LU.
    """

    def __init__(self, sub_solver="amg"):
        self.sub_solver = sub_solver

    def fit(self, A_pp, A_pT, A_Tp, S_T):
        self.A_pT_ = as_csr(A_pT)
        self.A_Tp_ = as_csr(A_Tp)
        self.pp_ = _scalar_solver(self.sub_solver).fit(A_pp)
        self.TT_ = _scalar_solver(self.sub_solver).fit(S_T)
        return self

    def apply(self, b_p, b_T):
        x_p = _checked("block-schur step 1", self.pp_.apply(b_p))
        bt = b_T - self.A_Tp_ @ x_p
        dT = _checked("block-schur step 3", self.TT_.apply(bt))
        bp = b_p - self.A_pT_ @ dT
        dp = _checked("block-schur step 5", self.pp_.apply(bp))
        return dp, dT


# ---------------------------------------------------------------------------
# stages


class PressureStage(BaseEstimator):
    """CPR first stage: solve on ``A_pp`` (or ``S_p``), prolong by zero."""

    def __init__(self, solver="amg", decouple="none"):
        self.solver = solver
        self.decouple = decouple

    def fit(self, system, schur=None):
        if self.solver not in PRESSURE_SOLVERS:
            raise ValueError(f"pressure solver must be one of {PRESSURE_SOLVERS}")
        S_p, self.D_ = decouple_operator(system, self.decouple, ("p",))
        self.ip_ = system.index("p")
        self.is_ = system.index("s")
        self.size_ = system.shape[0]
        try:
            self.inner_ = _scalar_solver(self.solver).fit(S_p)
        except Exception as exc:
            raise StageError(f"pressure stage setup ({self.solver}): {exc}") from exc
        return self

    def apply(self, b):
        b_p = b[self.ip_] - self.D_["p"] * b[self.is_]
        x = np.zeros(self.size_)
        x[self.ip_] = _checked("pressure stage", self.inner_.apply(b_p))
        return x


class PressureTemperatureStage(BaseEstimator):
    """CPTR first stage: solve on ``A00`` (or ``S_0``), prolong by zero."""

    def __init__(self, solver="block-schur-amg", decouple="none"):
        self.solver = solver
        self.decouple = decouple

    def fit(self, system, schur=None):
        if self.solver not in PT_SOLVERS:
            raise ValueError(f"pressure-temperature solver must be one of {PT_SOLVERS}")
        if self.solver.startswith("block-schur") and self.decouple != "none":
            raise ValueError("the block-Schur first stage cannot be combined with decoupling")
        n = system.n_cells
        self.ip_, self.iT_, self.is_ = (system.index(f) for f in ("p", "T", "s"))
        self.size_ = system.shape[0]
        self.n_ = n
        S0, self.D_ = decouple_operator(system, self.decouple, ("p", "T"))
        try:
            if self.solver.startswith("block-schur"):
                if schur is None:
                    raise ValueError("block-Schur stage needs the approximate Schur complement")
                self.inner_ = BlockSchurSolver(self.solver.rsplit("-", 1)[1]).fit(
                    S0[:n, :n], S0[:n, n:], S0[n:, :n], schur)
            elif self.solver == "uamg":
                self.inner_ = UnknownAMG().fit(S0, (n, n))
            elif self.solver == "lu":
                self.inner_ = DirectSolver().fit(S0)
            else:
                kind = self.solver.rsplit("-", 1)[1]
                self.inner_ = (_scalar_solver(kind).fit(S0[:n, :n]),
                               _scalar_solver(kind).fit(S0[n:, n:]))
        except (ValueError, RuntimeError) as exc:
            raise StageError(f"pressure-temperature stage setup ({self.solver}): {exc}") from exc
        return self

    def apply(self, b):
        b_s = b[self.is_]
        b_p = b[self.ip_] - self.D_["p"] * b_s
        b_T = b[self.iT_] - self.D_["T"] * b_s
        if self.solver.startswith("block-schur"):
            x_p, x_T = self.inner_.apply(b_p, b_T)
        elif isinstance(self.inner_, tuple):
            x_p = self.inner_[0].apply(b_p)
            x_T = self.inner_[1].apply(b_T)
        else:
            x0 = self.inner_.apply(np.concatenate([b_p, b_T]))
            x_p, x_T = x0[:self.n_], x0[self.n_:]
        x = np.zeros(self.size_)
        x[self.ip_] = _checked("pressure-temperature stage", x_p)
        x[self.iT_] = _checked("pressure-temperature stage", x_T)
        return x


class ILUStage(BaseEstimator):
    """Global ILU(k) second stage; block Jacobi when a cell partition is given."""

    def __init__(self, level=0, partition=None):
        self.level = level
        self.partition = partition

    def fit(self, system, schur=None):
        rows = None
        if self.partition is not None and self.partition.count > 1:
            rows = self.partition.expand([system.index(f) for f in ("p", "T", "s")])
        try:
            self.inner_ = ILU(self.level, rows).fit(system.matrix)
        except RuntimeError as exc:
            raise StageError(f"ILU({self.level}) stage: {exc}") from exc
        return self

    def apply(self, b):
        return _checked("ILU stage", self.inner_.apply(b))


class ExactStage(BaseEstimator):
    """Sparse LU of the full matrix; used to check exact-solve identities."""

    def fit(self, system, schur=None):
        self.inner_ = DirectSolver().fit(system.matrix)
        return self

    def apply(self, b):
        return self.inner_.apply(b)


class TwoStagePreconditioner(BaseEstimator):
    """Multiplicative combination of a restricted stage and a global stage."""

    def __init__(self, first=None, second=None, order="restricted-first"):
        self.first = first
        self.second = second
        self.order = order

    @classmethod
    def from_variant(cls, name, decouple=None, ilu_level=None, partition=None,
                     order="restricted-first", exact_second_stage=False):
        if name not in VARIANTS:
            raise ValueError(f"unknown preconditioner variant {name!r}; "
                             f"choose from {sorted(VARIANTS)}")
        v = dict(VARIANTS[name])
        dec = v.get("decouple", "none") if decouple is None else decouple
        level = v.get("ilu_level", 0) if ilu_level is None else ilu_level
        if dec not in DECOUPLINGS:
            raise ValueError(f"unknown decoupling {dec!r}")
        if v["solver"].startswith("block-schur") and dec != "none":
            raise ValueError("the block-Schur first stage cannot be combined with decoupling")
        stage = PressureStage if v["restriction"] == "pressure" else PressureTemperatureStage
        second = ExactStage() if exact_second_stage else ILUStage(level, partition)
        return cls(stage(v["solver"], dec), second, order)

    def fit(self, system, schur=None):
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        self.first.fit(system, schur=schur)
        self.second.fit(system, schur=schur)
        self.matrix_ = system.matrix
        self.n_first_ = 0
        self.n_second_ = 0
        return self

    def _stage(self, which, b):
        if which == "first":
            self.n_first_ += 1
            return self.first.apply(b)
        self.n_second_ += 1
        return self.second.apply(b)

    def apply(self, b):
        b = np.asarray(b, dtype=float)
        a, c = ("first", "second") if self.order == "restricted-first" else ("second", "first")
        x1 = self._stage(a, b)
        return self._stage(c, b - self.matrix_ @ x1) + x1

    __call__ = apply


def cell_partition(grid, subdomains):
    return None if subdomains <= 1 else Partition.slabs(grid, subdomains)
