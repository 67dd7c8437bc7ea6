"""Fully implicit DG(0)/TPFA assembly for thermal oil-water flow.

Per cell there are three unknowns ``(p, T, S_o)`` and three conservation laws
(water mass, energy, oil mass).  Facet fluxes use harmonic-averaged
permeability and conductivity, phase-wise upwinding and arithmetic-averaged
densities in the gravity term.  Time stepping is backward Euler.

The nonlinear system handed to Newton is the weighted and scaled one::

    [T_ref * (c_vw F_w + c_vo F_o),  F_e,  c_ref * T_ref * F_o]

whose Jacobian rows line up with the unknowns ``p``, ``T`` and ``s``.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import props as pr
from ._linearize import Lin, where
from .grid import harmonic_average

FIELDS = ("p", "T", "s")
ORDERINGS = ("field-wise", "cell-interleaved")
SOURCE_KINDS = ("injector_const_rate", "producer_const_rate", "producer_bhp", "heater")

# raw residual rows and raw unknown columns
_EQS = ("w", "e", "o")
_VARS = ("p", "T", "S")


class AssemblyError(RuntimeError):
    """Raised when a property or residual entry is not finite."""


@dataclass
class State:
    p: np.ndarray
    T: np.ndarray
    S_o: np.ndarray

    def __post_init__(self):
        self.p = np.array(self.p, dtype=float)
        self.T = np.array(self.T, dtype=float)
        self.S_o = np.array(self.S_o, dtype=float)
        if not (self.p.shape == self.T.shape == self.S_o.shape) or self.p.ndim != 1:
            raise ValueError("p, T and S_o must be 1-D arrays of equal length")

    @classmethod
    def uniform(cls, n_cells, p, T, S_o):
        return cls(np.full(n_cells, p), np.full(n_cells, T), np.full(n_cells, S_o))

    @property
    def n_cells(self):
        return self.p.size

    def copy(self):
        return State(self.p.copy(), self.T.copy(), self.S_o.copy())

    def to_vector(self, ordering="field-wise"):
        stacked = np.stack([self.p, self.T, self.S_o])
        return stacked.ravel() if ordering == "field-wise" else stacked.T.ravel()

    @classmethod
    def from_vector(cls, x, ordering="field-wise"):
        x = np.asarray(x, dtype=float)
        n = x.size // 3
        parts = x.reshape(3, n) if ordering == "field-wise" else x.reshape(n, 3).T
        return cls(parts[0], parts[1], parts[2])


@dataclass
class SourceTerm:
    """A point source spread over ``cells`` with discrete-delta ``weights``."""
    kind: str
    cells: np.ndarray
    weights: np.ndarray
    rate: float = 0.0
    p_bhp: float = 0.0
    well_index: float = 0.0
    T_inj: float = 373.15
    U: float = 0.0
    T_heater: float = 373.15

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        self.cells = np.asarray(self.cells, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.cells.shape != self.weights.shape or self.cells.size == 0:
            raise ValueError("source needs a non-empty cell set with one weight per cell")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0, rtol=1e-12):
            raise ValueError("source weights must be non-negative and sum to 1")
        if self.rate < 0 or self.U < 0 or self.well_index < 0:
            raise ValueError("rates and coefficients must be non-negative")

    @classmethod
    def in_box(cls, grid, lo, hi, kind, **params):
        """Spread a source over the cells overlapping a physical box.

        Weights are proportional to the overlapped volume, so the support of
        the discrete delta keeps its physical size under mesh refinement.
        """
        overlap = grid.box_overlap(lo, hi)
        cells = np.flatnonzero(overlap > 0)
        if cells.size == 0:
            raise ValueError(f"box {lo}-{hi} does not intersect the grid")
        w = overlap[cells]
        return cls(kind, cells, w / w.sum(), **params)


@dataclass(frozen=True)
class Scaling:
    T_ref: float
    c_ref: float
    enabled: bool = True

    @property
    def pressure_weight(self):
        return self.T_ref if self.enabled else 1.0

    @property
    def oil_weight(self):
        return self.c_ref * self.T_ref if self.enabled else 1.0

    @classmethod
    def from_initial(cls, props, T0, S_o0, enabled=True):
        c_ref = S_o0 * props.c_v_oil + (1.0 - S_o0) * props.c_v_water
        return cls(float(T0), float(c_ref), enabled)


def _as_cell_field(value, n, name):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


@dataclass
class ReservoirModel:
    grid: object
    phi: np.ndarray
    perm_x: np.ndarray
    perm_y: np.ndarray
    perm_z: np.ndarray
    props: pr.PropertyConfig = field(default_factory=pr.PropertyConfig)
    sources: list = field(default_factory=list)
    dt: float = 864000.0
    gravity: float = 0.0
    scaling: Scaling = field(default_factory=lambda: Scaling(288.706, 2302.59))
    ordering: str = "field-wise"

    def __post_init__(self):
        n = self.grid.n_cells
        self.phi = _as_cell_field(self.phi, n, "phi")
        self.perm_x = _as_cell_field(self.perm_x, n, "perm_x")
        self.perm_y = _as_cell_field(self.perm_y, n, "perm_y")
        self.perm_z = _as_cell_field(self.perm_z, n, "perm_z")
        if np.any((self.phi <= 0) | (self.phi >= 1)):
            raise ValueError("porosity must lie in (0, 1)")
        if min(self.perm_x.min(), self.perm_y.min(), self.perm_z.min()) < 0:
            raise ValueError("permeabilities must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")
        for s in self.sources:
            if s.cells.max() >= n:
                raise ValueError("source references a cell outside the grid")
        self._facet_cache = None

    @property
    def n_cells(self):
        return self.grid.n_cells

    def replace(self, **changes):
        return replace(self, **changes)

    def facet_transmissibility(self):
        """``area * K_harmonic`` per facet, with the permeability of the facet axis."""
        if self._facet_cache is None:
            g = self.grid
            perm = np.stack([self.perm_x, self.perm_y, self.perm_z])
            ax = g.facet_axis
            k_face = harmonic_average(perm[ax, g.facet_plus], perm[ax, g.facet_minus])
            self._facet_cache = g.facet_area * k_face
        return self._facet_cache


def index_map(n_cells, ordering="field-wise"):
    """Global row/column indices of each unknown field."""
    if ordering == "field-wise":
        return {f: np.arange(n_cells) + k * n_cells for k, f in enumerate(FIELDS)}
    if ordering == "cell-interleaved":
        return {f: 3 * np.arange(n_cells) + k for k, f in enumerate(FIELDS)}
    raise ValueError(f"unknown ordering {ordering!r}")


def ordering_permutation(n_cells, ordering):
    """``perm`` such that ``x_ordered = x_fieldwise[perm]``."""
    if ordering == "field-wise":
        return np.arange(3 * n_cells)
    return np.arange(3 * n_cells).reshape(3, n_cells).T.ravel()


@dataclass
class ResidualVector:
    F_w: np.ndarray
    F_e: np.ndarray
    F_o: np.ndarray


@dataclass
class BlockSystem:
    """Sparse Jacobian together with the unknown-wise index maps."""
    matrix: sp.csr_matrix
    n_cells: int
    ordering: str = "field-wise"

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.matrix.sort_indices()
        if self.matrix.shape != (3 * self.n_cells, 3 * self.n_cells):
            raise ValueError("matrix shape does not match 3 unknowns per cell")
        self._index = index_map(self.n_cells, self.ordering)

    @property
    def shape(self):
        return self.matrix.shape

    def index(self, fields):
        if isinstance(fields, str):
            fields = (fields,)
        return np.concatenate([self._index[f] for f in fields])

    def block(self, row_fields, col_fields):
        A = self.matrix[self.index(row_fields)][:, self.index(col_fields)]
        A = sp.csr_matrix(A)
        A.sort_indices()
        return A

    def reordered(self, ordering):
        if ordering == self.ordering:
            return self
        n = self.n_cells
        to_field = np.argsort(ordering_permutation(n, self.ordering))
        perm = to_field[ordering_permutation(n, ordering)]
        return BlockSystem(self.matrix[perm][:, perm], n, ordering)

    def without_coupling(self):
        """Copy with every off-diagonal unknown block set to zero."""
        n = self.n_cells
        label = np.empty(3 * n, dtype=np.int64)
        for k, f in enumerate(FIELDS):
            label[self._index[f]] = k
        A = self.matrix.tocoo()
        keep = label[A.row] == label[A.col]
        B = sp.csr_matrix((A.data[keep], (A.row[keep], A.col[keep])), shape=A.shape)
        return BlockSystem(B, n, self.ordering)


# ---------------------------------------------------------------------------
# upwinding


def driving_force(dp_over_h, rho_avg, gravity, normal_z):
    """Discrete ``[p]/|[h]| - {rho} g.n_e`` with gravity acting along ``-z``."""
    return dp_over_h - rho_avg * gravity * normal_z


def upwind_side(p_plus, p_minus, center_distance, rho_avg=0.0, gravity=0.0, axis="x"):
    """``"plus"`` when the driving force is >= 0, else ``"minus"``."""
    normal_z = 1.0 if axis in ("z", 2) else 0.0
    d = driving_force((p_plus - p_minus) / center_distance, rho_avg, gravity, normal_z)
    return "plus" if d >= 0 else "minus"


# ---------------------------------------------------------------------------
# cell and facet terms


def _check_finite(name, arr):
    bad = ~np.isfinite(arr)
    if np.any(bad):
        cell = int(np.flatnonzero(bad)[0])
        raise AssemblyError(f"non-finite {name} in cell {cell}")


def _properties(props, p, T):
    try:
        return (pr.water_density(p, T, props), pr.water_viscosity(T, props),
                pr.oil_density(p, T, props), pr.oil_viscosity(T, props))
    except pr.PropertyRangeError as exc:
        lo = int(np.argmin(T))
        raise AssemblyError(f"{exc} (min T = {T[lo]:.3f} K in cell {lo})") from exc


class _CellTerms:
    """Cell-local quantities linearised in ``(p, T, S)`` of the same cell."""

    def __init__(self, model, state):
        props = model.props
        rw, mw, ro, mo = _properties(props, state.p, state.T)
        for name, ev in (("water density", rw), ("water viscosity", mw),
                         ("oil density", ro), ("oil viscosity", mo)):
            _check_finite(name, ev.value)
        self.p = Lin.variable(state.p, "p")
        self.T = Lin.variable(state.T, "T")
        self.S = Lin.variable(state.S_o, "S")
        self.rho_w = Lin.from_prop(rw)
        self.rho_o = Lin.from_prop(ro)
        self.mu_w = Lin.from_prop(mw)
        self.mu_o = Lin.from_prop(mo)
        S_c, clipped = pr.clamp_saturation(state.S_o)
        self.kro = Lin(S_c, {"S": (~clipped).astype(float)})
        self.krw = 1.0 - self.kro
        self.lam_o = self.kro / self.mu_o
        self.lam_w = self.krw / self.mu_w
        self.mob_o = self.rho_o * self.lam_o
        self.mob_w = self.rho_w * self.lam_w
        phi = model.phi
        self.k_T = ((1.0 - phi) * props.k_T_rock
                    + phi * (self.kro * props.k_T_oil + self.krw * props.k_T_water))


def _accumulation(model, state, cells=None):
    """Mass and energy content per unit volume; Lin if ``cells`` given."""
    props = model.props
    phi = model.phi
    if cells is None:
        rw, _, ro, _ = _properties(props, state.p, state.T)
        S, T = state.S_o, state.T
        rho_w, rho_o = rw.value, ro.value
    else:
        S, T, rho_w, rho_o = cells.S, cells.T, cells.rho_w, cells.rho_o
    m_w = phi * rho_w * (1.0 - S)
    m_o = phi * rho_o * S
    e = (phi * (props.c_v_water * rho_w * (1.0 - S) + props.c_v_oil * rho_o * S) * T
         + (1.0 - phi) * props.rho_rock * props.c_v_rock * T)
    return m_w, e, m_o


def _sources(model, cells, state):
    """Signed source terms (positive = into the cell) as per-cell Lins."""
    props = model.props
    n = model.n_cells
    zero = np.zeros(n)
    out = {"w": Lin(zero.copy()), "e": Lin(zero.copy()), "o": Lin(zero.copy())}

    def scatter(eq, src, term):
        full = Lin(np.zeros(n), {})
        np.add.at(full.val, src.cells, term.val)
        for k in sorted(term.grad):
            g = np.zeros(n)
            np.add.at(g, src.cells, term.grad[k])
            full.grad[k] = g
        out[eq] = out[eq] + full

    for src in model.sources:
        c = src.cells
        w = src.weights
        if src.kind == "injector_const_rate":
            rho_inj = Lin.from_prop(pr.water_density(state.p[c], np.full(c.size, src.T_inj), props),
                                    dT_name="_unused")
            rho_inj.grad.pop("_unused", None)
            f_w = rho_inj * (src.rate * w)
            scatter("w", src, f_w)
            scatter("e", src, f_w * (props.c_v_water * src.T_inj))
        elif src.kind in ("producer_const_rate", "producer_bhp"):
            lam_o = cells.lam_o.take(c, "")
            lam_w = cells.lam_w.take(c, "")
            if src.kind == "producer_const_rate":
                total = lam_o + lam_w
                q_o = lam_o / total * (src.rate * w)
                q_w = lam_w / total * (src.rate * w)
            else:
                dp = state.p[c] - src.p_bhp
                drawdown = Lin(np.maximum(dp, 0.0), {"p": (dp > 0).astype(float)})
                q_o = lam_o * drawdown * (src.well_index * w)
                q_w = lam_w * drawdown * (src.well_index * w)
            f_o = q_o * cells.rho_o.take(c, "")
            f_w = q_w * cells.rho_w.take(c, "")
            T = cells.T.take(c, "")
            scatter("w", src, -f_w)
            scatter("o", src, -f_o)
            scatter("e", src, -(f_w * props.c_v_water + f_o * props.c_v_oil) * T)
        elif src.kind == "heater":
            T = cells.T.take(c, "")
            scatter("e", src, (src.T_heater - T) * (src.U * w))
    return out


def _facet_fluxes(model, cells):
    """Facet fluxes (plus to minus) linearised in the unknowns of both cells."""
    g = model.grid
    ip, im = g.facet_plus, g.facet_minus
    props = model.props
    trans = model.facet_transmissibility()
    inv_h = 1.0 / g.facet_distance
    normal_z = (g.facet_axis == 2).astype(float)
    dp = (cells.p.take(ip, "+") - cells.p.take(im, "-")) * inv_h

    fluxes = {}
    upwind = {}
    for phase, rho, mob, cv in (("w", cells.rho_w, cells.mob_w, props.c_v_water),
                                ("o", cells.rho_o, cells.mob_o, props.c_v_oil)):
        rho_avg = (rho.take(ip, "+") + rho.take(im, "-")) * 0.5
        drive = dp - rho_avg * (model.gravity * normal_z)
        up = drive.val >= 0
        mob_up = where(up, mob.take(ip, "+"), mob.take(im, "-"))
        mobT = mob * cells.T
        mobT_up = where(up, mobT.take(ip, "+"), mobT.take(im, "-"))
        fluxes[phase] = mob_up * drive * trans
        fluxes["e" + phase] = mobT_up * drive * (trans * cv)
        upwind[phase] = up
    kT_h = 2.0 * cells.k_T.take(ip, "+") * cells.k_T.take(im, "-") / (
        cells.k_T.take(ip, "+") + cells.k_T.take(im, "-"))
    dT = cells.T.take(ip, "+") - cells.T.take(im, "-")
    fluxes["cond"] = kT_h * dT * (g.facet_area * inv_h)
    return fluxes, upwind


def _assemble(model, state, prev_state, with_jacobian):
    n = model.n_cells
    if state.n_cells != n or prev_state.n_cells != n:
        raise ValueError("state size does not match the model grid")
    g = model.grid
    cells = _CellTerms(model, state)
    scale = g.cell_volume / model.dt

    m_w, e, m_o = _accumulation(model, state, cells)
    m_w0, e0, m_o0 = _accumulation(model, prev_state)
    acc = {"w": (m_w - m_w0) * scale, "e": (e - e0) * scale, "o": (m_o - m_o0) * scale}
    src = _sources(model, cells, state)
    fluxes, upwind = _facet_fluxes(model, cells)
    facet = {"w": [fluxes["w"]], "o": [fluxes["o"]],
             "e": [fluxes["ew"], fluxes["eo"], fluxes["cond"]]}

    res = {}
    for eq in _EQS:
        r = acc[eq].val - src[eq].val
        for fl in facet[eq]:
            r = r + np.bincount(g.facet_plus, fl.val, minlength=n)
            r = r - np.bincount(g.facet_minus, fl.val, minlength=n)
        _check_finite(f"residual F_{eq}", r)
        res[eq] = r
    out = {"residual": ResidualVector(res["w"], res["e"], res["o"]), "upwind": upwind,
           "accumulation": ResidualVector(acc["w"].val, acc["e"].val, acc["o"].val)}
    if not with_jacobian:
        return out

    rows, cols, vals = [], [], []
    cell_idx = np.arange(n)
    for ei, eq in enumerate(_EQS):
        for term, sign in ((acc[eq], 1.0), (src[eq], -1.0)):
            for vi, var in enumerate(_VARS):
                d = term.grad.get(var)
                if d is not None:
                    rows.append(ei * n + cell_idx)
                    cols.append(vi * n + cell_idx)
                    vals.append(sign * d)
        for fl in facet[eq]:
            for vi, var in enumerate(_VARS):
                for side, owner in (("+", g.facet_plus), ("-", g.facet_minus)):
                    d = fl.grad.get(var + side)
                    if d is None:
                        continue
                    rows.append(ei * n + g.facet_plus)
                    cols.append(vi * n + owner)
                    vals.append(d)
                    rows.append(ei * n + g.facet_minus)
                    cols.append(vi * n + owner)
                    vals.append(-d)
    J_raw = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(3 * n, 3 * n))
    out["jacobian_raw"] = J_raw
    return out


# ---------------------------------------------------------------------------
# public assembly API


def assemble_residual(model, state, prev_state):
    """Unweighted, unscaled per-cell residuals ``(F_w, F_e, F_o)``."""
    return _assemble(model, state, prev_state, False)["residual"]


def accumulation_residual(model, state, prev_state):
    """Only the ``(content - content_prev) V / dt`` part of each residual."""
    return _assemble(model, state, prev_state, False)["accumulation"]


def apply_weighting_and_scaling(F_w, F_e, F_o, props, scaling):
    """Row transform of the residual (vectors) or Jacobian rows (sparse matrices).

    The water row is replaced by the pressure row ``c_vw F_w + c_vo F_o``;
    then, if scaling is enabled, the pressure row is multiplied by ``T_ref``
    and the oil row by ``c_ref T_ref``.
    """
    F_p = props.c_v_water * F_w + props.c_v_oil * F_o
    return scaling.pressure_weight * F_p, F_e, scaling.oil_weight * F_o


def _weight_matrix(model):
    props, s = model.props, model.scaling
    W = np.array([[s.pressure_weight * props.c_v_water, 0.0, s.pressure_weight * props.c_v_oil],
                  [0.0, 1.0, 0.0],
                  [0.0, 0.0, s.oil_weight]])
    return sp.kron(sp.csr_matrix(W), sp.identity(model.n_cells, format="csr"), format="csr")


def residual_vector(model, state, prev_state):
    """Weighted/scaled residual in the model's unknown ordering."""
    r = assemble_residual(model, state, prev_state)
    rows = apply_weighting_and_scaling(r.F_w, r.F_e, r.F_o, model.props, model.scaling)
    x = np.concatenate(rows)
    return x[ordering_permutation(model.n_cells, model.ordering)]


def linearize(model, state, prev_state):
    """Weighted/scaled residual vector and Jacobian, assembled together."""
    out = _assemble(model, state, prev_state, True)
    r = out["residual"]
    n = model.n_cells
    perm = ordering_permutation(n, model.ordering)
    F = np.concatenate(apply_weighting_and_scaling(r.F_w, r.F_e, r.F_o,
                                                   model.props, model.scaling))[perm]
    J = _weight_matrix(model) @ out["jacobian_raw"]
    J = sp.csr_matrix(J)[perm][:, perm]
    return F, BlockSystem(J, n, model.ordering)


def assemble_jacobian(model, state, prev_state):
    """Analytic Jacobian of the weighted/scaled residual (upwinding frozen)."""
    return linearize(model, state, prev_state)[1]


def assemble_schur_approx(model, state):
    """Sparse temperature-space approximation of the pressure-temperature Schur complement.

    It is the energy operator with coefficients frozen at ``state``:
    heat capacity over dt, upwinded advection of ``delta T`` by the current
    Darcy fluxes, harmonic-averaged conduction, heater coefficients and the
    energy carried out by producers.  No density derivatives enter.
    """
    n = model.n_cells
    g = model.grid
    props = model.props
    cells = _CellTerms(model, state)
    phi = model.phi
    S = state.S_o
    diag = g.cell_volume / model.dt * (
        phi * (props.c_v_water * (1.0 - S) * cells.rho_w.val + props.c_v_oil * S * cells.rho_o.val)
        + (1.0 - phi) * props.rho_rock * props.c_v_rock)

    for src in model.sources:
        c, w = src.cells, src.weights
        if src.kind == "heater":
            np.add.at(diag, c, src.U * w)
        elif src.kind in ("producer_const_rate", "producer_bhp"):
            lam_o, lam_w = cells.lam_o.val[c], cells.lam_w.val[c]
            if src.kind == "producer_const_rate":
                q_o = src.rate * w * lam_o / (lam_o + lam_w)
                q_w = src.rate * w * lam_w / (lam_o + lam_w)
            else:
                dd = np.maximum(state.p[c] - src.p_bhp, 0.0)
                q_o = src.well_index * w * lam_o * dd
                q_w = src.well_index * w * lam_w * dd
            np.add.at(diag, c, props.c_v_water * q_w * cells.rho_w.val[c]
                      + props.c_v_oil * q_o * cells.rho_o.val[c])

    ip, im = g.facet_plus, g.facet_minus
    trans = model.facet_transmissibility()
    normal_z = (g.facet_axis == 2).astype(float)
    dp = (state.p[ip] - state.p[im]) / g.facet_distance
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [diag]
    for rho, mob, cv in ((cells.rho_w.val, cells.mob_w.val, props.c_v_water),
                         (cells.rho_o.val, cells.mob_o.val, props.c_v_oil)):
        drive = driving_force(dp, 0.5 * (rho[ip] + rho[im]), model.gravity, normal_z)
        up = drive >= 0
        owner = np.where(up, ip, im)
        coef = trans * cv * mob[owner] * drive
        rows += [ip, im]
        cols += [owner, owner]
        vals += [coef, -coef]
    kT = cells.k_T.val
    cond = harmonic_average(kT[ip], kT[im]) * g.facet_area / g.facet_distance
    rows += [ip, ip, im, im]
    cols += [ip, im, im, ip]
    vals += [cond, -cond, cond, -cond]
    S_T = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n, n))
    S_T.sort_indices()
    return S_T
