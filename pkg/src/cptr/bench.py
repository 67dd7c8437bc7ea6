"""Case catalogue, configuration files, metrics output and the Schur oracle."""
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .discretization import (ReservoirModel, Scaling, SourceTerm, State,
                             assemble_jacobian, assemble_schur_approx)
from .grid import StructuredGrid
from .precond import VARIANTS, TwoStagePreconditioner, cell_partition
from .props import PropertyConfig, oil_density
from .solver import DAY, NewtonConfig, Schedule, SimulationAborted, time_loop

log = logging.getLogger(__name__)

MILLIDARCY = 9.869233e-16
CASES = ("heater-2d", "well-2d-iso", "well-2d-aniso", "well-3d", "crosscoup-2d", "spe10-slice")
# 1.8e-3 m^3/s spread over 20 layers of 0.6096 m: the per-layer rate of a full-height well
SLICE_RATE = 9e-5
CSV_COLUMNS = ("step", "dt", "newton_iters", "total_linear_iters", "avg_linear_per_newton",
               "res_pressure", "res_energy", "res_oil", "wall_time")


class ConfigError(ValueError):
    pass


class FieldFileError(ValueError):
    pass


@dataclass
class CaseConfig:
    case: str = "well-2d-iso"
    n: int = 20
    nx: int = 0
    ny: int = 0
    nz: int = 0
    Lx: float = 0.0
    Ly: float = 0.0
    Lz: float = 0.0
    porosity: float = 0.2
    poro_file: str = ""
    perm: float = 3e-13
    perm_x: float = 0.0
    perm_y: float = 0.0
    perm_z: float = 0.0
    perm_file: str = ""
    perm_unit: str = "m2"
    perm_multiplier: float = 1.0
    p0: float = 4.1369e7
    T0: float = 288.706
    So0: float = 0.9
    dt_days: float = 10.0
    steps: int = 2
    adaptive: bool = False
    precond: str = "cpr-amg"
    decouple: str = ""
    ilu_level: int = -1
    subdomains: int = 1
    order: str = "restricted-first"
    scaling: bool = True
    exact_second_stage: bool = False
    ordering: str = "field-wise"
    coupling_factor: float = 1.0
    gravity: float = -1.0
    rate: float = 0.0
    T_inj: float = 373.15
    U_heater: float = 10.0
    T_heater: float = 373.15
    layout: str = ""
    sources: bool = True
    seed: int = 2
    out: str = ""

    def __post_init__(self):
        if self.case not in CASES:
            raise ConfigError(f"unknown case {self.case!r}; choose from {CASES}")
        if self.precond not in VARIANTS:
            raise ConfigError(f"unknown preconditioner {self.precond!r}; "
                              f"choose from {sorted(VARIANTS)}")
        if self.decouple not in ("", "none", "qi", "ti"):
            raise ConfigError(f"decouple must be none, qi or ti, got {self.decouple!r}")
        if self.order not in ("restricted-first", "ilu-first"):
            raise ConfigError(f"unknown stage order {self.order!r}")
        if self.order == "ilu-first" and not self.scaling:
            raise ConfigError("the ilu-first stage order requires equation scaling")
        if self.perm_unit not in ("m2", "millidarcy"):
            raise ConfigError("perm_unit must be m2 or millidarcy")
        for name in ("poro_file", "perm_file"):
            path = getattr(self, name)
            if path and not Path(path).is_file():
                raise ConfigError(f"{name} {path!r} does not exist")
        if self.n < 1 or self.steps < 1 or self.dt_days <= 0 or self.subdomains < 1:
            raise ConfigError("n, steps, dt_days and subdomains must be positive")

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


# case-specific defaults applied before the config file's own keys
CASE_DEFAULTS = {
    "heater-2d": dict(),
    "well-2d-iso": dict(),
    "well-2d-aniso": dict(perm_y=3e-10),
    "well-3d": dict(So0=0.99, steps=5, rate=1e-7),
    "crosscoup-2d": dict(n=40, dt_days=2.0),
    "spe10-slice": dict(layout="well", steps=1),
}


def _coerce(name, raw, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name} (expected {typ.__name__})") from None


def parse_config_text(text, base_dir=None):
    """Parse ``key = value`` lines (``#`` starts a comment) into a dict."""
    types = {f.name: f.type for f in fields(CaseConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        val = _coerce(key, value, types[key])
        if key in ("poro_file", "perm_file") and val and base_dir is not None:
            p = Path(val)
            val = str(p if p.is_absolute() else Path(base_dir) / p)
        out[key] = val
    return out


def make_config(values=None, **overrides):
    """Case defaults, then ``values`` (from a file), then non-None overrides."""
    merged = dict(values or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    case = merged.get("case", CaseConfig.case)
    params = dict(CASE_DEFAULTS.get(case, {}))
    params.update(merged)
    return CaseConfig(**params)


def load_config(path, **overrides):
    path = Path(path)
    values = parse_config_text(path.read_text(), base_dir=path.parent)
    return make_config(values, **overrides)


# ---------------------------------------------------------------------------
# field files


def load_field_file(path, nx, ny, nz, unit="m2", components=1):
    """Whitespace-separated values, x fastest, then y, then z.

    ``components=3`` reads per-axis permeability (all x values, then y, then
    z) and returns an array of shape ``(3, n)``.
    """
    if unit not in ("m2", "millidarcy"):
        raise FieldFileError(f"unknown unit {unit!r}")
    expected = nx * ny * nz * components
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        for col, tok in enumerate(line.split(), 1):
            try:
                values.append(float(tok))
            except ValueError:
                raise FieldFileError(f"{path}: non-numeric token {tok!r} "
                                     f"at line {lineno}, field {col}") from None
    if len(values) != expected:
        raise FieldFileError(f"{path}: expected {expected} values, found {len(values)}")
    arr = np.array(values)
    if unit == "millidarcy":
        arr = arr * MILLIDARCY
    return arr.reshape(components, -1) if components > 1 else arr


def write_field_file(path, values, per_line=6):
    values = np.asarray(values, dtype=float).ravel()
    lines = [" ".join(repr(float(v)) for v in values[i:i + per_line])
             for i in range(0, values.size, per_line)]
    Path(path).write_text("\n".join(lines) + "\n")


def synthetic_layered_field(nx, ny, seed=2, mean_md=100.0, log_std=2.0, corr=(1.0, 4.0)):
    """Deterministic lognormal permeability (m^2) and porosity for a 2D slice.

    Stands in for field data when none is supplied: channel-like structures
    come from smoothing white noise more strongly along y than along x.
    """
    rng = np.random.default_rng(seed)
    g = gaussian_filter(rng.standard_normal((ny, nx)), sigma=(corr[1], corr[0]), mode="wrap")
    g = (g - g.mean()) / g.std()
    perm = mean_md * MILLIDARCY * np.exp(log_std * g)
    phi = np.clip(0.2 * np.exp(0.15 * g), 0.05, 0.35)
    return perm.ravel(), phi.ravel()


# ---------------------------------------------------------------------------
# case construction


def _grid(cfg):
    n = cfg.n
    if cfg.case == "well-3d":
        dims, ext = (n, n, n), (50.0, 50.0, 50.0)
    elif cfg.case == "spe10-slice":
        dims, ext = (60, 120, 1), (365.76, 365.76, 0.6096)
    else:
        dims, ext = (n, n, 1), (50.0, 50.0, 1.0)
    dims = tuple(d if d else dd for d, dd in zip((cfg.nx, cfg.ny, cfg.nz), dims))
    ext = tuple(e if e else ee for e, ee in zip((cfg.Lx, cfg.Ly, cfg.Lz), ext))
    return StructuredGrid(*dims, *ext)


def _side_boxes(grid, size=2.5):
    """Three source boxes on each of the two x-sides of a square 2D domain."""
    Lz = grid.Lz
    ys = (10.0, 22.5, 37.5)
    left = [((0.0, y, 0.0), (size, y + size, Lz)) for y in ys]
    right = [((grid.Lx - size, y, 0.0), (grid.Lx, y + size, Lz)) for y in ys]
    return left, right


WELL_3D_CENTERS = [(x, y) for x in (5.0, 15.0, 25.0, 35.0, 45.0) for y in (5.0, 15.0, 25.0, 35.0, 45.0)
                   if not (x in (5.0, 45.0) and y in (5.0, 45.0))]


def _sources(cfg, grid, perm):
    if not cfg.sources:
        return []
    case = cfg.case
    out = []
    well = dict(T_inj=cfg.T_inj)
    if case in ("heater-2d", "well-2d-iso", "well-2d-aniso", "crosscoup-2d"):
        left, right = _side_boxes(grid)
        q = cfg.rate or 3e-7
        if case == "heater-2d":
            for lo, hi in left + right:
                out.append(SourceTerm.in_box(grid, lo, hi, "heater", U=cfg.U_heater,
                                             T_heater=cfg.T_heater))
        else:
            for lo, hi in left:
                out.append(SourceTerm.in_box(grid, lo, hi, "injector_const_rate", rate=q, **well))
            for lo, hi in right:
                out.append(SourceTerm.in_box(grid, lo, hi, "producer_const_rate", rate=q))
    elif case == "well-3d":
        q = cfg.rate or 1e-7
        h = 2.5
        for x, y in WELL_3D_CENTERS:
            lo_xy, hi_xy = (x - h / 2, y - h / 2), (x + h / 2, y + h / 2)
            out.append(SourceTerm.in_box(grid, (*lo_xy, grid.Lz - h), (*hi_xy, grid.Lz),
                                         "injector_const_rate", rate=q, **well))
            out.append(SourceTerm.in_box(grid, (*lo_xy, 0.0), (*hi_xy, h),
                                         "producer_const_rate", rate=q))
    elif case == "spe10-slice":
        inj, prod = _slice_well_cells(grid, perm)
        layout = cfg.layout or "well"
        q = cfg.rate or SLICE_RATE
        for cell, role in ((inj, "inj"), (prod, "prod")):
            if "well" in layout:
                kind = "injector_const_rate" if role == "inj" else "producer_const_rate"
                extra = well if role == "inj" else {}
                out.append(SourceTerm(kind, [cell], [1.0], rate=q, **extra))
            if "heater" in layout:
                out.append(SourceTerm("heater", [cell], [1.0], U=cfg.U_heater,
                                      T_heater=cfg.T_heater))
    return out


def _slice_well_cells(grid, perm):
    """Highest-permeability cell in the lower and in the upper quarter of the slice."""
    _, j, _ = grid.cell_ijk(np.arange(grid.n_cells))
    quarter = grid.ny // 4
    lower = np.flatnonzero(j < quarter)
    upper = np.flatnonzero(j >= grid.ny - quarter)
    return int(lower[np.argmax(perm[lower])]), int(upper[np.argmax(perm[upper])])


def _hydrostatic_pressure(cfg, grid, props, gravity):
    """Oil-phase hydrostatic column with ``p0`` in the top layer."""
    p = np.full(grid.n_cells, cfg.p0)
    if gravity == 0 or grid.nz == 1:
        return p
    h = grid.spacing[2]
    layer = np.empty(grid.nz)
    layer[-1] = cfg.p0
    T = np.array([cfg.T0])
    for k in range(grid.nz - 2, -1, -1):
        above = layer[k + 1]
        rho_above = oil_density(np.array([above]), T, props).value[0]
        guess = above
        for _ in range(20):
            rho = oil_density(np.array([guess]), T, props).value[0]
            guess = above + h * gravity * 0.5 * (rho + rho_above)
        layer[k] = guess
    _, _, kk = grid.cell_ijk(np.arange(grid.n_cells))
    return layer[kk]


def build_case(cfg):
    """Return ``(model, initial_state, precond_prototype, schedule)``."""
    grid = _grid(cfg)
    n = grid.n_cells
    props = PropertyConfig(coupling_factor=cfg.coupling_factor)
    phi = np.full(n, cfg.porosity)
    kx = np.full(n, cfg.perm_x or cfg.perm)
    ky = np.full(n, cfg.perm_y or cfg.perm)
    kz = np.full(n, cfg.perm_z or cfg.perm)
    if cfg.case == "spe10-slice" and not cfg.perm_file:
        k, phi_s = synthetic_layered_field(grid.nx, grid.ny, seed=cfg.seed)
        kx, ky, kz = k.copy(), k.copy(), k.copy()
        if not cfg.poro_file:
            phi = phi_s
    if cfg.perm_file:
        per_axis = _count_values(cfg.perm_file) == 3 * n
        k = load_field_file(cfg.perm_file, *grid.shape, unit=cfg.perm_unit,
                            components=3 if per_axis else 1)
        kx, ky, kz = (k[0], k[1], k[2]) if per_axis else (k, k.copy(), k.copy())
    if cfg.poro_file:
        phi = load_field_file(cfg.poro_file, *grid.shape)
    kx, ky, kz = (a * cfg.perm_multiplier for a in (kx, ky, kz))
    gravity = cfg.gravity if cfg.gravity >= 0 else (9.81 if grid.dim == 3 else 0.0)
    scaling = Scaling.from_initial(props, cfg.T0, cfg.So0, enabled=cfg.scaling)
    model = ReservoirModel(grid, phi, kx, ky, kz, props, _sources(cfg, grid, kx),
                           dt=cfg.dt_days * DAY, gravity=gravity, scaling=scaling,
                           ordering=cfg.ordering)
    state = State(_hydrostatic_pressure(cfg, grid, props, gravity), np.full(n, cfg.T0),
                  np.full(n, cfg.So0))
    precond = TwoStagePreconditioner.from_variant(
        cfg.precond, decouple=cfg.decouple or None,
        ilu_level=None if cfg.ilu_level < 0 else cfg.ilu_level,
        partition=cell_partition(grid, cfg.subdomains), order=cfg.order,
        exact_second_stage=cfg.exact_second_stage)
    schedule = Schedule(cfg.dt_days * DAY, cfg.steps, adaptive=cfg.adaptive)
    return model, state, precond, schedule


def _count_values(path):
    return len(Path(path).read_text().split())


# ---------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    config: CaseConfig
    rows: list
    summary: dict
    stats: object
    final_state: object

    @property
    def avg_linear_per_newton(self):
        return self.summary["avg_linear_per_newton"]


def run_case(cfg, newton=NewtonConfig(), write=True):
    """Run a case; write CSV and JSON outputs if ``cfg.out`` is set."""
    model, state, precond, schedule = build_case(cfg)
    rows = []
    clock = [time.perf_counter()]

    def record(new_state, rec):
        now = time.perf_counter()
        rows.append({
            "step": rec.step, "dt": rec.dt, "newton_iters": rec.newton_iterations,
            "total_linear_iters": rec.total_linear,
            "avg_linear_per_newton": rec.total_linear / max(rec.newton_iterations, 1),
            "res_pressure": rec.residual_norms.get("pressure", 0.0),
            "res_energy": rec.residual_norms.get("energy", 0.0),
            "res_oil": rec.residual_norms.get("oil", 0.0),
            "wall_time": now - clock[0],
        })
        clock[0] = now

    status, message = "ok", ""
    try:
        final, stats = time_loop(model, state, precond, schedule, newton, on_step=record)
    except SimulationAborted as exc:
        status, message, stats, final = "aborted", str(exc), exc.stats, None
    newton_total = stats.newton_iterations
    summary = {
        "status": status, "message": message,
        "steps": len(stats.steps), "failed_attempts": len(stats.failures),
        "newton_iters": newton_total, "total_linear_iters": stats.linear_iterations,
        "avg_linear_per_newton": stats.avg_linear_per_newton,
        "max_linear_iters": stats.max_linear,
        "linear_iters_per_newton": [s.linear_iterations for s in stats.steps],
        "config": asdict(cfg),
    }
    result = RunResult(cfg, rows, summary, stats, final)
    if write and cfg.out:
        write_outputs(result, cfg.out)
    return result


def write_outputs(result, out):
    out = Path(out)
    csv_path = out if out.suffix == ".csv" else out.with_suffix(".csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for row in result.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    csv_path.with_suffix(".json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    return csv_path


# ---------------------------------------------------------------------------
# Schur-complement oracle


def _cond_of_product(S_approx, S_exact):
    try:
        M = np.linalg.solve(S_approx, S_exact)
    except np.linalg.LinAlgError:
        return float("inf")
    if not np.all(np.isfinite(M)):
        return float("inf")
    return float(np.linalg.cond(M))


def schur_condition_oracle(model, state, max_cells=2500):
    """Dense 2-norm condition numbers of ``S~^{-1} S_T`` for three approximations."""
    n = model.n_cells
    if n > max_cells:
        raise ValueError(f"oracle is dense; {n} cells exceeds the limit of {max_cells}")
    system = assemble_jacobian(model, state, state)
    A_pp = system.block("p", "p").toarray()
    A_pT = system.block("p", "T").toarray()
    A_Tp = system.block("T", "p").toarray()
    A_TT = system.block("T", "T").toarray()
    S_T = A_TT - A_Tp @ np.linalg.solve(A_pp, A_pT)
    S_diag = A_TT - A_Tp @ (A_pT / np.diag(A_pp)[:, None])
    S_tilde = assemble_schur_approx(model, state).toarray()
    return {
        "S_diag": _cond_of_product(S_diag, S_T),
        "S_ATT": _cond_of_product(A_TT, S_T),
        "S_T": _cond_of_product(S_tilde, S_T),
        "cond_S_T": float(np.linalg.cond(S_T)),
        "cond_A_TT": float(np.linalg.cond(A_TT)),
    }


def run_oracle(cfg, newton=NewtonConfig()):
    """Advance the case by its schedule, then evaluate the Schur oracle there."""
    model, state, precond, schedule = build_case(cfg)
    final, _ = time_loop(model, state, precond, schedule, newton)
    return schur_condition_oracle(model, final)
