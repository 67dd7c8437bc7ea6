"""Newton with backtracking line search, and a time loop with step-size control."""
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import clone

from .discretization import AssemblyError, State, assemble_schur_approx, linearize, residual_vector
from .sparse import DirectSolver, SolverError, gmres

log = logging.getLogger(__name__)

DAY = 86400.0


@dataclass(frozen=True)
class NewtonConfig:
    rtol_f: float = 1e-8
    rtol_step: float = 1e-8
    max_newton: int = 20
    max_halvings: int = 8
    armijo: float = 1e-4
    gmres_rtol: float = 1e-8
    gmres_maxit: int = 200
    gmres_restart: int = None
    # "gmres" (preconditioned) or "direct" (sparse LU, no Krylov iterations)
    linear_solver: str = "gmres"

    def __post_init__(self):
        if min(self.rtol_f, self.rtol_step, self.gmres_rtol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_newton < 1 or self.gmres_maxit < 1 or self.max_halvings < 0:
            raise ValueError("iteration limits must be positive")
        if self.linear_solver not in ("gmres", "direct"):
            raise ValueError("linear_solver must be 'gmres' or 'direct'")


@dataclass
class StepStats:
    step: int
    time: float
    dt: float
    newton_iterations: int
    linear_iterations: list
    converged: bool
    residual_norms: dict = field(default_factory=dict)
    cuts: int = 0
    reason: str = ""

    @property
    def total_linear(self):
        return int(sum(self.linear_iterations))


@dataclass
class SolveStats:
    steps: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def newton_iterations(self):
        return sum(s.newton_iterations for s in self.steps)

    @property
    def linear_iterations(self):
        return sum(s.total_linear for s in self.steps)

    @property
    def avg_linear_per_newton(self):
        n = self.newton_iterations
        return self.linear_iterations / n if n else 0.0

    @property
    def max_linear(self):
        its = [i for s in self.steps for i in s.linear_iterations]
        return max(its) if its else 0


class SimulationAborted(RuntimeError):
    def __init__(self, message, stats):
        super().__init__(message)
        self.stats = stats


def _needs_schur(precond):
    first = getattr(precond, "first", None)
    return str(getattr(first, "solver", "")).startswith("block-schur")


def _equation_norms(F, model):
    from .discretization import index_map
    idx = index_map(model.n_cells, model.ordering)
    return {name: float(np.linalg.norm(F[idx[f]]))
            for name, f in (("pressure", "p"), ("energy", "T"), ("oil", "s"))}


def _safe_residual(model, state, prev):
    try:
        F = residual_vector(model, state, prev)
    except AssemblyError:
        return None
    return F if np.all(np.isfinite(F)) else None


def newton_solve(model, prev_state, precond=None, cfg=NewtonConfig(), guess=None, step=0, time=0.0):
    """Advance one backward-Euler step.

    ``precond`` is an unfitted preconditioner prototype; a fresh clone is fit
    to every Jacobian.  Returns ``(state, StepStats)``; on failure the
    statistics carry ``converged=False`` and a reason.
    """
    if precond is not None and getattr(precond, "order", "") == "ilu-first" \
            and not model.scaling.enabled:
        raise ValueError("the ilu-first stage order requires equation scaling")
    ordering = model.ordering
    state = (guess or prev_state).copy()
    x = state.to_vector(ordering)
    rec = StepStats(step, time, model.dt, 0, [], False)

    F = _safe_residual(model, state, prev_state)
    if F is None:
        rec.reason = "initial residual not finite"
        return state, rec
    f0 = np.linalg.norm(F)
    fnorm = f0
    if f0 == 0.0:
        rec.converged = True
        rec.residual_norms = _equation_norms(F, model)
        return state, rec

    for _ in range(cfg.max_newton):
        try:
            F, system = linearize(model, state, prev_state)
            if cfg.linear_solver == "direct":
                dx = -DirectSolver().fit(system.matrix).apply(F)
                lin_its, lin_ok = 0, True
            else:
                M = None
                if precond is not None:
                    schur = assemble_schur_approx(model, state) if _needs_schur(precond) else None
                    M = clone(precond).fit(system, schur=schur)
                res = gmres(system.matrix, -F, M, cfg.gmres_rtol, cfg.gmres_maxit,
                            cfg.gmres_restart)
                dx, lin_its, lin_ok = res.x, res.iterations, res.converged
        except (SolverError, AssemblyError, RuntimeError) as exc:
            rec.reason = f"linear solve failed: {exc}"
            return state, rec
        rec.newton_iterations += 1
        rec.linear_iterations.append(int(lin_its))
        if not lin_ok:
            rec.reason = f"GMRES did not converge in {lin_its} iterations"
            return state, rec

        lam = 1.0
        best = None
        for _ in range(cfg.max_halvings + 1):
            trial = State.from_vector(x + lam * dx, ordering)
            Ft = _safe_residual(model, trial, prev_state)
            ft = np.inf if Ft is None else np.linalg.norm(Ft)
            if best is None or ft < best[1]:
                best = (lam, ft, trial, Ft)
            if ft <= (1.0 - cfg.armijo * lam) * fnorm:
                break
            lam *= 0.5
        lam, ft, trial, Ft = best
        if not np.isfinite(ft) or ft >= fnorm:
            rec.reason = "line search found no decrease"
            return state, rec
        step_norm = lam * np.linalg.norm(dx)
        state, F, fnorm = trial, Ft, ft
        x = state.to_vector(ordering)
        if fnorm / f0 <= cfg.rtol_f or step_norm / max(np.linalg.norm(x), 1e-300) <= cfg.rtol_step:
            rec.converged = True
            break
    else:
        rec.reason = f"no convergence in {cfg.max_newton} Newton iterations"
    rec.residual_norms = _equation_norms(F, model)
    return state, rec


@dataclass(frozen=True)
class Schedule:
    """Nominal step ``dt`` (s) repeated ``n_steps`` times.

    With ``adaptive`` the step grows by 1.5 after easy steps (at most 5 Newton
    iterations), capped at ``dt_max``.  A failed step is always retried with
    half the step, at most ``max_cuts`` times in a row.
    """
    dt: float
    n_steps: int
    adaptive: bool = False
    dt_max: float = None
    max_cuts: int = 5
    growth: float = 1.5
    easy_newton: int = 5

    @property
    def end_time(self):
        return self.dt * self.n_steps


def time_loop(model, initial_state, precond=None, schedule=None, cfg=NewtonConfig(),
              on_step=None):
    """Run ``schedule`` and return ``(final_state, SolveStats)``.

    Step targets are multiples of the nominal ``dt`` when not adaptive, so a
    cut step is completed with sub-steps.  Raises ``SimulationAborted`` after
    ``max_cuts`` consecutive cuts.
    """
    if schedule is None:
        schedule = Schedule(model.dt, 1)
    dt_max = schedule.dt_max or schedule.dt
    stats = SolveStats()
    state = initial_state.copy()
    t = 0.0
    dt = schedule.dt
    end = schedule.end_time
    cuts = 0
    k = 0
    while t < end * (1 - 1e-12):
        if not schedule.adaptive:
            target = (np.floor(t / schedule.dt * (1 + 1e-12)) + 1) * schedule.dt
            dt = min(dt, target - t)
        dt = min(dt, end - t)
        new, rec = newton_solve(model.replace(dt=dt), state, precond, cfg, step=k, time=t + dt)
        if not rec.converged:
            stats.failures.append(rec)
            cuts += 1
            log.info("step %d failed at dt=%.4g s: %s", k, dt, rec.reason)
            if cuts > schedule.max_cuts:
                raise SimulationAborted(
                    f"step {k} failed after {schedule.max_cuts} cuts (dt={dt:.4g} s): {rec.reason}",
                    stats)
            dt *= 0.5
            continue
        rec.cuts = cuts
        cuts = 0
        stats.steps.append(rec)
        if on_step is not None:
            on_step(new, rec)
        state = new
        t += dt
        k += 1
        if schedule.adaptive and rec.newton_iterations <= schedule.easy_newton:
            dt = min(schedule.growth * dt, dt_max)
        elif not schedule.adaptive:
            dt = schedule.dt
    return state, stats
