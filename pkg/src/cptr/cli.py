"""Command line entry point: ``run``, ``oracle`` and ``export-matrix``."""
import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import ConfigError, build_case, load_config, run_case, run_oracle
from .discretization import assemble_schur_approx, linearize
from .precond import VARIANTS
from .solver import DAY, Schedule, SimulationAborted, time_loop
from .sparse import write_matrix_market


def _add_config(p):
    p.add_argument("--config", required=True, help="key = value case file")


def _parser():
    ap = argparse.ArgumentParser(prog="cptr", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a case and write CSV/JSON metrics")
    _add_config(run)
    run.add_argument("--case")
    run.add_argument("--n", type=int)
    run.add_argument("--precond", choices=sorted(VARIANTS))
    run.add_argument("--decouple", choices=("none", "qi", "ti"))
    run.add_argument("--ilu-level", type=int, choices=(0, 1))
    run.add_argument("--subdomains", type=int)
    run.add_argument("--coupling-factor", type=float)
    run.add_argument("--dt", type=float, help="time step in days")
    run.add_argument("--steps", type=int)
    run.add_argument("--order", choices=("restricted-first", "ilu-first"))
    run.add_argument("--scaling", choices=("on", "off"))
    run.add_argument("--out")

    oracle = sub.add_parser("oracle", help="Schur-complement condition numbers")
    _add_config(oracle)
    oracle.add_argument("--out")

    export = sub.add_parser("export-matrix", help="write the Jacobian of step k in Matrix Market format")
    _add_config(export)
    export.add_argument("--step", type=int, default=1)
    export.add_argument("--out", default="matrix")
    return ap


def _run(args):
    cfg = load_config(
        args.config, case=args.case, n=args.n, precond=args.precond, decouple=args.decouple,
        ilu_level=args.ilu_level, subdomains=args.subdomains,
        coupling_factor=args.coupling_factor, dt_days=args.dt, steps=args.steps,
        order=args.order, scaling=None if args.scaling is None else args.scaling == "on",
        out=args.out)
    result = run_case(cfg)
    s = result.summary
    print(f"{cfg.case} N={cfg.n} {cfg.precond}: status={s['status']} steps={s['steps']} "
          f"newton={s['newton_iters']} linear={s['total_linear_iters']} "
          f"avg={s['avg_linear_per_newton']:.3f}")
    if s["status"] != "ok":
        print(s["message"], file=sys.stderr)
        return 1
    return 0


def _oracle(args):
    res = run_oracle(load_config(args.config))
    text = json.dumps(res, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _export(args):
    if args.step < 1:
        raise ConfigError("--step counts from 1")
    cfg = load_config(args.config)
    model, state, precond, schedule = build_case(cfg)
    if args.step > 1:
        state, _ = time_loop(model, state, precond,
                             Schedule(cfg.dt_days * DAY, args.step - 1))
    F, system = linearize(model, state, state)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    note = f"{cfg.case} n={cfg.n} step={args.step} ordering={system.ordering}"
    write_matrix_market(out.with_name(out.name + "_A.mtx"), system.matrix, note)
    write_matrix_market(out.with_name(out.name + "_S_T.mtx"),
                        assemble_schur_approx(model, state), note)
    write_matrix_market(out.with_name(out.name + "_F.mtx"), F.reshape(-1, 1), note)
    print(f"wrote {out}_A.mtx, {out}_S_T.mtx, {out}_F.mtx")
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return {"run": _run, "oracle": _oracle, "export-matrix": _export}[args.command](args)
    except (ConfigError, SimulationAborted, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
