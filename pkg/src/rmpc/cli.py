"""Command line entry point: ``rmpc <command> --config cfg.json --out dir``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from rmpc import config as cfgmod
from rmpc.bounds import compute_bounds, load_bounds, save_bounds
from rmpc.errors import (ConfigError, DimensionError, InitializationError, InvariantViolation,
                         RangeError, StabilityError)
from rmpc.mpc import OfflineData, horizon_length
from rmpc.prediction import build_stacks
from rmpc.terminal import TerminalIngredients, compute_terminal

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("rmpc")


def _dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _terminal(cfg, cache: Path | None) -> TerminalIngredients:
    path = cache / f"terminal-{cfg.digest()}.json" if cache else None
    if path is not None and path.exists():
        with open(path, encoding="utf-8") as fh:
            return TerminalIngredients.from_dict(json.load(fh))
    term = compute_terminal(cfg.system, cfg.K, max_iter=cfg.terminal_max_iter)
    if path is not None:
        _dump(term.to_dict(), path)
    return term


def _bounds(cfg, term, cache: Path | None) -> dict:
    path = cache / f"bounds-{cfg.digest()}.json" if cache else None
    if path is not None and path.exists():
        return load_bounds(path)
    sysN = cfg.system.with_terminal_set(term.XN)
    out = {}
    for Nt in range(2, cfg.system.N + 1):
        n_cut = min(cfg.bounds.N_cut or Nt, Nt)
        out[Nt] = compute_bounds(sysN, build_stacks(sysN, Nt), cfg.bounds.method, n_cut)
    if path is not None:
        save_bounds(out, path)
    return out


def _offline(cfg, cache) -> OfflineData:
    term = _terminal(cfg, cache)
    return OfflineData.build(cfg.system, terminal=term, bounds=_bounds(cfg, term, cache), options=cfg.mpc)


def cmd_terminal_set(cfg, args) -> int:
    t0 = time.perf_counter()
    term = compute_terminal(cfg.system, cfg.K, max_iter=cfg.terminal_max_iter)
    print(f"converged in {term.iterations} iterations "
          f"({term.XN.n_rows} facets, {time.perf_counter() - t0:.2f} s)")
    _dump(term.to_dict(), args.out / "terminal.json")
    return EXIT_OK


def cmd_bounds(cfg, args) -> int:
    term = _terminal(cfg, args.cache)
    t0 = time.perf_counter()
    table = _bounds(cfg, term, args.cache)
    save_bounds(table, args.out / "bounds.json")
    print(f"bounds for Nt = {sorted(table)} ({cfg.bounds.method}) in {time.perf_counter() - t0:.2f} s")
    return EXIT_OK


def cmd_solve(cfg, args) -> int:
    off = _offline(cfg, args.cache)
    x = np.array([float(v) for v in args.x.split(",")])
    if x.size != cfg.system.d:
        raise DimensionError(f"--x has {x.size} entries, expected {cfg.system.d}")
    Nt = args.Nt if args.Nt is not None else horizon_length(0, cfg.system.N)
    res, pol, dt = off.solve(x, Nt, 0)
    out = {"x": x.tolist(), "Nt": Nt, "status": res.status.value, "solve_time_s": dt,
           "objective": res.objective, "ubar": None if pol is None else pol.ubar.tolist(),
           "M": None if pol is None else pol.M.tolist()}
    _dump(out, args.out / "solve.json")
    print(f"status {res.status.value}, objective {res.objective}")
    return EXIT_OK if res.optimal else EXIT_INFEASIBLE


def cmd_simulate(cfg, args) -> int:
    from rmpc.sim import feasible_initial_states, plan_runs, run_suite, write_summary

    off = _offline(cfg, args.cache)
    sc = cfg.sim
    if sc.x0 is not None:
        x0s = np.asarray(sc.x0, dtype=float)
        for x in x0s:
            if not off.solve(x, horizon_length(0, cfg.system.N), 0)[0].optimal:
                raise InitializationError(f"initial state {x.tolist()} is infeasible at t = 0")
    else:
        x0s = feasible_initial_states(off, sc.n_initial, seed=args.seed)
    specs = plan_runs(x0s, sc.runs, seed=args.seed, realizations=sc.realizations, disturbances=sc.disturbances)
    summ = run_suite(off, specs, sc.T, workers=args.workers)
    write_summary(summ, args.out / "simulate.json")
    print(f"{summ.runs} runs, {summ.violations} violations, min margin {summ.min_margin:.3e}, "
          f"{summ.backup_uses} backup steps, {summ.wall_time:.1f} s")
    if summ.infeasible_init:
        return EXIT_INFEASIBLE
    return EXIT_OK if summ.ok else EXIT_INVARIANT


def cmd_roa(cfg, args) -> int:
    from rmpc.roa import approximate_roa, write_csv, write_json, write_svg

    off = _offline(cfg, args.cache)
    res = approximate_roa(off, cfg.n_dirs)
    write_csv(res, args.out / "roa.csv")
    write_json(res, args.out / "roa.json")
    if cfg.system.d == 2:
        write_svg(res, args.out / "roa.svg", cfg.system.X, off.system.XN)
    print(f"{len(res.feasible_points())} of {len(res.points)} directions feasible, area {res.volume}")
    return EXIT_OK


def cmd_bench(cfg, args) -> int:
    from rmpc.sim import feasible_initial_states

    term = _terminal(cfg, args.cache)
    sysN = cfg.system.with_terminal_set(term.XN)
    offline_times = {}
    table = {}
    for Nt in range(2, cfg.system.N + 1):
        t0 = time.perf_counter()
        table[Nt] = compute_bounds(sysN, build_stacks(sysN, Nt), cfg.bounds.method,
                                   min(cfg.bounds.N_cut or Nt, Nt))
        offline_times[Nt] = time.perf_counter() - t0
    off = OfflineData.build(cfg.system, terminal=term, bounds=table, options=cfg.mpc)
    off.options.memoize = False
    xs = feasible_initial_states(off, args.samples, seed=args.seed)
    online = {}
    for Nt in range(1, cfg.system.N + 1):
        ts = []
        for x in xs:
            res, _, dt = off.solve(x, Nt, 0)
            if res.optimal:
                ts.append(dt)
        online[Nt] = {"median_s": float(np.median(ts)) if ts else None, "max_s": max(ts) if ts else None,
                      "solved": len(ts), "samples": len(xs)}
    out = {"offline_bounds_s": offline_times, "offline_bounds_total_s": sum(offline_times.values()),
           "online": online}
    _dump(out, args.out / "bench.json")
    for Nt, v in online.items():
        med = v["median_s"]
        print(f"Nt = {Nt}: median online {'n/a' if med is None else f'{med * 1e3:.2f} ms'}")
    print(f"offline bounds total {out['offline_bounds_total_s']:.2f} s")
    return EXIT_OK


COMMANDS = {
    "bounds": cmd_bounds,
    "terminal-set": cmd_terminal_set,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "roa": cmd_roa,
    "bench": cmd_bench,
}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmpc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config (default: bundled example)")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--cache", help="directory for cached terminal sets and bounds")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "solve":
            s.add_argument("--x", required=True, help="state as comma separated values")
            s.add_argument("--Nt", type=int, default=None)
        if name == "bench":
            s.add_argument("--samples", type=int, default=30)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.load_example()
        args.out = Path(args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        args.cache = Path(args.cache) if args.cache else None
        if args.cache:
            args.cache.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DimensionError, RangeError, StabilityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InitializationError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
