#!/usr/bin/env python3
"""Offline/online timings per horizon length."""
import argparse
import time

import numpy as np

from rmpc import config
from rmpc.bounds import compute_bounds
from rmpc.mpc import MPCOptions, OfflineData
from rmpc.prediction import build_stacks
from rmpc.sim import feasible_initial_states
from rmpc.terminal import compute_terminal


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=50)
    ap.add_argument("--method", default="exact", choices=["exact", "efficient"])
    ap.add_argument("--form", default="auto", choices=["auto", "dual", "vertex"])
    args = ap.parse_args()

    cfg = config.load_example()
    term = compute_terminal(cfg.system, cfg.K)
    sysN = cfg.system.with_terminal_set(term.XN)
    table, t_off = {}, {}
    for Nt in range(2, sysN.N + 1):
        t0 = time.perf_counter()
        table[Nt] = compute_bounds(sysN, build_stacks(sysN, Nt), args.method, Nt)
        t_off[Nt] = time.perf_counter() - t0
    off = OfflineData.build(cfg.system, terminal=term, bounds=table,
                            options=MPCOptions(robust_form=args.form, memoize=False))
    xs = feasible_initial_states(off, args.samples, seed=1)
    print(f"{'Nt':>3} {'offline [s]':>12} {'online median [s]':>18} {'online max [s]':>15}")
    for Nt in range(1, sysN.N + 1):
        ts = [dt for x in xs for res, _, dt in [off.solve(x, Nt)] if res.optimal]
        print(f"{Nt:>3} {t_off.get(Nt, 0.0):>12.4f} {np.median(ts):>18.4f} {max(ts):>15.4f}")


if __name__ == "__main__":
    main()
