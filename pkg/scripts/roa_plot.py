#!/usr/bin/env python3
"""Approximate ROA of the example as SVG/CSV, optionally for both vertex-term modes."""
import argparse
from pathlib import Path

from rmpc import config
from rmpc.mpc import MPCOptions, OfflineData
from rmpc.roa import approximate_roa, write_csv, write_svg
from rmpc.terminal import compute_terminal


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-dirs", type=int, default=36)
    ap.add_argument("--out", default="out")
    ap.add_argument("--both-modes", action="store_true", help="also run with bound terms only")
    args = ap.parse_args()

    cfg = config.load_example()
    term = compute_terminal(cfg.system, cfg.K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = [True, False] if args.both_modes else [True]
    for vt in modes:
        off = OfflineData.build(cfg.system, terminal=term, options=MPCOptions(exact_vertex_terms=vt))
        res = approximate_roa(off, args.n_dirs)
        tag = "vertex" if vt else "bound"
        write_csv(res, out / f"roa_{tag}.csv")
        write_svg(res, out / f"roa_{tag}.svg", cfg.system.X, off.system.XN)
        print(f"{tag} terms: {len(res.hull)} hull vertices, area {res.volume:.2f}")


if __name__ == "__main__":
    main()
