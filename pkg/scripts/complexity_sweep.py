"""SOCP-MPC iteration count and per-iteration time versus N_pre * N_br, with log-log slopes."""

import argparse
import json
from pathlib import Path

from mgems.cli import SWEEP_CASES, SWEEP_HORIZONS, complexity_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cases", default=",".join(SWEEP_CASES))
    ap.add_argument("--horizons", default=",".join(map(str, SWEEP_HORIZONS)))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="out/complexity.json")
    args = ap.parse_args()
    rep = complexity_sweep(tuple(args.cases.split(",")), tuple(int(h) for h in args.horizons.split(",")),
                           args.seed, args.jobs, timing_strict=args.jobs == 1)
    for r in rep["rows"]:
        print(f"{r['case']:6s} N_pre={r['n_pre']:3d} size={r['size']:4d} iters={r['median_iterations']:5.1f} "
              f"t_iter={1e3 * r['median_iter_time_s']:.2f} ms")
    print("slopes:", rep["slopes"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(rep, indent=2))


if __name__ == "__main__":
    main()
