"""MSMS score over a (sigma, lambda) grid for each profile kind of a builtin case."""

import argparse

import numpy as np

from mgems.forecast import msms_score, msms_tune
from mgems.scenario import builtin_case, make_profile_set


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--case", default="18bus")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    _, cfg = builtin_case(args.case, args.seed)
    ps = make_profile_set(cfg)
    sigmas = np.geomspace(0.05, 5.0, 7)
    lams = np.geomspace(1e-6, 1e-1, 6)
    for kind, days in ps.history.items():
        print(f"{kind}: rows sigma, columns lambda {', '.join(f'{l:.0e}' for l in lams)}")
        for s in sigmas:
            print(f"  {s:6.3f} " + " ".join(f"{msms_score(days, s, l):8.4f}" for l in lams))
        best = msms_tune(days, list(sigmas), list(lams))
        print(f"  best sigma {best[0]:.3f}, lambda {best[1]:.0e}, score {best[2]:.4f}")


if __name__ == "__main__":
    main()
