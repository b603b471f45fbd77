"""NRMSE of vanilla KRR, dictionary-assisted KRR and persistence per forecast start on a clear and a cloudy day."""

import argparse
import dataclasses

from mgems.forecast import evaluate_forecasts
from mgems.scenario import builtin_case, make_profile_set


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--case", default="18bus")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--starts", default="6,8,10,12,14,16")
    args = ap.parse_args()
    starts = [int(s) for s in args.starts.split(",")]
    _, cfg = builtin_case(args.case, args.seed)
    for day in ("clear", "cloudy"):
        c = dataclasses.replace(cfg, forecast=dataclasses.replace(cfg.forecast, solar_day=day))
        ps = make_profile_set(c)
        rows = evaluate_forecasts(ps.history["solar"], ps.realized["solar"], starts, lag=c.forecast.lag)
        for r in rows:
            d = "-" if r.nrmse_dictionary is None else f"{r.nrmse_dictionary:.4f}"
            print(f"{day:6s} start {r.start:2d}: vanilla {r.nrmse_vanilla:.4f}  dictionary {d}  "
                  f"persistence {r.nrmse_persistence:.4f}")


if __name__ == "__main__":
    main()
