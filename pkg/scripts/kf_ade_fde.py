"""Kalman-filter ADE/FDE on generated pedestrian tracks.

    python scripts/kf_ade_fde.py --seeds 3 --horizon-s 3.0
"""

import argparse
import sys

from pedtwin.predict import PredictionMetrics, kf_benchmark, metrics_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--pedestrians", type=int, default=30)
    ap.add_argument("--horizon-s", type=float, default=3.0)
    ap.add_argument("--sigma", type=float, default=0.05)
    args = ap.parse_args()

    steps = int(round(args.horizon_s / 0.1))
    runs = [kf_benchmark(s, args.pedestrians, 120.0, steps, 0.1, args.sigma) for s in range(args.seeds)]
    n = sum(r.n_samples for r in runs)
    pooled = PredictionMetrics(sum(r.ade * r.n_samples for r in runs) / n,
                               sum(r.fde * r.n_samples for r in runs) / n, n)
    sys.stdout.write(metrics_csv({"kalman_cv": pooled}))


if __name__ == "__main__":
    main()
