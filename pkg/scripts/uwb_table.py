"""Multi-user UWB accuracy and fix frequency, averaged over seeds.

    python scripts/uwb_table.py --seeds 10
"""

import argparse
import csv
import sys

import numpy as np

from pedtwin.tdma import reference_schedule
from pedtwin.uwb import RangeNoiseModel, accuracy_benchmark, default_anchors
from pedtwin.world import turning_walk_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--sigma", type=float, default=0.05)
    ap.add_argument("--turn-deg", type=float, default=20.0)
    ap.add_argument("--speed", type=float, default=1.4)
    args = ap.parse_args()

    sc = turning_walk_scenario(args.turn_deg, args.speed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("scenario", "mean_error_cm", "std_error_cm", "freq_hz"))
    for users in (["ped000"], ["ped000", "ped001"]):
        sched, period = reference_schedule(users)
        rows = [accuracy_benchmark(sc, default_anchors(), RangeNoiseModel(args.sigma), sched, s, period)[0]
                for s in range(args.seeds)]
        w.writerow((rows[0].scenario_label, f"{100 * np.mean([r.mean_error for r in rows]):.3f}",
                    f"{100 * np.mean([r.std_error for r in rows]):.3f}", f"{rows[0].freq_hz:.2f}"))


if __name__ == "__main__":
    main()
