"""Per-stage latency table for each network profile, large detector.

    python scripts/latency_table.py --frames 10000 --seed 0
"""

import argparse
import csv
import sys

from pedtwin.latency import NETWORK_PROFILES
from pedtwin.pipeline import (
    config_from_dict,
    default_config_dict,
    latency_report,
    run_pipeline,
)
from pedtwin.world import Scenario, generate_random_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--policy", default="large", choices=("roi", "small", "medium", "large"))
    ap.add_argument("--empty", action="store_true", help="no traffic, latency models only")
    args = ap.parse_args()

    duration = (args.frames - 1) * 0.1
    sc = Scenario(args.seed, duration, 0.1, ()) if args.empty else generate_random_scenario(args.seed, 20, 4, duration)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("network", "stage", "avg_ms", "std_ms"))
    for net in NETWORK_PROFILES:
        doc = default_config_dict(args.seed)
        doc.update(network_profile=net, profile_policy=args.policy)
        for s in latency_report(run_pipeline(sc, config_from_dict(doc)).latency):
            w.writerow((net, s.stage, f"{s.avg_ms:.3f}", f"{s.std_ms:.3f}"))


if __name__ == "__main__":
    main()
