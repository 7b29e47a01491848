"""TTC and danger-distance ROC sweeps over generated encounter episodes.

    python scripts/roc_sweep.py --encounters 200 --seed 0
"""

import argparse
import sys

from pedtwin.cli import encounter_episodes, parse_grid
from pedtwin.pipeline import config_from_dict, default_config_dict
from pedtwin.risk import (
    build_confusion_matrix,
    roc_csv,
    select_threshold,
    sweep_roc,
    warns,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--encounters", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    config = config_from_dict(default_config_dict(args.seed))
    episodes = encounter_episodes(args.encounters, args.seed, config)
    for axis, grid, fixed in (("ttc", "0.1:1.2:0.1", 1.1), ("distance", "5:100:5", 30.0)):  # distance in pixels
        points = sweep_roc(episodes, axis, parse_grid(grid))
        sys.stdout.write(roc_csv(axis, points))
        best = select_threshold(points)
        cm = build_confusion_matrix((warns(e, axis, fixed), e.collided) for e in episodes)
        print(f"# {axis}: Youden-J pick {best.threshold:g} (tpr {best.tpr}, fpr {best.fpr}); "
              f"at {fixed:g}: {cm.as_nested()}", file=sys.stderr)


if __name__ == "__main__":
    main()
