"""``pedtwin`` command line: scenario generation, pipeline runs, ROC sweeps,
UWB benchmarks and latency reports.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import pipeline as pl
from .latency import NETWORK_PROFILES
from .risk import (
    build_confusion_matrix,
    episodes_from_assessments,
    roc_csv,
    select_threshold,
    sweep_roc,
    warns,
)
from .seeding import derive_seed
from .tdma import build_schedule, reference_schedule
from .uwb import (
    BENCHMARK_HEADER,
    NOISELESS,
    RangeNoiseModel,
    accuracy_benchmark,
    default_anchors,
    load_anchors,
)
from .world import (
    HAZARD_KINDS,
    ScenarioError,
    detect_collisions,
    dump_scenario,
    generate_encounter_scenario,
    generate_random_scenario,
    load_scenario,
    simulate,
    turning_walk_scenario,
)

log = logging.getLogger("pedtwin")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    started_at: str
    output_paths: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2) + "\n")


def config_hash(doc: dict) -> str:
    return hashlib.sha256(pl.canonical_config_bytes(doc)).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON: {exc}") from exc


def _load_scenario(path: str):
    try:
        return load_scenario(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc


def _load_config(path: str | None, seed: int | None, network: str | None, policy: str | None):
    doc = pl.default_config_dict() if path is None else _read_json(path)
    if seed is not None:
        doc["seed"] = seed
    if network is not None:
        doc["network_profile"] = network
    if policy is not None:
        doc["profile_policy"] = policy
    return doc, pl.config_from_dict(doc)


def parse_grid(text: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma list."""
    if ":" in text:
        a, b, s = (float(x) for x in text.split(":"))
        n = int(round((b - a) / s))
        return [round(a + i * s, 10) for i in range(n + 1)]
    return [float(x) for x in text.split(",") if x]


# --------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    sc = generate_random_scenario(args.seed, args.pedestrians, args.vehicles, args.duration, dt=args.dt,
                                  px_per_meter=args.px_per_meter)
    text = dump_scenario(sc)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_default_config(args) -> int:
    text = json.dumps(pl.default_config_dict(args.seed), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    started = _now()
    scenario = _load_scenario(args.scenario)
    doc, config = _load_config(args.config, args.seed, args.network, args.profile_policy)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = pl.run_pipeline(scenario, config)
    paths = {
        "warnings.jsonl": pl.warnings_jsonl(result.warnings),
        "latency.csv": pl.latency_csv(result.latency).encode(),
        "risk_log.csv": pl.risk_log_csv(result.risk_log).encode(),
    }
    for name, data in paths.items():
        (out / name).write_bytes(data)
    RunManifest("run", config_hash(doc), config.seed, started, [str(out / n) for n in paths]).write(out / "manifest.json")
    print(f"{len(result.warnings)} warnings, {len(result.latency)} frames, {len(result.skipped_frames)} skipped")
    return EXIT_OK


def collect_episodes(scenario, config: pl.PipelineConfig, prefix: str = ""):
    """Run the pipeline on one scenario and reduce it to labeled episodes,
    one per (pedestrian, hazard) pair."""
    result = pl.run_pipeline(scenario, config)
    collisions = detect_collisions(simulate(scenario), scenario)
    peds = [a.id for a in scenario.agents if a.kind == "pedestrian"]
    hazards = [a.id for a in scenario.agents if a.kind in HAZARD_KINDS]
    pairs = [(p, h) for p in peds for h in hazards]
    return episodes_from_assessments(result.risk_log, collisions, pairs, prefix)


def encounter_episodes(n: int, seed: int, config: pl.PipelineConfig):
    episodes = []
    for i in range(n):
        sc = generate_encounter_scenario(derive_seed(seed, f"encounter/{i}"))
        episodes.extend(collect_episodes(sc, replace(config, seed=derive_seed(seed, f"pipeline/{i}")), f"e{i:04d}/"))
    return episodes


def cmd_roc(args) -> int:
    doc, config = _load_config(args.config, args.seed, None, None)
    grid = parse_grid(args.grid) if args.grid else (
        parse_grid("0.1:1.2:0.1") if args.axis == "ttc" else parse_grid("5:100:5"))
    episodes = []
    for i, path in enumerate(args.scenarios or []):
        episodes.extend(collect_episodes(_load_scenario(path), config, f"s{i}/"))
    if args.encounters:
        episodes.extend(encounter_episodes(args.encounters, config.seed, config))
    if not episodes:
        raise UsageError("no episodes: pass --scenarios or --encounters")
    px = 20.0 if not args.scenarios else _load_scenario(args.scenarios[0]).px_per_meter
    points = sweep_roc(episodes, args.axis, grid, px)
    best = select_threshold(points)
    fixed = config.thresholds_ttc_s if args.axis == "ttc" else config.danger_distance_px
    cm = build_confusion_matrix((warns(e, args.axis, fixed, px), e.collided) for e in episodes)
    if args.format == "json":
        text = json.dumps({
            "axis": args.axis,
            "points": [p.__dict__ for p in points],
            "selected": best.__dict__,
            "confusion": json.loads(cm.to_json()),
        }, indent=2) + "\n"
    else:
        text = roc_csv(args.axis, points)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if cm.tpr is None:
        print("warning: no collided episodes, TPR undefined", file=sys.stderr)
    print(f"selected {args.axis} threshold {best.threshold:g} (tpr={best.tpr}, fpr={best.fpr}); "
          f"confusion at configured threshold {cm.as_nested()}", file=sys.stderr)
    return EXIT_OK


def uwb_rows(scenario, anchors, noise, users, seed, slot=None, dead_time=0.0, fix_period=None):
    if slot is None:
        schedule, period = reference_schedule(users)
    else:
        schedule, period = build_schedule(users, slot, dead_time), fix_period or 0.1
    return accuracy_benchmark(scenario, anchors, noise, schedule, seed, period)


def cmd_uwb_bench(args) -> int:
    scenario = _load_scenario(args.scenario) if args.scenario else turning_walk_scenario()
    anchors = load_anchors(Path(args.anchors).read_text()) if args.anchors else default_anchors()
    noise = NOISELESS if args.sigma == 0 else RangeNoiseModel(args.sigma, args.dropout, args.nlos_bias, args.nlos_p)
    peds = [a.id for a in scenario.agents if a.kind == "pedestrian"]
    if args.users:
        user_sets = [args.users.split(",")]
    else:
        user_sets = [peds[:1], peds[:2]] if len(peds) >= 2 else [peds[:1]]
    rows = []
    for users in user_sets:
        rows.extend(uwb_rows(scenario, anchors, noise, users, args.seed, args.slot, args.dead_time, args.fix_period))
    if args.format == "json":
        text = json.dumps([r.__dict__ for r in rows], indent=2) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCHMARK_HEADER)
        for r in rows:
            w.writerow([r.scenario_label, f"{r.mean_error:.6f}", f"{r.std_error:.6f}", f"{r.freq_hz:.4f}"])
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_latency_report(args) -> int:
    records = pl.read_latency_csv(Path(args.latency).read_text())
    stats = pl.latency_report(records)
    if args.format == "json":
        sys.stdout.write(json.dumps([s.__dict__ for s in stats], indent=2) + "\n")
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(("stage", "avg_ms", "std_ms"))
        for s in stats:
            w.writerow([s.stage, f"{s.avg_ms:.4f}", f"{s.std_ms:.4f}"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pedtwin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a random intersection scenario")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--pedestrians", type=int, default=232)
    g.add_argument("--vehicles", type=int, default=20)
    g.add_argument("--duration", type=float, default=600.0)
    g.add_argument("--dt", type=float, default=0.1)
    g.add_argument("--px-per-meter", type=float, default=20.0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("default-config", help="print the default pipeline config")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_default_config)

    r = sub.add_parser("run", help="run the warning pipeline on a scenario")
    r.add_argument("--scenario", required=True)
    r.add_argument("--config")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--network", choices=NETWORK_PROFILES)
    r.add_argument("--profile-policy", choices=("roi",) + pl.PROFILE_NAMES)
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("roc", help="sweep warning thresholds and report ROC points")
    o.add_argument("--scenarios", nargs="*")
    o.add_argument("--encounters", type=int, default=0, help="number of generated encounter scenarios")
    o.add_argument("--config")
    o.add_argument("--seed", type=int)
    o.add_argument("--axis", choices=("ttc", "distance"), default="ttc")
    o.add_argument("--grid", help="a:b:step or comma list; seconds (ttc) or pixels (distance)")
    o.add_argument("--format", choices=("csv", "json"), default="csv")
    o.add_argument("--out")
    o.set_defaults(func=cmd_roc)

    u = sub.add_parser("uwb-bench", help="UWB multi-user accuracy and fix frequency")
    u.add_argument("--scenario")
    u.add_argument("--anchors")
    u.add_argument("--users", help="comma-separated tag ids (default: single and two-user rows)")
    u.add_argument("--sigma", type=float, default=0.05)
    u.add_argument("--dropout", type=float, default=0.0)
    u.add_argument("--nlos-bias", type=float, default=0.3)
    u.add_argument("--nlos-p", type=float, default=0.0)
    u.add_argument("--slot", type=float, help="slot duration T; default picks the reference schedule")
    u.add_argument("--dead-time", type=float, default=0.0)
    u.add_argument("--fix-period", type=float)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--format", choices=("csv", "json"), default="csv")
    u.add_argument("--out")
    u.set_defaults(func=cmd_uwb_bench)

    lr = sub.add_parser("latency-report", help="per-stage mean/std from a latency CSV")
    lr.add_argument("--latency", required=True)
    lr.add_argument("--format", choices=("csv", "json"), default="csv")
    lr.set_defaults(func=cmd_latency_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except pl.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
