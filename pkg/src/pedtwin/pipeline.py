"""Per-tick warning pipeline with RoI-gated detector selection and
per-stage latency accounting.

Stage order per frame: reception -> preprocessing -> detection -> tracking
-> msg_create -> msg_retrieve. Latencies are sampled from the configured
models (``latency_mode="simulated"``) or timed on the host
(``latency_mode="wallclock"``).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .latency import (
    DETECTOR_LATENCY,
    NETWORK_LATENCY,
    STAGE_DEFAULTS,
    STAGES,
    StageLatencyModel,
)
from .messaging import (
    LoopbackBroker,
    LoopbackTransport,
    MessageIdSource,
    WarningMessage,
    publish,
)
from .predict import (
    PEDESTRIAN_ACCEL_SIGMA,
    VEHICLE_ACCEL_SIGMA,
    KalmanPredictor,
    PredictedTrajectory,
)
from .risk import RiskAssessment, RiskThresholds, compute_ttc_batch, decide_warning
from .seeding import derive_seed, rng_for
from .tdma import TdmaSchedule, run_scheduled_localization
from .uwb import AnchorSet, RangeNoiseModel
from .world import HAZARD_KINDS, Scenario, WorldState, simulate

log = logging.getLogger(__name__)

PROFILE_NAMES = ("small", "medium", "large")
MISS_PROBABILITY = {"small": 0.10, "medium": 0.05, "large": 0.02}
RESOLUTION = {"small": "low", "medium": "high", "large": "high"}
ROI_TTL = 2.0
TRACK_TIMEOUT = 1.0  # s without a measurement before a track is dropped


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str = "missing or invalid"):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorProfile:
    name: str
    latency: StageLatencyModel
    miss_probability: float
    resolution_tier: str

    def __post_init__(self):
        if not 0.0 <= self.miss_probability <= 1.0:
            raise ValueError("miss_probability must be in [0, 1]")


def default_profiles() -> dict[str, DetectorProfile]:
    return {
        name: DetectorProfile(name, StageLatencyModel("detection", *DETECTOR_LATENCY[name]),
                              MISS_PROBABILITY[name], RESOLUTION[name])
        for name in PROFILE_NAMES
    }


@dataclass(frozen=True)
class RegionOfInterest:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    created_at: float
    ttl: float = ROI_TTL
    source: str = ""

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("RoI must have positive area")
        if not (self.ttl > 0):
            raise ValueError("RoI ttl must be > 0")

    def active(self, t: float) -> bool:
        return self.created_at <= t < self.created_at + self.ttl

    def contains(self, point) -> bool:
        x, y = point
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


def specify_rois(vehicle_predictions: Sequence[PredictedTrajectory], danger_distance_m: float,
                 ttl: float = ROI_TTL) -> list[RegionOfInterest]:
    """Bounding box of each vehicle's predicted path, grown by the danger distance."""
    rois = []
    for pred in vehicle_predictions:
        lo = pred.points.min(axis=0) - danger_distance_m
        hi = pred.points.max(axis=0) + danger_distance_m
        rois.append(RegionOfInterest(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]),
                                     pred.start_time, ttl, pred.agent))
    return rois


def pedestrians_in_rois(rois: Sequence[RegionOfInterest], positions: Sequence, t: float) -> bool:
    live = [r for r in rois if r.active(t)]
    return any(r.contains(p) for r in live for p in positions)


def select_profile(rois: Sequence[RegionOfInterest], pedestrians_present_in_roi: bool,
                   profiles: dict[str, DetectorProfile] | None = None) -> DetectorProfile:
    profiles = profiles or default_profiles()
    if rois and pedestrians_present_in_roi:
        return profiles["large"]
    return profiles["small"]


@dataclass(frozen=True)
class Detections:
    items: list[tuple[str, np.ndarray]]
    latency_ms: float


def virtual_detect(state: WorldState, profile: DetectorProfile, rng_seed, view=None) -> Detections:
    """Report each agent (inside ``view`` if given) with probability
    1 - miss_probability at its true position."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    latency = float(profile.latency.sample(rng, 1)[0])
    keep = rng.random(len(state.ids)) >= profile.miss_probability
    items = []
    for i, agent_id in enumerate(state.ids):
        p = state.positions[i]
        if view is not None and not (view[0] <= p[0] <= view[2] and view[1] <= p[1] <= view[3]):
            continue
        if keep[i]:
            items.append((agent_id, np.array(p)))
    return Detections(items, latency)


# --------------------------------------------------------------------------
# Configuration


@dataclass
class PipelineConfig:
    seed: int = 0
    stages: dict[str, StageLatencyModel] = field(default_factory=lambda: {
        s: StageLatencyModel(s, *v) for s, v in STAGE_DEFAULTS.items()})
    profiles: dict[str, DetectorProfile] = field(default_factory=default_profiles)
    networks: dict[str, StageLatencyModel] = field(default_factory=lambda: {
        n: StageLatencyModel("msg_retrieve", *v) for n, v in NETWORK_LATENCY.items()})
    network_profile: str = "fiveg"
    thresholds_ttc_s: float = 1.1
    danger_distance_px: float = 30.0
    schedule: TdmaSchedule | None = None
    fix_period_s: float = 0.1
    anchors: AnchorSet | None = None
    uwb_noise: RangeNoiseModel = field(default_factory=RangeNoiseModel)
    horizon_s: float = 3.0
    predictor_dt_s: float = 0.1
    profile_policy: str = "roi"  # roi | small | medium | large
    roi_ttl_s: float = ROI_TTL
    camera_view: tuple[float, float, float, float] = (-20.0, -20.0, 20.0, 20.0)
    measurement_sigma_m: float = 0.05
    intersection: str = "X1"
    epoch_ms: int = 0
    latency_mode: str = "simulated"

    @property
    def horizon_steps(self) -> int:
        return max(1, int(round(self.horizon_s / self.predictor_dt_s)))

    def thresholds(self, px_per_meter: float) -> RiskThresholds:
        return RiskThresholds(self.thresholds_ttc_s, self.danger_distance_px, px_per_meter)


def _section(doc: dict, key: str):
    if key not in doc:
        raise ConfigError(key, "missing")
    return doc[key]


def _model(stage: str, spec, where: str) -> StageLatencyModel:
    try:
        return StageLatencyModel(stage, float(spec["mean_ms"]), float(spec["std_ms"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{where}.mean_ms/std_ms") from exc
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from exc


def config_from_dict(doc: dict) -> PipelineConfig:
    """Validate a pipeline config document; every problem names its field."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    seed = _section(doc, "seed")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed", "expected an integer")
    stages_doc = _section(doc, "stages")
    stages = {}
    for s in ("reception", "preprocessing", "tracking", "msg_create"):
        stages[s] = _model(s, _section(stages_doc, s) if isinstance(stages_doc, dict) else None, f"stages.{s}")
    profiles_doc = _section(doc, "profiles")
    profiles = {}
    for name in PROFILE_NAMES:
        if not isinstance(profiles_doc, dict) or name not in profiles_doc:
            raise ConfigError(f"profiles.{name}")
        p = profiles_doc[name]
        try:
            profiles[name] = DetectorProfile(name, _model("detection", p, f"profiles.{name}"),
                                             float(p["miss_probability"]), str(p.get("resolution", RESOLUTION[name])))
        except KeyError as exc:
            raise ConfigError(f"profiles.{name}.miss_probability") from exc
    networks = {n: StageLatencyModel("msg_retrieve", *v) for n, v in NETWORK_LATENCY.items()}
    for n, spec in doc.get("networks", {}).items():
        networks[n] = _model("msg_retrieve", spec, f"networks.{n}")
    network = _section(doc, "network_profile")
    if network not in networks:
        raise ConfigError("network_profile", f"unknown network {network!r}")
    th = _section(doc, "thresholds")
    try:
        ttc_s, danger_px = float(th["ttc_s"]), float(th["danger_distance_px"])
    except (KeyError, TypeError) as exc:
        raise ConfigError("thresholds.ttc_s/danger_distance_px") from exc
    sched_doc = _section(doc, "schedule")
    try:
        users = list(sched_doc["user_order"])
        schedule = (TdmaSchedule(tuple(users), float(sched_doc["slot_duration_s"]),
                                 float(sched_doc.get("slot_dead_time_s", 0.0))) if users else None)
        fix_period = float(sched_doc.get("fix_period_s", 0.1))
    except (KeyError, TypeError) as exc:
        raise ConfigError("schedule.user_order/slot_duration_s") from exc
    except ValueError as exc:
        raise ConfigError("schedule", str(exc)) from exc
    anchors_doc = _section(doc, "anchors")
    try:
        anchors = AnchorSet(tuple(str(a["id"]) for a in anchors_doc),
                            np.array([[float(a["x_m"]), float(a["y_m"])] for a in anchors_doc]))
    except (KeyError, TypeError) as exc:
        raise ConfigError("anchors[].id/x_m/y_m") from exc
    except ValueError as exc:
        raise ConfigError("anchors", str(exc)) from exc
    pred = _section(doc, "predictor")
    try:
        horizon_s, pred_dt = float(pred["horizon_s"]), float(pred["dt_s"])
    except (KeyError, TypeError) as exc:
        raise ConfigError("predictor.horizon_s/dt_s") from exc
    noise_doc = doc.get("uwb_noise", {})
    noise = RangeNoiseModel(float(noise_doc.get("sigma_m", 0.05)), float(noise_doc.get("dropout_p", 0.0)),
                            float(noise_doc.get("nlos_bias_m", 0.3)), float(noise_doc.get("nlos_p", 0.0)))
    policy = doc.get("profile_policy", "roi")
    if policy not in ("roi",) + PROFILE_NAMES:
        raise ConfigError("profile_policy", f"unknown policy {policy!r}")
    mode = doc.get("latency_mode", "simulated")
    if mode not in ("simulated", "wallclock"):
        raise ConfigError("latency_mode", f"unknown mode {mode!r}")
    view = doc.get("camera_view", [-20.0, -20.0, 20.0, 20.0])
    return PipelineConfig(
        seed=seed, stages=stages, profiles=profiles, networks=networks, network_profile=network,
        thresholds_ttc_s=ttc_s, danger_distance_px=danger_px, schedule=schedule, fix_period_s=fix_period,
        anchors=anchors, uwb_noise=noise, horizon_s=horizon_s, predictor_dt_s=pred_dt, profile_policy=policy,
        roi_ttl_s=float(doc.get("roi_ttl_s", ROI_TTL)), camera_view=tuple(float(v) for v in view),
        measurement_sigma_m=float(doc.get("measurement_sigma_m", 0.05)),
        intersection=str(doc.get("intersection", "X1")), epoch_ms=int(doc.get("epoch_ms", 0)), latency_mode=mode,
    )


def load_config(text: str | bytes) -> PipelineConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"malformed JSON: {exc}") from exc
    return config_from_dict(doc)


def default_config_dict(seed: int = 0) -> dict:
    m = lambda mean, std: {"mean_ms": mean, "std_ms": std}  # noqa: E731
    return {
        "seed": seed,
        "intersection": "X1",
        "stages": {s: m(*v) for s, v in STAGE_DEFAULTS.items()},
        "profiles": {
            n: {**m(*DETECTOR_LATENCY[n]), "miss_probability": MISS_PROBABILITY[n], "resolution": RESOLUTION[n]}
            for n in PROFILE_NAMES
        },
        "networks": {n: m(*v) for n, v in NETWORK_LATENCY.items()},
        "network_profile": "fiveg",
        "thresholds": {"ttc_s": 1.1, "danger_distance_px": 30.0},
        "schedule": {"slot_duration_s": 0.1, "user_order": [], "slot_dead_time_s": 0.0, "fix_period_s": 0.1},
        "anchors": [
            {"id": "A0", "x_m": -10.0, "y_m": -10.0},
            {"id": "A1", "x_m": 10.0, "y_m": -10.0},
            {"id": "A2", "x_m": 0.0, "y_m": 10.0},
        ],
        "uwb_noise": {"sigma_m": 0.05, "dropout_p": 0.0, "nlos_bias_m": 0.3, "nlos_p": 0.0},
        "predictor": {"horizon_s": 3.0, "dt_s": 0.1},
        "profile_policy": "roi",
        "roi_ttl_s": ROI_TTL,
        "camera_view": [-20.0, -20.0, 20.0, 20.0],
        "measurement_sigma_m": 0.05,
        "epoch_ms": 0,
        "latency_mode": "simulated",
    }


def canonical_config_bytes(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


# --------------------------------------------------------------------------
# Run


@dataclass(frozen=True)
class LatencyRecord:
    frame: int
    samples: dict[str, float]
    network_profile: str
    profile: str
    end_to_end: float


@dataclass(frozen=True)
class PublishedWarning:
    message: WarningMessage
    assessment: RiskAssessment
    tick: int
    published_ms: int
    received_ms: int


@dataclass
class PipelineResult:
    warnings: list[PublishedWarning]
    latency: list[LatencyRecord]
    risk_log: list[RiskAssessment]
    profiles: list[str]
    skipped_frames: list[int]


def _sample_streams(config: PipelineConfig, n: int) -> dict[str, np.ndarray]:
    out = {s: m.sample(rng_for(config.seed, f"latency/{s}"), n) for s, m in config.stages.items()}
    out["msg_retrieve"] = config.networks[config.network_profile].sample(
        rng_for(config.seed, f"latency/msg_retrieve/{config.network_profile}"), n)
    for name, prof in config.profiles.items():
        out[f"detection/{name}"] = prof.latency.sample(rng_for(config.seed, f"latency/detection/{name}"), n)
    return out


def _stack(preds: Sequence[PredictedTrajectory], steps: int) -> np.ndarray:
    if not preds:
        return np.zeros((0, steps, 2))
    return np.stack([p.points for p in preds])


def run_pipeline(scenario: Scenario, config: PipelineConfig, transport=None) -> PipelineResult:
    """Run every scenario tick through the warning pipeline.

    The detector profile for a tick comes from the RoIs of earlier ticks. If
    a tick raises a warning while on a lighter profile, the frame is
    escalated to the large profile and charged the large-profile latency.
    """
    if config.network_profile not in config.networks:
        raise ConfigError("network_profile")
    if config.anchors is None:
        raise ConfigError("anchors")
    run = simulate(scenario)
    n_frames = len(run.times)
    kinds = {a.id: a.kind for a in scenario.agents}
    thresholds = config.thresholds(scenario.px_per_meter)
    streams = _sample_streams(config, n_frames)
    detect_seed = derive_seed(config.seed, "detect")
    next_id = MessageIdSource(derive_seed(config.seed, "msg_id"))
    sim_clock = {"ms": config.epoch_ms}
    if transport is None:
        transport = LoopbackTransport(LoopbackBroker(), clock=lambda: sim_clock["ms"])

    uwb_tracks = {}
    if config.schedule is not None:
        tagged = [u for u in config.schedule.user_order if u in kinds]
        if tagged:
            sched = replace(config.schedule, user_order=tuple(tagged))
            loc = run_scheduled_localization(scenario, config.anchors, config.uwb_noise, sched,
                                             config.fix_period_s, derive_seed(config.seed, "uwb"))
            uwb_tracks = {u: loc.tracks[u].positions for u in tagged}

    accel = {a: (PEDESTRIAN_ACCEL_SIGMA if k == "pedestrian" else VEHICLE_ACCEL_SIGMA) for a, k in kinds.items()}
    kp = KalmanPredictor(config.horizon_steps, config.predictor_dt_s, config.measurement_sigma_m, accel)
    last_seen: dict[str, float] = {}
    rois: dict[str, RegionOfInterest] = {}
    result = PipelineResult([], [], [], [], [])
    wall = config.latency_mode == "wallclock"

    for k in range(n_frames):
        t = float(run.times[k])
        try:
            tick0 = time.perf_counter()
            state = run.state(k)
            tick1 = time.perf_counter()
            # preprocessing: drop expired RoIs and stale tracks
            rois = {v: r for v, r in rois.items() if r.active(t)}
            for agent in [a for a, ts in last_seen.items() if t - ts > TRACK_TIMEOUT]:
                last_seen.pop(agent)
                kp.forget(agent)
            tick2 = time.perf_counter()

            if config.profile_policy == "roi":
                ped_pos = [kp.states[a].position for a in kp.states if kinds[a] == "pedestrian"]
                profile = select_profile(list(rois.values()), pedestrians_in_rois(list(rois.values()), ped_pos, t),
                                         config.profiles)
            else:
                profile = config.profiles[config.profile_policy]
            dets = virtual_detect(state, profile, np.random.default_rng([detect_seed, k]), config.camera_view)
            tick3 = time.perf_counter()

            measurements = {a: p for a, p in dets.items if a not in uwb_tracks}
            for a, track in uwb_tracks.items():
                if not np.isnan(track[k, 0]):
                    measurements[a] = track[k]
            for a in sorted(measurements):
                kp.observe(a, t, measurements[a])
                last_seen[a] = t
            preds = {a: kp.predict(a, t) for a in sorted(kp.states)}
            peds = [a for a in preds if kinds[a] == "pedestrian"]
            hazards = [a for a in preds if kinds[a] in HAZARD_KINDS]
            assessments = compute_ttc_batch(
                peds, _stack([preds[a] for a in peds], config.horizon_steps),
                hazards, _stack([preds[a] for a in hazards], config.horizon_steps),
                config.predictor_dt_s, thresholds, t)
            result.risk_log.extend(assessments)
            triggers = [(a, w) for a in assessments if (w := decide_warning(a, thresholds)) is not None]
            for r in specify_rois([preds[a] for a in hazards], thresholds.danger_distance_m, config.roi_ttl_s):
                rois[r.source] = r
            tick4 = time.perf_counter()

            # per-profile streams keep latency independent of detection draws
            det_ms = float(streams[f"detection/{profile.name}"][k])
            if triggers and profile.name != "large" and config.profile_policy == "roi":
                profile = config.profiles["large"]
                det_ms += float(streams["detection/large"][k])

            messages = [
                WarningMessage(
                    msg_id=next_id(), created_ms=0, intersection=config.intersection, user=a.pedestrian,
                    ttc_s=w.ttc, position=tuple(kp.states[a.pedestrian].position),
                    hazard_id=a.hazard, hazard_position=tuple(kp.states[a.hazard].position),
                )
                for a, w in triggers
            ]
            tick5 = time.perf_counter()

            if wall:
                samples = {
                    "reception": (tick1 - tick0) * 1e3, "preprocessing": (tick2 - tick1) * 1e3,
                    "detection": (tick3 - tick2) * 1e3, "tracking": (tick4 - tick3) * 1e3,
                    "msg_create": (tick5 - tick4) * 1e3, "msg_retrieve": 0.0,
                }
            else:
                samples = {
                    "reception": float(streams["reception"][k]),
                    "preprocessing": float(streams["preprocessing"][k]),
                    "detection": det_ms,
                    "tracking": float(streams["tracking"][k]),
                    "msg_create": float(streams["msg_create"][k]),
                    "msg_retrieve": float(streams["msg_retrieve"][k]),
                }
            upto_create = sum(samples[s] for s in STAGES[:5])
            created_ms = config.epoch_ms + int(math.ceil(t * 1000.0 + upto_create))
            sim_clock["ms"] = created_ms
            for (a, _), msg in zip(triggers, messages):
                msg = replace(msg, created_ms=created_ms)
                sent = time.perf_counter()
                receipt = publish(msg, transport)
                if wall:
                    samples["msg_retrieve"] = max(samples["msg_retrieve"], (time.perf_counter() - sent) * 1e3)
                received = receipt.timestamp_ms + int(math.ceil(samples["msg_retrieve"]))
                result.warnings.append(PublishedWarning(msg, a, k, receipt.timestamp_ms, received))
            end_to_end = sum(samples[s] for s in STAGES)
            result.latency.append(LatencyRecord(k, samples, config.network_profile, profile.name, end_to_end))
            result.profiles.append(profile.name)
        except Exception:  # a faulty frame is dropped, the run continues
            log.exception("frame %d skipped", k)
            result.skipped_frames.append(k)
    return result


# --------------------------------------------------------------------------
# Reports and output files


@dataclass(frozen=True)
class StageStats:
    stage: str
    avg_ms: float
    std_ms: float


def latency_report(records: Sequence[LatencyRecord]) -> list[StageStats]:
    """Per-stage sample mean and (n-1) standard deviation, plus end-to-end."""
    if len(records) < 2:
        raise InsufficientSamplesError("latency_report needs at least 2 records")
    out = []
    for stage in STAGES:
        x = np.array([r.samples[stage] for r in records])
        out.append(StageStats(stage, float(x.mean()), float(x.std(ddof=1))))
    e2e = np.array([r.end_to_end for r in records])
    out.append(StageStats("end_to_end", float(e2e.mean()), float(e2e.std(ddof=1))))
    return out


LATENCY_HEADER = ("frame", "stage", "sample_ms", "network", "end_to_end_ms")
RISK_HEADER = ("t_s", "pedestrian", "hazard", "ttc_s", "min_distance_m", "min_distance_window_m")


def latency_csv(records: Sequence[LatencyRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LATENCY_HEADER)
    for r in records:
        for stage in STAGES:
            w.writerow([r.frame, stage, repr(r.samples[stage]), r.network_profile, repr(r.end_to_end)])
    return buf.getvalue()


def read_latency_csv(text: str) -> list[LatencyRecord]:
    rows: dict[int, dict] = {}
    for row in csv.DictReader(io.StringIO(text)):
        frame = int(row["frame"])
        rec = rows.setdefault(frame, {"samples": {}, "network": row["network"], "e2e": float(row["end_to_end_ms"])})
        rec["samples"][row["stage"]] = float(row["sample_ms"])
    return [LatencyRecord(f, r["samples"], r["network"], "", r["e2e"]) for f, r in sorted(rows.items())]


def risk_log_csv(assessments: Sequence[RiskAssessment]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RISK_HEADER)
    for a in assessments:
        w.writerow([f"{a.assessed_at:.3f}", a.pedestrian, a.hazard, "" if a.ttc is None else f"{a.ttc:.3f}",
                    f"{a.min_predicted_distance:.6g}", f"{a.min_distance_in_window:.6g}"])
    return buf.getvalue()


def warnings_jsonl(warnings: Sequence[PublishedWarning]) -> bytes:
    from .messaging import encode_warning

    return b"".join(encode_warning(w.message) + b"\n" for w in warnings)
