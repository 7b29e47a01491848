"""Time-to-collision and post-encroachment risk metrics, warning decisions,
and ROC threshold sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import LineString, Point
from shapely.ops import nearest_points

from .predict import PredictedTrajectory
from .world import AgentTrack, CollisionEvent

DEFAULT_TTC_THRESHOLD = 1.1  # s
DEFAULT_DANGER_DISTANCE_PX = 30.0
DEFAULT_PX_PER_METER = 20.0
CONFLICT_RADIUS = 0.5  # m


class MismatchedHorizonError(ValueError):
    pass


@dataclass(frozen=True)
class RiskThresholds:
    ttc_threshold: float = DEFAULT_TTC_THRESHOLD
    danger_distance: float = DEFAULT_DANGER_DISTANCE_PX  # pixels
    px_per_meter: float = DEFAULT_PX_PER_METER

    def __post_init__(self):
        if not (self.ttc_threshold > 0 and self.danger_distance > 0 and self.px_per_meter > 0):
            raise ValueError("thresholds and pixel scale must be > 0")

    @property
    def danger_distance_m(self) -> float:
        return self.danger_distance / self.px_per_meter


@dataclass(frozen=True)
class RiskAssessment:
    pedestrian: str
    hazard: str
    ttc: float | None
    min_predicted_distance: float
    assessed_at: float
    # closest predicted approach over steps no later than the TTC threshold
    min_distance_in_window: float = math.inf


@dataclass(frozen=True)
class WarningTrigger:
    pedestrian: str
    hazard: str
    ttc: float
    assessed_at: float


def _first_below(dist: np.ndarray, limit: float) -> int | None:
    hits = np.flatnonzero(dist < limit)
    return int(hits[0]) if len(hits) else None


def compute_ttc(pedestrian: PredictedTrajectory, hazard: PredictedTrajectory, thresholds: RiskThresholds,
                assessed_at: float | None = None) -> RiskAssessment:
    """TTC is ``k * dt`` for the first predicted step ``k >= 1`` at which the
    pair is strictly closer than the danger distance."""
    if len(pedestrian.points) != len(hazard.points):
        raise MismatchedHorizonError("trajectories must have the same number of steps")
    if not math.isclose(pedestrian.dt, hazard.dt) or not math.isclose(pedestrian.start_time, hazard.start_time):
        raise MismatchedHorizonError("trajectories must share start_time and dt")
    dt = pedestrian.dt
    dist = np.hypot(*(pedestrian.points - hazard.points).T)
    k = _first_below(dist, thresholds.danger_distance_m)
    window = int(math.floor(thresholds.ttc_threshold / dt + 1e-9))
    in_window = float(dist[:window].min()) if window >= 1 else math.inf
    return RiskAssessment(
        pedestrian=pedestrian.agent,
        hazard=hazard.agent,
        ttc=None if k is None else (k + 1) * dt,
        min_predicted_distance=float(dist.min()),
        assessed_at=pedestrian.start_time if assessed_at is None else assessed_at,
        min_distance_in_window=in_window,
    )


def compute_ttc_batch(ped_ids: Sequence[str], ped_points: np.ndarray, hazard_ids: Sequence[str],
                      hazard_points: np.ndarray, dt: float, thresholds: RiskThresholds,
                      assessed_at: float) -> list[RiskAssessment]:
    """All pedestrian x hazard pairs at once; same rule as :func:`compute_ttc`.

    ``ped_points`` is (P, steps, 2) and ``hazard_points`` is (V, steps, 2).
    """
    if len(ped_ids) == 0 or len(hazard_ids) == 0:
        return []
    diff = ped_points[:, None, :, :] - hazard_points[None, :, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])  # (P, V, steps)
    below = dist < thresholds.danger_distance_m
    any_below = below.any(axis=2)
    first = below.argmax(axis=2)
    window = int(math.floor(thresholds.ttc_threshold / dt + 1e-9))
    in_window = dist[:, :, :window].min(axis=2) if window >= 1 else np.full(any_below.shape, math.inf)
    min_d = dist.min(axis=2)
    out = []
    for i, p in enumerate(ped_ids):
        for j, h in enumerate(hazard_ids):
            ttc = (int(first[i, j]) + 1) * dt if any_below[i, j] else None
            out.append(RiskAssessment(p, h, ttc, float(min_d[i, j]), assessed_at, float(in_window[i, j])))
    return out


def decide_warning(assessment: RiskAssessment, thresholds: RiskThresholds) -> WarningTrigger | None:
    if assessment.ttc is None or assessment.ttc > thresholds.ttc_threshold:
        return None
    return WarningTrigger(assessment.pedestrian, assessment.hazard, assessment.ttc, assessment.assessed_at)


# --------------------------------------------------------------------------
# Post-encroachment time


def _path(track: AgentTrack):
    pts = np.asarray(track.positions, dtype=float)
    keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0, axis=1)])
    pts = pts[keep]
    return Point(pts[0]) if len(pts) == 1 else LineString(pts)


def occupancy_interval(track: AgentTrack, centre, radius: float) -> tuple[float, float] | None:
    """First entry and last exit of the disc around ``centre``, treating the
    track as linear between samples."""
    times = np.asarray(track.times, dtype=float)
    pts = np.asarray(track.positions, dtype=float) - np.asarray(centre, dtype=float)
    crossings = []
    inside0 = np.hypot(*pts[0]) <= radius
    if inside0:
        crossings.append(times[0])
    for k in range(len(times) - 1):
        p0, p1 = pts[k], pts[k + 1]
        d = p1 - p0
        a = d @ d
        b = 2 * p0 @ d
        c = p0 @ p0 - radius**2
        if a == 0:
            continue
        disc = b * b - 4 * a * c
        if disc < 0:
            continue
        root = math.sqrt(disc)
        for s in ((-b - root) / (2 * a), (-b + root) / (2 * a)):
            if 0.0 <= s <= 1.0:
                crossings.append(times[k] + s * (times[k + 1] - times[k]))
    if np.hypot(*pts[-1]) <= radius:
        crossings.append(times[-1])
    if not crossings:
        return None
    return float(min(crossings)), float(max(crossings))


def conflict_point(track_a: AgentTrack, track_b: AgentTrack) -> tuple[np.ndarray, float]:
    """Midpoint of the closest pair of points between the two paths, and the
    distance between the paths."""
    pa, pb = nearest_points(_path(track_a), _path(track_b))
    mid = np.array([(pa.x + pb.x) / 2, (pa.y + pb.y) / 2])
    return mid, float(pa.distance(pb))


def compute_pet(track_a: AgentTrack, track_b: AgentTrack, conflict_radius: float = CONFLICT_RADIUS) -> float | None:
    """Gap between the first agent leaving the conflict disc and the second
    entering it; ``None`` if either never enters or the occupancies overlap."""
    centre, gap = conflict_point(track_a, track_b)
    if gap > conflict_radius:
        return None
    ia = occupancy_interval(track_a, centre, conflict_radius)
    ib = occupancy_interval(track_b, centre, conflict_radius)
    if ia is None or ib is None:
        return None
    first, second = sorted([ia, ib], key=lambda iv: iv[1])
    if second[0] <= first[1]:
        return None
    return second[0] - first[1]


# --------------------------------------------------------------------------
# Episodes, ROC and confusion matrices


@dataclass(frozen=True)
class Episode:
    """One (pedestrian, hazard) pair over a run, scored by its worst instant."""

    episode_id: str
    min_ttc: float | None
    min_distance: float  # m, over the whole horizon
    min_distance_in_window: float  # m, over steps within the TTC threshold
    collided: bool


def episodes_from_assessments(assessments: Iterable[RiskAssessment], collisions: Iterable[CollisionEvent],
                              pairs: Iterable[tuple[str, str]] = (), prefix: str = "") -> list[Episode]:
    """Reduce a risk log to episodes, one per pair. ``pairs`` adds episodes
    for pedestrian/hazard pairs that were never assessed."""
    hit = {frozenset((c.agent_a, c.agent_b)) for c in collisions}
    best: dict[tuple[str, str], list] = {pair: [None, math.inf, math.inf] for pair in pairs}
    for a in assessments:
        cur = best.setdefault((a.pedestrian, a.hazard), [None, math.inf, math.inf])
        if a.ttc is not None and (cur[0] is None or a.ttc < cur[0]):
            cur[0] = a.ttc
        cur[1] = min(cur[1], a.min_predicted_distance)
        cur[2] = min(cur[2], a.min_distance_in_window)
    return [
        Episode(f"{prefix}{p}|{h}", v[0], v[1], v[2], frozenset((p, h)) in hit)
        for (p, h), v in sorted(best.items())
    ]


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float | None
    fpr: float | None


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def tpr(self) -> float | None:
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def fpr(self) -> float | None:
        neg = self.fp + self.tn
        return self.fp / neg if neg else None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_nested(self) -> list[list[int]]:
        """[[TP, FP], [FN, TN]] layout."""
        return [[self.tp, self.fp], [self.fn, self.tn]]

    @classmethod
    def from_nested(cls, m) -> "ConfusionMatrix":
        (tp, fp), (fn, tn) = m
        return cls(int(tp), int(fp), int(fn), int(tn))

    def to_json(self) -> str:
        return json.dumps({"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                           "tpr": self.tpr, "fpr": self.fpr})


def build_confusion_matrix(decisions: Iterable[tuple[bool, bool]]) -> ConfusionMatrix:
    tp = fp = fn = tn = 0
    for warned, collided in decisions:
        if warned and collided:
            tp += 1
        elif warned:
            fp += 1
        elif collided:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def warns(episode: Episode, axis: str, threshold: float, px_per_meter: float = DEFAULT_PX_PER_METER) -> bool:
    """TTC axis: warn iff min TTC <= threshold (seconds).
    Distance axis: warn iff the closest approach within the fixed TTC window
    is strictly below ``threshold`` pixels."""
    if axis == "ttc":
        return episode.min_ttc is not None and episode.min_ttc <= threshold
    if axis == "distance":
        return episode.min_distance_in_window < threshold / px_per_meter
    raise ValueError(f"unknown ROC axis {axis!r}")


def sweep_roc(episodes: Sequence[Episode], axis: str, grid: Sequence[float],
              px_per_meter: float = DEFAULT_PX_PER_METER) -> list[RocPoint]:
    if not episodes:
        raise ValueError("empty episode set")
    grid = list(grid)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly increasing")
    points = []
    for thr in grid:
        cm = build_confusion_matrix((warns(e, axis, thr, px_per_meter), e.collided) for e in episodes)
        points.append(RocPoint(float(thr), cm.tpr, cm.fpr))
    return points


def youden_j(point: RocPoint) -> float | None:
    if point.tpr is None or point.fpr is None:
        return None
    return point.tpr - point.fpr


def select_threshold(points: Sequence[RocPoint]) -> RocPoint:
    """Maximise Youden's J; ties go to the smaller threshold."""
    if not points:
        raise ValueError("no ROC points")
    scored = [(youden_j(p), p) for p in points]
    defined = [(j, p) for j, p in scored if j is not None]
    if not defined:
        return min(points, key=lambda p: p.threshold)
    return min(defined, key=lambda jp: (-jp[0], jp[1].threshold))[1]


ROC_HEADER = ("axis", "threshold", "tpr", "fpr")


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6g}"


def roc_csv(axis: str, points: Sequence[RocPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROC_HEADER)
    for p in points:
        w.writerow([axis, f"{p.threshold:.6g}", _fmt(p.tpr), _fmt(p.fpr)])
    return buf.getvalue()


# Reported operating points, kept as reference fixtures.
REFERENCE_TTC_POINT = RocPoint(1.1, 0.958, 0.4)
REFERENCE_DISTANCE_POINT = RocPoint(30.0, 0.958, 0.345)
REFERENCE_CONFUSION = ConfusionMatrix.from_nested([[66, 45], [2, 119]])
