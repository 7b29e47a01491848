"""Two-way-ranging simulation and least-squares multilateration in 2-D."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

MIN_TRIANGLE_AREA = 1e-6  # m^2
STEP_TOL = 1e-9
NONCONVERGED_TOL = 1e-6
MAX_ITERATIONS = 50


class LocalizationError(ValueError):
    pass


class InsufficientRangesError(LocalizationError):
    pass


class DegenerateGeometryError(LocalizationError):
    pass


def _triangle_area(a, b, c) -> float:
    return 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))


def _non_collinear(points: np.ndarray) -> bool:
    return any(_triangle_area(*tri) > MIN_TRIANGLE_AREA for tri in combinations(points, 3))


@dataclass(frozen=True)
class AnchorSet:
    ids: tuple[str, ...]
    positions: np.ndarray  # (n, 2)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        object.__setattr__(self, "positions", pos)
        pos.flags.writeable = False
        if len(self.ids) < 3 or pos.shape != (len(self.ids), 2):
            raise DegenerateGeometryError("need at least 3 anchors with 2-D positions")
        if len(set(self.ids)) != len(self.ids):
            raise DegenerateGeometryError("duplicate anchor id")
        for i, j in combinations(range(len(self.ids)), 2):
            if np.array_equal(pos[i], pos[j]):
                raise DegenerateGeometryError(f"anchors {self.ids[i]} and {self.ids[j]} coincide")
        if not _non_collinear(pos):
            raise DegenerateGeometryError("anchors are collinear")

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]], prefix: str = "A") -> "AnchorSet":
        return cls(tuple(f"{prefix}{i}" for i in range(len(points))), np.asarray(points, dtype=float))

    def index(self, anchor_id: str) -> int:
        return self.ids.index(anchor_id)


def load_anchors(text: str | bytes) -> AnchorSet:
    doc = json.loads(text)
    try:
        rows = doc["anchors"]
        return AnchorSet(
            tuple(str(r["id"]) for r in rows),
            np.array([[float(r["x_m"]), float(r["y_m"])] for r in rows]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad anchor file: missing {exc}") from exc


def dump_anchors(anchors: AnchorSet) -> str:
    rows = [{"id": i, "x_m": float(p[0]), "y_m": float(p[1])} for i, p in zip(anchors.ids, anchors.positions)]
    return json.dumps({"anchors": rows}, separators=(",", ":")) + "\n"


def default_anchors(side: float = 10.0) -> AnchorSet:
    """Equilateral roadside triangle with the given side length."""
    return AnchorSet.from_points([(0.0, 0.0), (side, 0.0), (side / 2, side * math.sqrt(3) / 2)])


@dataclass(frozen=True)
class RangeMeasurement:
    anchor_id: str
    distance: float
    timestamp: float
    valid: bool = True


@dataclass(frozen=True)
class RangeNoiseModel:
    sigma: float = 0.05
    dropout_p: float = 0.0
    nlos_bias: float = 0.3
    nlos_p: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.nlos_bias < 0:
            raise ValueError("nlos_bias must be >= 0")
        for name in ("dropout_p", "nlos_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


NOISELESS = RangeNoiseModel(sigma=0.0)


@dataclass(frozen=True)
class PositionEstimate:
    position: np.ndarray
    residual_rms: float
    n_ranges_used: int
    timestamp: float
    converged: bool = True
    iterations: int = 0


def simulate_ranges(
    true_position,
    anchors: AnchorSet,
    noise: RangeNoiseModel,
    rng_seed: int | np.random.Generator,
    timestamp: float = 0.0,
) -> list[RangeMeasurement]:
    """One TWR reading per anchor, with Gaussian noise, NLOS bias and dropout."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = len(anchors.ids)
    truth = np.asarray(true_position, dtype=float)
    d = np.hypot(*(anchors.positions - truth).T)
    gauss = rng.normal(0.0, 1.0, n) * noise.sigma
    nlos = rng.random(n) < noise.nlos_p
    dropped = rng.random(n) < noise.dropout_p
    d = np.maximum(d + gauss + np.where(nlos, noise.nlos_bias, 0.0), 0.0)
    return [
        RangeMeasurement(anchors.ids[i], float(d[i]), timestamp, not bool(dropped[i]))
        for i in range(n)
    ]


def _objective(p: np.ndarray, a: np.ndarray, r: np.ndarray) -> float:
    return float(np.sum((np.hypot(*(p - a).T) - r) ** 2))


def linear_initialization(a: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Anchor-difference linear system: subtract the first range equation."""
    lhs = 2.0 * (a[1:] - a[0])
    rhs = (np.sum(a[1:] ** 2, axis=1) - np.sum(a[0] ** 2)) - (r[1:] ** 2 - r[0] ** 2)
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return sol


def solve_position(a: np.ndarray, r: np.ndarray):
    """Linearized start then Gauss-Newton on sum_i (|p - a_i| - r_i)^2.

    Returns (position, converged, iterations).
    """
    p = linear_initialization(a, r)
    cost = _objective(p, a, r)
    step_norm = math.inf
    it = 0
    while it < MAX_ITERATIONS:
        it += 1
        diff = p - a
        dist = np.hypot(*diff.T)
        safe = dist > 1e-12
        jac = np.zeros_like(diff)
        jac[safe] = diff[safe] / dist[safe, None]
        resid = dist - r
        delta, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        # halve steps that would increase the cost; GN direction is kept
        scale = 1.0
        for _ in range(30):
            trial = p + scale * delta
            trial_cost = _objective(trial, a, r)
            if trial_cost <= cost:
                break
            scale *= 0.5
        else:
            trial, trial_cost = p, cost
        step_norm = float(np.linalg.norm(trial - p))
        p, cost = trial, trial_cost
        if step_norm < STEP_TOL:
            break
    converged = step_norm <= NONCONVERGED_TOL
    return p, converged, it


def multilaterate(ranges: Sequence[RangeMeasurement], anchors: AnchorSet) -> PositionEstimate:
    used = [m for m in ranges if m.valid]
    if len(used) < 3:
        raise InsufficientRangesError(f"need >= 3 valid ranges, got {len(used)}")
    ids = [m.anchor_id for m in used]
    if len(set(ids)) != len(ids):
        raise LocalizationError("ranges must reference distinct anchors")
    try:
        idx = [anchors.index(i) for i in ids]
    except ValueError as exc:
        raise LocalizationError(f"unknown anchor in ranges: {exc}") from exc
    a = anchors.positions[idx]
    if not _non_collinear(a):
        raise DegenerateGeometryError("anchors used for this fix are collinear")
    r = np.array([m.distance for m in used])
    p, converged, it = solve_position(a, r)
    rms = math.sqrt(_objective(p, a, r) / len(used))
    return PositionEstimate(p, rms, len(used), max(m.timestamp for m in used), converged, it)


def localization_error(estimate, truth) -> float:
    """Euclidean distance between estimated and true positions."""
    p = estimate.position if isinstance(estimate, PositionEstimate) else estimate
    q = truth.position if isinstance(truth, PositionEstimate) else truth
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(math.hypot(p[0] - q[0], p[1] - q[1]))


def mean_localization_error(estimates, truths) -> float:
    errs = [localization_error(e, t) for e, t in zip(estimates, truths)]
    return float(np.mean(errs))


def fix_frequency(fix_times) -> float:
    """Position fixes per second, from the mean interval between fixes."""
    if len(fix_times) < 2:
        return 0.0
    return (len(fix_times) - 1) / (fix_times[-1] - fix_times[0])


@dataclass(frozen=True)
class BenchmarkRow:
    scenario_label: str
    mean_error: float
    std_error: float
    freq_hz: float


BENCHMARK_HEADER = ("scenario", "mean_error_m", "std_error_m", "freq_hz")


def accuracy_benchmark(scenario, anchors: AnchorSet, noise: RangeNoiseModel, schedule, rng_seed: int,
                       fix_period_in_slot: float = 0.1, label: str | None = None) -> list[BenchmarkRow]:
    """Mean and std of per-sample localization error over all scheduled users,
    and the achieved fix frequency per user.

    Errors are taken on the estimated track at the scenario tick rate, so
    multi-user runs include the interpolated samples between fixes. Ticks
    before a user's second fix are warm-up and are not scored.
    """
    from .tdma import run_scheduled_localization
    from .world import simulate

    if not schedule.user_order:
        raise ValueError("schedule has no users")
    result = run_scheduled_localization(scenario, anchors, noise, schedule, fix_period_in_slot, rng_seed)
    run = simulate(scenario)
    errors = []
    freqs = []
    for user in schedule.user_order:
        est = result.tracks[user]
        truth = run.track(user)
        fixes = result.fixes[user]
        if len(fixes) < 2:
            continue
        # warm-up: no velocity until the second fix
        ok = est.times >= fixes[1].timestamp - 1e-9
        errors.append(np.hypot(*(est.positions[ok] - truth.positions[ok]).T))
        freqs.append(fix_frequency([f.timestamp for f in result.fixes[user]]))
    if not errors:
        raise ValueError("no user obtained two fixes")
    errors = np.concatenate(errors)
    if label is None:
        label = {1: "single", 2: "two_users"}.get(schedule.n_users, f"{schedule.n_users}_users")
    return [BenchmarkRow(label, float(errors.mean()), float(errors.std(ddof=1)) if len(errors) > 1 else 0.0,
                         float(np.mean(freqs)))]
