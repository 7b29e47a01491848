"""Constant-velocity Kalman tracking and multi-step trajectory prediction.

State is ``[x, y, vx, vy]`` in metres and metres per second; only position
is observed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .world import AgentTrack, generate_random_scenario, simulate

_I4 = np.eye(4)
H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
INITIAL_COVARIANCE = np.diag([1.0, 1.0, 4.0, 4.0])
PEDESTRIAN_ACCEL_SIGMA = 0.5
VEHICLE_ACCEL_SIGMA = 1.5


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class KfState:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[2:]


@dataclass(frozen=True)
class PredictedTrajectory:
    agent: str
    start_time: float
    dt: float
    points: np.ndarray  # (steps, 2); row k is the position at start_time + (k+1)*dt

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError("prediction needs at least one point")
        if not (self.dt > 0):
            raise ValueError("dt must be > 0")

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(1, len(self.points) + 1)


@dataclass(frozen=True)
class PredictionMetrics:
    ade: float
    fde: float
    n_samples: int


@lru_cache(maxsize=256)
def transition(dt: float) -> np.ndarray:
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    f.flags.writeable = False
    return f


@lru_cache(maxsize=256)
def white_accel_noise(dt: float, accel_sigma: float) -> np.ndarray:
    """Discrete white-noise-acceleration covariance per axis."""
    a, b, c = dt**4 / 4, dt**3 / 2, dt**2
    q = np.array([[a, 0, b, 0], [0, a, 0, b], [b, 0, c, 0], [0, b, 0, c]]) * accel_sigma**2
    q.flags.writeable = False
    return q


def kf_predict(state: KfState, dt: float, process_noise_accel_sigma: float = PEDESTRIAN_ACCEL_SIGMA) -> KfState:
    if not (dt > 0):
        raise ValueError("dt must be > 0")
    f = transition(dt)
    p = f @ state.covariance @ f.T + white_accel_noise(dt, process_noise_accel_sigma)
    return KfState(f @ state.mean, 0.5 * (p + p.T))


def kf_update(state: KfState, measurement, measurement_noise_sigma: float) -> KfState:
    z = np.asarray(measurement, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("measurement must be finite")
    if not (measurement_noise_sigma > 0):
        raise ValueError("measurement_noise_sigma must be > 0")
    r = measurement_noise_sigma**2
    p = state.covariance
    s = p[:2, :2] + np.diag((r, r))
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    s_inv = np.array([[s[1, 1], -s[0, 1]], [-s[1, 0], s[0, 0]]]) / det
    gain = p[:, :2] @ s_inv
    mean = state.mean + gain @ (z - state.mean[:2])
    # Joseph form keeps the covariance symmetric PSD
    i_kh = _I4 - gain @ H
    p = i_kh @ p @ i_kh.T + r * (gain @ gain.T)
    return KfState(mean, 0.5 * (p + p.T))


def init_state(p1, t1: float, p2, t2: float) -> KfState:
    """Bootstrap from two fixes with a finite-difference velocity."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    v = (p2 - p1) / (t2 - t1)
    return KfState(np.concatenate([p2, v]), INITIAL_COVARIANCE.copy())


def predict_trajectory(state: KfState, horizon_steps: int, dt: float, agent: str = "",
                       start_time: float = 0.0) -> PredictedTrajectory:
    if horizon_steps < 1:
        raise ValueError("horizon_steps must be >= 1")
    # the mean of repeated constant-velocity predicts, in closed form
    steps = dt * np.arange(1, horizon_steps + 1)
    pts = state.mean[:2] + steps[:, None] * state.mean[2:]
    return PredictedTrajectory(agent, start_time, dt, pts)


def evaluate_ade_fde(predicted: PredictedTrajectory, truth: AgentTrack) -> PredictionMetrics:
    """Average and final displacement error against the nearest truth tick."""
    if len(truth.times) == 0:
        raise CoverageError("empty truth track")
    tol = 0.5 * (np.min(np.diff(truth.times)) if len(truth.times) > 1 else predicted.dt)
    gt = []
    for t in predicted.times:
        p = truth.position_at_nearest(t, tol + 1e-9)
        if p is None:
            raise CoverageError(f"truth does not cover t={t:.3f}")
        gt.append(p)
    err = np.hypot(*(predicted.points - np.array(gt)).T)
    return PredictionMetrics(float(err.mean()), float(err[-1]), len(err))


class Predictor(Protocol):
    """Anything that turns a track history into a predicted trajectory.

    A learned predictor plugs in here by implementing ``observe`` and
    ``predict`` with the same signatures.
    """

    def observe(self, agent: str, t: float, position) -> None: ...

    def predict(self, agent: str, t: float) -> PredictedTrajectory | None: ...


class KalmanPredictor:
    """Per-agent constant-velocity filters keyed by agent id."""

    def __init__(self, horizon_steps: int = 30, dt: float = 0.1, measurement_sigma: float = 0.05,
                 accel_sigma: dict[str, float] | float = PEDESTRIAN_ACCEL_SIGMA):
        self.horizon_steps = horizon_steps
        self.dt = dt
        self.measurement_sigma = measurement_sigma
        self.accel_sigma = accel_sigma
        self.states: dict[str, KfState] = {}
        self._time: dict[str, float] = {}
        self._first: dict[str, tuple[float, np.ndarray]] = {}

    def _sigma(self, agent: str) -> float:
        if isinstance(self.accel_sigma, dict):
            return self.accel_sigma.get(agent, PEDESTRIAN_ACCEL_SIGMA)
        return self.accel_sigma

    def forget(self, agent: str) -> None:
        self.states.pop(agent, None)
        self._time.pop(agent, None)
        self._first.pop(agent, None)

    def advance(self, agent: str, t: float) -> None:
        """Time-update a live filter to ``t`` without a measurement."""
        if agent in self.states and t > self._time[agent]:
            self.states[agent] = kf_predict(self.states[agent], t - self._time[agent], self._sigma(agent))
            self._time[agent] = t

    def observe(self, agent: str, t: float, position) -> None:
        pos = np.asarray(position, dtype=float)
        if agent not in self.states:
            if agent in self._first and t > self._first[agent][0]:
                t0, p0 = self._first.pop(agent)
                self.states[agent] = init_state(p0, t0, pos, t)
                self._time[agent] = t
            else:
                self._first[agent] = (t, pos)
            return
        self.advance(agent, t)
        self.states[agent] = kf_update(self.states[agent], pos, self.measurement_sigma)

    def predict(self, agent: str, t: float) -> PredictedTrajectory | None:
        state = self.states.get(agent)
        if state is None:
            return None
        self.advance(agent, t)
        return predict_trajectory(self.states[agent], self.horizon_steps, self.dt, agent, t)


def track_ade_fde(track: AgentTrack, measurements: np.ndarray, horizon_steps: int, dt: float,
                  measurement_sigma: float, accel_sigma: float = PEDESTRIAN_ACCEL_SIGMA,
                  warmup: int = 2) -> list[PredictionMetrics]:
    """Filter ``measurements`` (one per track tick) and score a prediction
    from every tick whose full horizon is covered by ``track``."""
    kp = KalmanPredictor(horizon_steps, dt, measurement_sigma, accel_sigma)
    out = []
    t_end = track.times[-1]
    for k, t in enumerate(track.times):
        kp.observe(track.agent_id, float(t), measurements[k])
        if k + 1 < warmup or t + horizon_steps * dt > t_end + 1e-9:
            continue
        pred = kp.predict(track.agent_id, float(t))
        if pred is not None:
            out.append(evaluate_ade_fde(pred, track))
    return out


def aggregate(metrics: Sequence[PredictionMetrics]) -> PredictionMetrics:
    if not metrics:
        return PredictionMetrics(float("nan"), float("nan"), 0)
    return PredictionMetrics(
        float(np.mean([m.ade for m in metrics])),
        float(np.mean([m.fde for m in metrics])),
        len(metrics),
    )


def kf_benchmark(seed: int = 0, n_pedestrians: int = 30, duration: float = 120.0, horizon_steps: int = 30,
                 dt: float = 0.1, measurement_sigma: float = 0.05) -> PredictionMetrics:
    """ADE/FDE of the KF over the walking part of every pedestrian in a
    generated scenario, with Gaussian position noise on the measurements."""
    sc = generate_random_scenario(seed, n_pedestrians, 0, duration, dt=dt)
    run = simulate(sc)
    rng = np.random.default_rng(seed)
    metrics = []
    for agent in sc.agents:
        track = run.track(agent.id)
        moving = np.flatnonzero(np.hypot(*track.velocities.T) > 0)
        if len(moving) <= horizon_steps + 2:
            continue
        sl = slice(moving[0], moving[-1] + 1)
        walk = AgentTrack(agent.id, track.times[sl], track.positions[sl])
        meas = walk.positions + rng.normal(0.0, measurement_sigma, walk.positions.shape)
        metrics.extend(track_ade_fde(walk, meas, horizon_steps, dt, measurement_sigma))
    return aggregate(metrics)


METRICS_HEADER = ("predictor", "ade_m", "fde_m", "n_samples")


def metrics_csv(rows: dict[str, PredictionMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for name, m in rows.items():
        w.writerow([name, f"{m.ade:.6f}", f"{m.fde:.6f}", m.n_samples])
    return buf.getvalue()
