"""Cyclic time-division ranging schedule with constant-velocity gap filling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .uwb import (
    AnchorSet,
    LocalizationError,
    RangeNoiseModel,
    multilaterate,
    simulate_ranges,
)
from .world import AgentTrack, Scenario, sample_agent

# slot lookups treat times within this of a boundary as on the boundary
BOUNDARY_TOL = 1e-9


class ScheduleError(ValueError):
    pass


class DuplicateUserError(ScheduleError):
    pass


class InterpolationError(ValueError):
    pass


@dataclass(frozen=True)
class TdmaSchedule:
    user_order: tuple[str, ...]
    slot_duration: float
    slot_dead_time: float = 0.0

    def __post_init__(self):
        if len(self.user_order) < 1:
            raise ScheduleError("schedule needs at least one user")
        if len(set(self.user_order)) != len(self.user_order):
            raise DuplicateUserError("duplicate user in schedule")
        if not (self.slot_duration > 0):
            raise ScheduleError("slot_duration must be > 0")
        if not (0 <= self.slot_dead_time < self.slot_duration):
            raise ScheduleError("slot_dead_time must be in [0, slot_duration)")

    @property
    def n_users(self) -> int:
        return len(self.user_order)

    @property
    def cycle_length(self) -> float:
        return self.n_users * self.slot_duration


def build_schedule(users: Sequence[str], slot_duration: float, slot_dead_time: float = 0.0) -> TdmaSchedule:
    return TdmaSchedule(tuple(users), float(slot_duration), float(slot_dead_time))


def reference_schedule(users: Sequence[str]) -> tuple[TdmaSchedule, float]:
    """Schedule and in-slot fix period that give 10 Hz for one user and one
    fix per 10/3 s cycle per user for two users (reconnection dead time)."""
    if len(users) == 1:
        return build_schedule(users, 0.1), 0.1
    slot = 5.0 / 3.0
    return build_schedule(users, slot, slot_dead_time=1.6), 0.1


def slot_index(schedule: TdmaSchedule, time: float) -> int:
    """Absolute slot number containing ``time`` (half-open slots)."""
    return int(math.floor(time / schedule.slot_duration + BOUNDARY_TOL))


def active_user(schedule: TdmaSchedule, time: float) -> str:
    if time < 0:
        raise ValueError("time must be >= 0")
    return schedule.user_order[slot_index(schedule, time) % schedule.n_users]


@dataclass(frozen=True)
class TrackFix:
    user: str
    position: np.ndarray
    timestamp: float


def interpolate_position(fixes: Sequence[TrackFix], query_time: float) -> np.ndarray:
    """Propagate the newer of the last two fixes with their finite-difference
    velocity; extrapolates past the newer fix."""
    if len(fixes) < 2:
        raise InterpolationError("need two fixes; hold the last position instead")
    f1, f2 = fixes[-2], fixes[-1]
    span = f2.timestamp - f1.timestamp
    if span == 0:
        raise InterpolationError("fixes have identical timestamps")
    if query_time < f1.timestamp:
        raise InterpolationError("query precedes the earlier fix")
    p1 = np.asarray(f1.position, dtype=float)
    p2 = np.asarray(f2.position, dtype=float)
    v = (p2 - p1) / span
    return p2 + v * (query_time - f2.timestamp)


def fix_times(schedule: TdmaSchedule, user: str, fix_period: float, until: float) -> np.ndarray:
    """Times at which ``user`` completes a fix, up to and including ``until``."""
    if not (fix_period > 0):
        raise ScheduleError("fix_period must be > 0")
    slot = schedule.slot_duration
    usable = slot - schedule.slot_dead_time
    per_slot = int(math.floor((usable - BOUNDARY_TOL) / fix_period)) + 1
    offsets = schedule.slot_dead_time + fix_period * np.arange(per_slot)
    pos = schedule.user_order.index(user)
    cycles = int(math.ceil(until / schedule.cycle_length)) + 1
    starts = (np.arange(cycles) * schedule.n_users + pos) * slot
    times = (starts[:, None] + offsets[None, :]).ravel()
    return times[times <= until + BOUNDARY_TOL]


@dataclass
class ScheduledLocalization:
    tracks: dict[str, AgentTrack]
    fixes: dict[str, list[TrackFix]]


def run_scheduled_localization(
    scenario: Scenario,
    anchors: AnchorSet,
    noise: RangeNoiseModel,
    schedule: TdmaSchedule,
    fix_period_in_slot: float = 0.1,
    rng_seed: int = 0,
) -> ScheduledLocalization:
    """Fix each user during its own slots; fill the rest of the scenario tick
    grid by constant-velocity propagation from the two latest fixes."""
    ids = [a.id for a in scenario.agents]
    for user in schedule.user_order:
        if user not in ids:
            raise ScheduleError(f"scheduled user {user!r} not in scenario")
    rng = np.random.default_rng(rng_seed)
    times = np.arange(scenario.n_ticks + 1) * scenario.dt
    per_user_times = {u: fix_times(schedule, u, fix_period_in_slot, scenario.duration) for u in schedule.user_order}
    # draw ranges in global time order so one stream serves all users
    order = sorted((t, schedule.user_order.index(u), u) for u, ts in per_user_times.items() for t in ts)
    truth = {u: dict(zip(ts, sample_agent(scenario.agent(u), ts)[0])) for u, ts in per_user_times.items()}
    fixes: dict[str, list[TrackFix]] = {u: [] for u in schedule.user_order}
    for t, _, user in order:
        ranges = simulate_ranges(truth[user][t], anchors, noise, rng, timestamp=float(t))
        try:
            est = multilaterate(ranges, anchors)
        except LocalizationError:
            continue
        fixes[user].append(TrackFix(user, est.position, float(t)))

    tracks = {}
    for user, fs in fixes.items():
        out = np.full((len(times), 2), np.nan)
        if fs:
            ft = np.array([f.timestamp for f in fs])
            latest = np.searchsorted(ft, times + BOUNDARY_TOL, side="right") - 1
            for k, j in enumerate(latest):
                if j < 0:
                    continue
                if j == 0:
                    out[k] = fs[0].position
                else:
                    out[k] = interpolate_position(fs[j - 1 : j + 1], times[k])
        tracks[user] = AgentTrack(user, times, out)
    return ScheduledLocalization(tracks, fixes)
