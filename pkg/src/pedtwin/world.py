"""Seeded waypoint-kinematics intersection simulator.

Agents follow polylines of waypoints. The speed stored on a waypoint is the
speed used on the leg that *departs* from it; the speed on the last waypoint
is unused. All agents advance synchronously from the same pre-tick snapshot.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

AGENT_KINDS = ("pedestrian", "vehicle", "scooter")
DEFAULT_RADIUS = {"pedestrian": 0.3, "vehicle": 1.0, "scooter": 0.5}
HAZARD_KINDS = ("vehicle", "scooter")

BOX_HALF = 10.0  # 20 m x 20 m intersection box centred on the origin
ROAD_HALF = 4.0
LANE_OFFSET = 2.0
CROSSWALK_OFFSET = 7.0


class ScenarioError(ValueError):
    """Base class for scenario file problems."""


class ScenarioParseError(ScenarioError):
    pass


class ScenarioValidationError(ScenarioError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    speed: float


@dataclass(frozen=True)
class Agent:
    id: str
    kind: str
    radius: float
    waypoints: tuple[Waypoint, ...]

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ScenarioValidationError("kind", f"unknown agent kind {self.kind!r}")
        if not (self.radius > 0):
            raise ScenarioValidationError("radius", f"must be > 0, got {self.radius}")
        if len(self.waypoints) == 0:
            raise ScenarioValidationError("waypoints", "must be non-empty")
        for wp in self.waypoints:
            if not (wp.speed >= 0):
                raise ScenarioValidationError("speed", f"must be >= 0, got {wp.speed}")
            if not (math.isfinite(wp.x) and math.isfinite(wp.y)):
                raise ScenarioValidationError("waypoints", "non-finite coordinate")

    @property
    def max_speed(self) -> float:
        return max(wp.speed for wp in self.waypoints[:-1]) if len(self.waypoints) > 1 else 0.0


@dataclass(frozen=True)
class Scenario:
    seed: int
    duration: float
    dt: float
    agents: tuple[Agent, ...]
    px_per_meter: float = 20.0

    def __post_init__(self):
        if not (self.dt > 0):
            raise ScenarioValidationError("dt_s", f"must be > 0, got {self.dt}")
        if not (self.duration >= self.dt):
            raise ScenarioValidationError("duration_s", "must be >= dt_s")
        if not (self.px_per_meter > 0):
            raise ScenarioValidationError("px_per_meter", "must be > 0")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioValidationError("id", "agent ids must be unique")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt))

    def agent(self, agent_id: str) -> Agent:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)


# --------------------------------------------------------------------------
# Scenario file I/O


def _require(obj: dict, key: str, where: str = ""):
    if not isinstance(obj, dict) or key not in obj:
        raise ScenarioValidationError(key, f"missing field{where}")
    return obj[key]


def _number(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioValidationError(name, f"expected a number, got {value!r}")
    return float(value)


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario document must be a JSON object")
    seed = _require(doc, "seed")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ScenarioValidationError("seed", "expected an integer")
    agents = []
    raw_agents = _require(doc, "agents")
    if not isinstance(raw_agents, list):
        raise ScenarioValidationError("agents", "expected a list")
    for raw in raw_agents:
        wps = _require(raw, "waypoints", " in agent")
        if not isinstance(wps, list):
            raise ScenarioValidationError("waypoints", "expected a list")
        waypoints = tuple(
            Waypoint(
                _number(_require(w, "x_m"), "x_m"),
                _number(_require(w, "y_m"), "y_m"),
                _number(_require(w, "speed_mps"), "speed_mps"),
            )
            for w in wps
        )
        agent_id = _require(raw, "id", " in agent")
        if not isinstance(agent_id, str) or not agent_id:
            raise ScenarioValidationError("id", "expected a non-empty string")
        agents.append(
            Agent(
                id=agent_id,
                kind=_require(raw, "kind", " in agent"),
                radius=_number(_require(raw, "radius_m", " in agent"), "radius"),
                waypoints=waypoints,
            )
        )
    return Scenario(
        seed=seed,
        duration=_number(_require(doc, "duration_s"), "duration_s"),
        dt=_number(_require(doc, "dt_s"), "dt_s"),
        px_per_meter=_number(_require(doc, "px_per_meter"), "px_per_meter"),
        agents=tuple(agents),
    )


def load_scenario(text: str | bytes) -> Scenario:
    """Parse and validate a scenario JSON document."""
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ScenarioParseError(f"malformed scenario JSON: {exc}") from exc
    return scenario_from_dict(doc)


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "seed": scenario.seed,
        "duration_s": scenario.duration,
        "dt_s": scenario.dt,
        "px_per_meter": scenario.px_per_meter,
        "agents": [
            {
                "id": a.id,
                "kind": a.kind,
                "radius_m": a.radius,
                "waypoints": [
                    {"x_m": w.x, "y_m": w.y, "speed_mps": w.speed} for w in a.waypoints
                ],
            }
            for a in scenario.agents
        ],
    }


def dump_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), separators=(",", ":")) + "\n"


# --------------------------------------------------------------------------
# Kinematics


@dataclass(frozen=True)
class WorldState:
    """Snapshot of every agent at ``tick``; arrays are read-only."""

    tick: int
    dt: float
    ids: tuple[str, ...]
    positions: np.ndarray  # (n, 2)
    velocities: np.ndarray  # (n, 2)
    targets: np.ndarray  # (n,) index of the waypoint each agent heads to

    def __post_init__(self):
        for arr in (self.positions, self.velocities, self.targets):
            arr.flags.writeable = False

    @property
    def time(self) -> float:
        return self.tick * self.dt

    @property
    def agents(self) -> list[tuple[str, tuple[float, float], tuple[float, float]]]:
        return [
            (i, (float(p[0]), float(p[1])), (float(v[0]), float(v[1])))
            for i, p, v in zip(self.ids, self.positions, self.velocities)
        ]


def _leg_velocity(agent: Agent, target: int, pos: np.ndarray) -> np.ndarray:
    if target >= len(agent.waypoints):
        return np.zeros(2)
    wp = agent.waypoints[target]
    delta = np.array([wp.x, wp.y]) - pos
    dist = math.hypot(delta[0], delta[1])
    speed = agent.waypoints[target - 1].speed
    if dist == 0.0 or speed == 0.0:
        return np.zeros(2)
    return delta / dist * speed


def initial_state(scenario: Scenario) -> WorldState:
    n = len(scenario.agents)
    pos = np.zeros((n, 2))
    vel = np.zeros((n, 2))
    targets = np.ones(n, dtype=int)
    for i, a in enumerate(scenario.agents):
        pos[i] = (a.waypoints[0].x, a.waypoints[0].y)
        vel[i] = _leg_velocity(a, 1, pos[i])
    return WorldState(0, scenario.dt, tuple(a.id for a in scenario.agents), pos, vel, targets)


def _advance(agent: Agent, pos: np.ndarray, target: int, dt: float):
    """Move one agent along its polyline for ``dt`` seconds, carrying leftover
    time across waypoints."""
    pos = pos.copy()
    remaining = dt
    wps = agent.waypoints
    while target < len(wps):
        speed = wps[target - 1].speed
        goal = np.array([wps[target].x, wps[target].y])
        delta = goal - pos
        dist = math.hypot(delta[0], delta[1])
        if dist == 0.0:
            target += 1
            continue
        if speed == 0.0:
            break
        need = dist / speed
        if need <= remaining:
            pos = goal
            remaining -= need
            target += 1
            continue
        pos = pos + delta / dist * speed * remaining
        break
    return pos, target, _leg_velocity(agent, target, pos)


def step(state: WorldState, scenario: Scenario) -> WorldState:
    """Advance every agent one tick; saturates at the end of the scenario."""
    if state.tick >= scenario.n_ticks:
        return state
    pos = np.empty_like(state.positions)
    vel = np.empty_like(state.velocities)
    targets = np.empty_like(state.targets)
    for i, agent in enumerate(scenario.agents):
        pos[i], targets[i], vel[i] = _advance(
            agent, state.positions[i], int(state.targets[i]), scenario.dt
        )
    return WorldState(state.tick + 1, scenario.dt, state.ids, pos, vel, targets)


def _leg_table(agent: Agent):
    pts = np.array([(w.x, w.y) for w in agent.waypoints], dtype=float)
    speeds = np.array([w.speed for w in agent.waypoints[:-1]], dtype=float)
    lengths = np.hypot(*np.diff(pts, axis=0).T) if len(pts) > 1 else np.zeros(0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        durations = np.where(lengths == 0, 0.0, lengths / speeds)
    starts = np.concatenate([[0.0], np.cumsum(durations)])
    return pts, speeds, lengths, starts


def sample_agent(agent: Agent, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form positions and velocities of ``agent`` at ``times``."""
    times = np.asarray(times, dtype=float)
    pts, speeds, lengths, starts = _leg_table(agent)
    pos = np.repeat(pts[-1][None, :], len(times), axis=0)
    vel = np.zeros((len(times), 2))
    if len(pts) == 1:
        return pos, vel
    # leg k spans [starts[k], starts[k+1]); exact arrivals belong to the next leg
    leg = np.searchsorted(starts, times, side="right") - 1
    for k in range(len(lengths)):
        mask = leg == k
        if not mask.any():
            continue
        if lengths[k] == 0:
            pos[mask] = pts[k]
            continue
        direction = (pts[k + 1] - pts[k]) / lengths[k]
        if speeds[k] == 0:
            pos[mask] = pts[k]
            continue
        travelled = (times[mask] - starts[k]) * speeds[k]
        pos[mask] = pts[k] + travelled[:, None] * direction
        vel[mask] = direction * speeds[k]
    return pos, vel


def target_index(agent: Agent, times: np.ndarray) -> np.ndarray:
    """Index of the waypoint ``agent`` is heading to at each time
    (``len(waypoints)`` once it has arrived)."""
    starts = _leg_table(agent)[3]
    return np.searchsorted(starts, np.asarray(times, dtype=float), side="right")


def position_at(agent: Agent, t: float) -> np.ndarray:
    return sample_agent(agent, np.array([t]))[0][0]


@dataclass
class SimulationRun:
    """All ticks of one scenario as dense arrays (tick, agent, xy)."""

    scenario: Scenario
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    targets: np.ndarray  # (tick, agent)
    ids: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        self.ids = tuple(a.id for a in self.scenario.agents)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[WorldState]:
        for k in range(len(self.times)):
            yield self.state(k)

    def state(self, k: int) -> WorldState:
        return WorldState(
            k,
            self.scenario.dt,
            self.ids,
            self.positions[k].copy(),
            self.velocities[k].copy(),
            self.targets[k].copy(),
        )

    def track(self, agent_id: str) -> "AgentTrack":
        i = self.ids.index(agent_id)
        return AgentTrack(agent_id, self.times, self.positions[:, i], self.velocities[:, i])


def simulate(scenario: Scenario) -> SimulationRun:
    """Sample every agent at every tick 0..n_ticks.

    Uses the closed-form leg model, which agrees with iterating :func:`step`.
    """
    times = np.arange(scenario.n_ticks + 1) * scenario.dt
    n = len(scenario.agents)
    pos = np.zeros((len(times), n, 2))
    vel = np.zeros((len(times), n, 2))
    targets = np.zeros((len(times), n), dtype=int)
    for i, agent in enumerate(scenario.agents):
        pos[:, i], vel[:, i] = sample_agent(agent, times)
        targets[:, i] = target_index(agent, times)
    return SimulationRun(scenario, times, pos, vel, targets)


@dataclass(frozen=True)
class AgentTrack:
    """Timestamped 2-D trajectory of one agent (ground truth or estimate)."""

    agent_id: str
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray | None = None

    def position_at_nearest(self, t: float, tol: float) -> np.ndarray | None:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol:
            return None
        return self.positions[k]


# --------------------------------------------------------------------------
# Collisions


@dataclass(frozen=True, order=True)
class CollisionEvent:
    time: float
    agent_a: str
    agent_b: str


def _stack_run(run, scenario: Scenario):
    if isinstance(run, SimulationRun):
        return run.times, run.positions
    states = list(run)
    if not states:
        return np.zeros(0), np.zeros((0, len(scenario.agents), 2))
    times = np.array([s.time for s in states])
    return times, np.stack([np.asarray(s.positions) for s in states])


def detect_collisions(run: SimulationRun | Iterable[WorldState], scenario: Scenario) -> list[CollisionEvent]:
    """One event per agent pair per contiguous interval of overlapping footprints."""
    times, positions = _stack_run(run, scenario)
    ids = [a.id for a in scenario.agents]
    radii = np.array([a.radius for a in scenario.agents])
    n = len(ids)
    if n < 2:
        return []
    iu, ju = np.triu_indices(n, k=1)
    reach = radii[iu] + radii[ju]
    in_contact = np.zeros(len(iu), dtype=bool)
    events = []
    for k in range(len(times)):
        p = positions[k]
        d = np.hypot(p[iu, 0] - p[ju, 0], p[iu, 1] - p[ju, 1])
        now = d < reach
        for idx in np.flatnonzero(now & ~in_contact):
            a, b = sorted((ids[iu[idx]], ids[ju[idx]]))
            events.append(CollisionEvent(float(times[k]), a, b))
        in_contact = now
    events.sort()
    return events


# --------------------------------------------------------------------------
# Scenario generators


def _rot(points: np.ndarray, quarter_turns: int) -> np.ndarray:
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][quarter_turns % 4]
    r = np.array([[c, -s], [s, c]], dtype=float)
    return points @ r.T


def _agent(agent_id: str, kind: str, pts: np.ndarray, speeds: Sequence[float]) -> Agent:
    speeds = list(speeds) + [0.0]
    return Agent(
        id=agent_id,
        kind=kind,
        radius=DEFAULT_RADIUS[kind],
        waypoints=tuple(
            Waypoint(round(float(x), 3) + 0.0, round(float(y), 3) + 0.0, round(float(v), 3))
            for (x, y), v in zip(pts, speeds)
        ),
    )


def _pedestrian_path(rng: np.random.Generator, speed: float, delay: float) -> tuple[np.ndarray, list[float]]:
    """Crosswalk path in the canonical frame (west crosswalk, heading north)."""
    x0 = -CROSSWALK_OFFSET + rng.uniform(-1.0, 1.0)
    approach = speed * delay + rng.uniform(2.0, 6.0)
    exit_len = rng.uniform(3.0, 8.0)
    exit_dir = rng.choice([-1.0, 1.0])
    mid_y = rng.uniform(-1.0, 1.0)
    mid_x = x0 + rng.uniform(-0.4, 0.4)
    pts = np.array(
        [
            [x0 - approach, -BOX_HALF],
            [x0, -BOX_HALF],
            [mid_x, mid_y],
            [x0, BOX_HALF],
            [x0 + exit_dir * exit_len, BOX_HALF],
        ]
    )
    leg_speeds = np.clip(speed * rng.uniform(0.9, 1.1, size=4), 1.0, 1.8)
    leg_speeds[0] = speed
    if rng.random() < 0.5:
        pts[:, 1] *= -1
    return pts, list(leg_speeds)


def generate_random_scenario(
    seed: int,
    n_pedestrians: int,
    n_vehicles: int,
    duration: float,
    dt: float = 0.1,
    px_per_meter: float = 20.0,
) -> Scenario:
    """Pedestrians cross the four crosswalks of a 20 m box at 1.0-1.8 m/s;
    vehicles drive straight through on four lanes at 5-14 m/s. Start times are
    staggered over ``duration`` by starting agents further up their approach."""
    if n_pedestrians < 0 or n_vehicles < 0:
        raise ValueError("agent counts must be >= 0")
    rng = np.random.default_rng(seed)
    agents = []
    for i in range(n_pedestrians):
        speed = rng.uniform(1.0, 1.8)
        delay = rng.uniform(0.0, max(0.0, duration - 30.0))
        pts, speeds = _pedestrian_path(rng, speed, delay)
        pts = _rot(pts, int(rng.integers(4)))
        agents.append(_agent(f"ped{i:03d}", "pedestrian", pts, speeds))
    for i in range(n_vehicles):
        speed = rng.uniform(5.0, 14.0)
        delay = rng.uniform(0.0, max(0.0, duration - 10.0))
        start = BOX_HALF + 20.0 + speed * delay
        pts = np.array([[-start, -LANE_OFFSET], [BOX_HALF + 30.0, -LANE_OFFSET]])
        pts = _rot(pts, int(rng.integers(4)))
        agents.append(_agent(f"veh{i:03d}", "vehicle", pts, [speed]))
    return Scenario(seed=seed, duration=float(duration), dt=dt, agents=tuple(agents), px_per_meter=px_per_meter)


def generate_encounter_scenario(seed: int, dt: float = 0.1, px_per_meter: float = 20.0) -> Scenario:
    """One pedestrian on the west crosswalk and one vehicle whose arrival at
    the crosswalk is offset by a random amount; roughly a quarter collide."""
    rng = np.random.default_rng(seed)
    x0 = -CROSSWALK_OFFSET
    curb = -ROAD_HALF - 0.5
    ped_speed = rng.uniform(1.0, 1.8)
    cross_speed = np.clip(ped_speed * rng.uniform(0.6, 1.3), 0.4, 1.8)
    ped_start_y = curb - ped_speed * rng.uniform(3.0, 5.0)
    t_curb = (curb - ped_start_y) / ped_speed
    ped = _agent(
        "ped000",
        "pedestrian",
        np.array([[x0, ped_start_y], [x0, curb], [x0, BOX_HALF]]),
        [ped_speed, cross_speed],
    )
    lane = rng.choice([-LANE_OFFSET, LANE_OFFSET])
    t_ped_lane = t_curb + (lane - curb) / cross_speed
    veh_speed = rng.uniform(5.0, 14.0)
    offset = rng.uniform(-4.0, 4.0)
    t_veh = max(t_ped_lane + offset, 2.0)
    direction = 1.0 if lane < 0 else -1.0
    start_x = x0 - direction * veh_speed * t_veh
    end_x = x0 + direction * 40.0
    veh = _agent("veh000", "vehicle", np.array([[start_x, lane], [end_x, lane]]), [veh_speed])
    duration = round(t_veh + 4.0 + 5.0, 1)
    return Scenario(seed=seed, duration=duration, dt=dt, agents=(ped, veh), px_per_meter=px_per_meter)


def head_on_scenario(dt: float = 0.1, duration: float = 6.0, px_per_meter: float = 20.0) -> Scenario:
    """Stationary pedestrian; vehicle approaching head-on at 5 m/s from 20 m."""
    ped = Agent("ped000", "pedestrian", 0.3, (Waypoint(0.0, 0.0, 0.0),))
    veh = Agent("veh000", "vehicle", 1.0, (Waypoint(20.0, 0.0, 5.0), Waypoint(-20.0, 0.0, 0.0)))
    return Scenario(seed=0, duration=duration, dt=dt, agents=(ped, veh), px_per_meter=px_per_meter)


def turning_walk_scenario(turn_deg: float = 20.0, speed: float = 1.4, dt: float = 0.1) -> Scenario:
    """Two pedestrians walking opposite ways through a 10 m anchor triangle
    (see :func:`pedtwin.uwb.default_anchors`), each making one turn."""
    h = math.radians(turn_deg)
    leg = 14.0
    p0 = np.array([-8.0, 3.0])
    p1 = p0 + [leg, 0.0]
    p2 = p1 + leg * np.array([math.cos(h), math.sin(h)])
    q0 = np.array([-8.0 + 1.95 * leg, 4.5])
    q1 = q0 - [leg, 0.0]
    q2 = q1 - leg * np.array([math.cos(h), -math.sin(h)])
    agents = tuple(
        Agent(f"ped{i:03d}", "pedestrian", DEFAULT_RADIUS["pedestrian"],
              tuple(Waypoint(float(x), float(y), speed if k < 2 else 0.0) for k, (x, y) in enumerate(pts)))
        for i, pts in enumerate([(p0, p1, p2), (q0, q1, q2)])
    )
    return Scenario(seed=0, duration=round(2 * leg / speed, 1), dt=dt, agents=agents)


# --------------------------------------------------------------------------
# Trajectory dump

TRAJECTORY_HEADER = ("t_s", "agent_id", "x_m", "y_m", "vx_mps", "vy_mps")


def trajectory_csv(run: SimulationRun) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for k, t in enumerate(run.times):
        for i, agent_id in enumerate(run.ids):
            p, v = run.positions[k, i], run.velocities[k, i]
            w.writerow([repr(float(t)), agent_id, repr(float(p[0])), repr(float(p[1])), repr(float(v[0])), repr(float(v[1]))])
    return buf.getvalue()
