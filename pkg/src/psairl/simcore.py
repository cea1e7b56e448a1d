"""Microscopic corridor simulator: kinematics, Krauss expert, observations, rollouts.

Every vehicle is an agent that picks its speed for the next timestep. The
environment clamps requested speeds to what the vehicle can physically and
legally reach, never lets vehicles overlap, and holds vehicles at red stop
lines unless they are already too close to stop.

Observation layout (length ``11 + M``; the trailing 11 entries are addressed
with the negative index constants below so batched arrays work too)::

    [lane one-hot (M), lane_length, speed_limit, green, velocity,
     position, dist_to_light, leader_velocity, leader_position, gap,
     is_leading, has_exited]
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from graphlib import CycleError, TopologicalSorter
from typing import Callable, Iterable, Mapping, Protocol

import numpy as np

from .errors import InconsistentFlow, MalformedInput, MissingAction, NonFiniteAction, UnknownVehicle
from .roadnet import FlowSpec, RoadNetwork, SignalPlan, is_green, validate_flow, validate_plan

LANE_LENGTH = -11
SPEED_LIMIT = -10
GREEN = -9
VELOCITY = -8
POSITION = -7
DIST_TO_LIGHT = -6
LEADER_VELOCITY = -5
LEADER_POSITION = -4
GAP = -3
IS_LEADING = -2
HAS_EXITED = -1

N_BASE_FEATURES = 11


def obs_dim(n_lanes: int) -> int:
    return N_BASE_FEATURES + n_lanes


def lane_of(obs: np.ndarray) -> int:
    return int(np.argmax(obs[: len(obs) - N_BASE_FEATURES]))


@dataclass(frozen=True)
class DynamicsConfig:
    a_max: float = 2.0
    b_max: float = 4.0
    v_cap: float = 11.0
    tau: float = 1.0
    dt: float = 1.0
    vehicle_length: float = 5.0
    gamma: float = 0.99

    def __post_init__(self) -> None:
        for name in ("a_max", "b_max", "v_cap", "tau", "dt", "vehicle_length", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"DynamicsConfig.{name} must be > 0")
        if not self.gamma < 1:
            raise ValueError("DynamicsConfig.gamma must be < 1")

    def replace(self, **changes) -> "DynamicsConfig":
        return replace(self, **changes)


def feature_scale(n_lanes: int, v_cap: float) -> np.ndarray:
    """Divisors mapping raw observations to network inputs.

    Lengths and positions are scaled by 1000 m, speeds by ``v_cap`` and
    gap-like distances by 100 m.
    """
    tail = [1000.0, v_cap, 1.0, v_cap, 1000.0, 100.0, v_cap, 1000.0, 100.0, 1.0, 1.0]
    return np.concatenate([np.ones(n_lanes), np.array(tail)])


def normalize_obs(obs: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.asarray(obs, dtype=float) / scale


# -- Krauss car following ---------------------------------------------------


def krauss_safe_speed(v_leader: float, gap: float, b_max: float, tau: float, v_self: float = 0.0) -> float:
    """Largest speed that still lets the follower stop if the leader brakes at ``b_max``."""
    denom = (v_self + v_leader) / (2.0 * b_max) + tau
    return max(0.0, v_leader + (gap - v_leader * tau) / denom)


def stopping_distance(v: float, b_max: float, dt: float) -> float:
    """Distance covered while braking at ``b_max`` from speed ``v`` in discrete steps."""
    n = math.floor(v / (b_max * dt) + 1e-12)
    return dt * (n * v - b_max * dt * n * (n + 1) / 2.0)


def can_stop(v: float, dist: float, b_max: float, dt: float) -> bool:
    return stopping_distance(v, b_max, dt) <= dist + 1e-9


def max_stoppable_speed(dist: float, b_max: float, dt: float) -> float:
    """Largest next speed ``u`` with ``u * dt + stopping_distance(u) <= dist``.

    The left side is piecewise linear and increasing in ``u``; piece ``n``
    covers ``u`` in ``[n * b * dt, (n + 1) * b * dt]``.
    """
    if dist <= 0.0:
        return 0.0
    bdt = b_max * dt
    n = 0
    while True:
        u = (dist / dt + bdt * n * (n + 1) / 2.0) / (n + 1)
        if u <= (n + 1) * bdt:
            return u
        n += 1


def krauss_action(obs: np.ndarray, dyn: DynamicsConfig) -> float:
    """Deterministic Krauss speed command: as fast as possible while perfectly safe."""
    v = float(obs[VELOCITY])
    cands = [float(obs[SPEED_LIMIT]), dyn.v_cap, v + dyn.a_max * dyn.dt]
    if obs[IS_LEADING] < 0.5:
        cands.append(krauss_safe_speed(float(obs[LEADER_VELOCITY]), float(obs[GAP]), dyn.b_max, dyn.tau, v))
    d_light = float(obs[DIST_TO_LIGHT])
    if obs[GREEN] < 0.5 and can_stop(v, d_light, dyn.b_max, dyn.dt):
        cands.append(krauss_safe_speed(0.0, d_light, dyn.b_max, dyn.tau, v))
    return max(0.0, min(cands))


class Policy(Protocol):
    def __call__(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Map a batch of raw observations ``(n, 11 + M)`` to requested speeds ``(n,)``."""


class KraussPolicy:
    """Krauss expert as a batch policy; ``dyn`` may differ from the environment's (calibration)."""

    def __init__(self, dyn: DynamicsConfig):
        self.dyn = dyn

    def __call__(self, obs: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.array([krauss_action(o, self.dyn) for o in obs], dtype=float)


# -- environment ------------------------------------------------------------


@dataclass
class VehicleState:
    id: int
    route: tuple[int, ...]
    entry_time: int
    cursor: int = 0
    position: float = 0.0
    speed: float = 0.0
    active: bool = True
    exit_time: int | None = None
    route_offset: float = 0.0

    @property
    def lane_id(self) -> int:
        return self.route[self.cursor]

    @property
    def route_position(self) -> float:
        return self.route_offset + self.position


class TrafficEnv:
    """Single-threaded environment handle. Call :meth:`reset` before stepping."""

    def __init__(self, network: RoadNetwork, plan: SignalPlan, flow: FlowSpec, dyn: DynamicsConfig):
        validate_plan(plan, network)
        validate_flow(flow, network)
        self.network = network
        self.plan = plan
        self.flow = flow
        self.dyn = dyn
        self.n_lanes = network.n_lanes
        self._lane_order = self._downstream_first_order()
        self.t = 0
        self.vehicles: dict[int, VehicleState] = {}
        self._pending: dict[int, list] = {}
        self._exited_now: list[int] = []

    def _downstream_first_order(self) -> list[int]:
        graph = {lane.id: set(lane.successors) for lane in self.network.lanes}
        try:
            return list(TopologicalSorter(graph).static_order())
        except CycleError:
            return list(reversed(range(self.n_lanes)))

    # public API

    def reset(self, seed: int | None = None) -> dict[int, np.ndarray]:
        self.t = 0
        self.vehicles = {}
        self._exited_now = []
        self._pending = {}
        for entry in sorted(self.flow.vehicles, key=lambda v: v.enter):
            self._pending.setdefault(entry.route[0], []).append(entry)
        self._spawn()
        return self.observations()

    @property
    def active_ids(self) -> list[int]:
        return sorted(vid for vid, v in self.vehicles.items() if v.active)

    @property
    def finished(self) -> bool:
        return not self.active_ids and not any(self._pending.values())

    def time_s(self, t: int | None = None) -> float:
        return (self.t if t is None else t) * self.dyn.dt

    def lane_speed_cap(self, lane_id: int) -> float:
        return min(self.network.lane(lane_id).speed_limit, self.dyn.v_cap)

    def step(self, actions: Mapping[int, float]) -> tuple[dict[int, np.ndarray], dict[int, bool], int]:
        dyn = self.dyn
        active = self.active_ids
        requested: dict[int, float] = {}
        for vid in active:
            if vid not in actions:
                raise MissingAction(f"no action for active vehicle {vid}")
            a = float(actions[vid])
            if not math.isfinite(a):
                raise NonFiniteAction(f"vehicle {vid}: action {a}")
            requested[vid] = a

        now = self.time_s()
        by_lane: dict[int, list[VehicleState]] = {}
        for vid in active:
            veh = self.vehicles[vid]
            by_lane.setdefault(veh.lane_id, []).append(veh)
        old_rear = {lane: min(v.position for v in vs) for lane, vs in by_lane.items()}
        placed: dict[int, float] = {}
        processed: set[int] = set()

        def front_limit(lane: int) -> float:
            # nearest obstacle front position already settled on ``lane``
            vals = [placed[lane]] if lane in placed else []
            if lane not in processed and lane in old_rear:
                vals.append(old_rear[lane])
            return min(vals) - dyn.vehicle_length if vals else math.inf

        self._exited_now = []
        for lane_id in self._lane_order:
            processed.add(lane_id)
            for veh in sorted(by_lane.get(lane_id, []), key=lambda v: -v.position):
                self._move(veh, requested[veh.id], now, front_limit, placed)

        self.t += 1
        self._spawn()
        obs = self.observations(include_exited=True)
        done = {vid: (not self.vehicles[vid].active) for vid in obs}
        return obs, done, self.t

    def _move(self, veh: VehicleState, action: float, now: float, front_limit, placed: dict[int, float]) -> None:
        dyn = self.dyn
        lane = self.network.lane(veh.lane_id)
        upper = min(veh.speed + dyn.a_max * dyn.dt, self.lane_speed_cap(lane.id))
        lower = max(0.0, veh.speed - dyn.b_max * dyn.dt)
        to_line = lane.length - veh.position
        if not is_green(self.plan, self.network, lane.id, now) and can_stop(veh.speed, to_line, dyn.b_max, dyn.dt):
            # a vehicle that can still stop for the red is kept able to
            upper = max(lower, min(upper, max_stoppable_speed(to_line, dyn.b_max, dyn.dt)))
        v_new = min(max(action, lower), upper)
        start = veh.route_position
        target = veh.position + v_new * dyn.dt
        limit = front_limit(lane.id)
        if target <= lane.length or limit < lane.length:
            veh.position = max(veh.position, min(target, limit, lane.length))
        else:
            may_cross = is_green(self.plan, self.network, lane.id, now) or not can_stop(
                veh.speed, lane.length - veh.position, dyn.b_max, dyn.dt
            )
            if not may_cross:
                veh.position = lane.length
            elif veh.cursor == len(veh.route) - 1:
                veh.active = False
                veh.exit_time = self.t + 1
                veh.speed = v_new
                veh.position = lane.length
                self._exited_now.append(veh.id)
                return
            else:
                overshoot = target - lane.length
                nxt = self.network.lane(veh.route[veh.cursor + 1])
                room = min(front_limit(nxt.id), nxt.length)
                if room >= 0.0:
                    veh.cursor += 1
                    veh.route_offset += lane.length
                    veh.position = min(overshoot, room)
                else:
                    veh.position = lane.length
        veh.speed = (veh.route_position - start) / dyn.dt
        # lane-end clamps can leave round-off above the new lane's cap
        veh.speed = min(veh.speed, self.lane_speed_cap(veh.lane_id))
        placed[veh.lane_id] = min(placed.get(veh.lane_id, math.inf), veh.position)

    def _spawn(self) -> None:
        occupied: dict[int, float] = {}
        for v in self.vehicles.values():
            if v.active:
                occupied[v.lane_id] = min(occupied.get(v.lane_id, math.inf), v.position)
        for lane_id, queue in self._pending.items():
            if queue and queue[0].enter <= self.t:
                if occupied.get(lane_id, math.inf) - self.dyn.vehicle_length >= 0.0:
                    entry = queue.pop(0)
                    self.vehicles[entry.id] = VehicleState(entry.id, entry.route, entry_time=self.t)
                    occupied[lane_id] = 0.0

    # observations

    def observations(self, include_exited: bool = False) -> dict[int, np.ndarray]:
        by_lane: dict[int, list[VehicleState]] = {}
        for v in self.vehicles.values():
            if v.active:
                by_lane.setdefault(v.lane_id, []).append(v)
        for vs in by_lane.values():
            vs.sort(key=lambda v: v.position)
        out = {vid: self._observe(self.vehicles[vid], by_lane) for vid in self.active_ids}
        if include_exited:
            for vid in self._exited_now:
                out[vid] = self._observe(self.vehicles[vid], by_lane)
        return dict(sorted(out.items()))

    def observe(self, vehicle_id: int) -> np.ndarray:
        veh = self.vehicles.get(vehicle_id)
        if veh is None or not (veh.active or vehicle_id in self._exited_now):
            raise UnknownVehicle(vehicle_id)
        return self.observations(include_exited=True)[vehicle_id]

    def _leader(self, veh: VehicleState, by_lane: dict[int, list[VehicleState]]):
        """Nearest vehicle ahead along the route: same lane, else rearmost on the next route lane."""
        lane = self.network.lane(veh.lane_id)
        ahead = [v for v in by_lane.get(lane.id, []) if v.position > veh.position]
        if ahead:
            return ahead[0].speed, ahead[0].position
        if veh.cursor + 1 < len(veh.route):
            nxt = by_lane.get(veh.route[veh.cursor + 1])
            if nxt:
                return nxt[0].speed, lane.length + nxt[0].position
        return None

    def _observe(self, veh: VehicleState, by_lane) -> np.ndarray:
        M = self.n_lanes
        lane = self.network.lane(veh.lane_id)
        o = np.zeros(M + N_BASE_FEATURES)
        o[lane.id] = 1.0
        o[LANE_LENGTH] = lane.length
        o[SPEED_LIMIT] = lane.speed_limit
        o[GREEN] = 1.0 if is_green(self.plan, self.network, lane.id, self.time_s()) else 0.0
        o[VELOCITY] = veh.speed
        o[POSITION] = veh.position
        o[DIST_TO_LIGHT] = max(0.0, lane.length - veh.position)
        lead = None if not veh.active else self._leader(veh, by_lane)
        if lead is None:
            o[LEADER_VELOCITY] = 0.0
            o[LEADER_POSITION] = lane.length
            o[GAP] = max(0.0, lane.length - veh.position)
            o[IS_LEADING] = 1.0
        else:
            o[LEADER_VELOCITY] = lead[0]
            o[LEADER_POSITION] = lead[1]
            o[GAP] = max(0.0, lead[1] - veh.position - self.dyn.vehicle_length)
            o[IS_LEADING] = 0.0
        o[HAS_EXITED] = 0.0 if veh.active else 1.0
        return o


# -- trajectories -----------------------------------------------------------


@dataclass
class Transition:
    t: int
    lane: int
    pos: float
    speed: float
    action: float
    obs: np.ndarray
    next_obs: np.ndarray
    route_pos: float = 0.0


@dataclass
class TrajectorySet:
    """Per-vehicle time-ordered ``(s, a, s')`` records."""

    n_lanes: int
    vehicles: dict[int, list[Transition]] = field(default_factory=dict)
    horizon: int | None = None

    def __len__(self) -> int:
        return sum(len(v) for v in self.vehicles.values())

    def transitions(self) -> Iterable[tuple[int, Transition]]:
        for vid in sorted(self.vehicles):
            for tr in self.vehicles[vid]:
                yield vid, tr

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``(obs, actions, next_obs)`` over all records."""
        recs = [tr for _, tr in self.transitions()]
        d = obs_dim(self.n_lanes)
        if not recs:
            return np.zeros((0, d)), np.zeros(0), np.zeros((0, d))
        return (
            np.array([r.obs for r in recs]),
            np.array([r.action for r in recs]),
            np.array([r.next_obs for r in recs]),
        )

    def snapshots(self) -> dict[int, dict[int, tuple[float, float]]]:
        """``t -> {vehicle: (route-cumulative position, speed)}``."""
        out: dict[int, dict[int, tuple[float, float]]] = {}
        for vid, tr in self.transitions():
            out.setdefault(tr.t, {})[vid] = (tr.route_pos, tr.speed)
        return out

    def effective_horizon(self) -> int:
        if self.horizon is not None:
            return self.horizon
        return 1 + max((tr.t for _, tr in self.transitions()), default=-1)

    # JSONL

    def to_jsonl(self) -> str:
        lines = []
        for vid, tr in sorted(self.transitions(), key=lambda x: (x[1].t, x[0])):
            lines.append(
                json.dumps(
                    {
                        "veh": vid,
                        "t": tr.t,
                        "lane": tr.lane,
                        "pos": tr.pos,
                        "speed": tr.speed,
                        "action": tr.action,
                        "obs": [float(x) for x in tr.obs],
                        "next_obs": [float(x) for x in tr.next_obs],
                    }
                )
            )
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str, horizon: int | None = None) -> "TrajectorySet":
        by_veh: dict[int, list[Transition]] = {}
        n_lanes = None
        for k, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                obs = np.array(r["obs"], dtype=float)
                tr = Transition(
                    int(r["t"]), int(r["lane"]), float(r["pos"]), float(r["speed"]), float(r["action"]),
                    obs, np.array(r["next_obs"], dtype=float),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedInput(f"trajectory line {k + 1}: {exc}") from exc
            n_lanes = len(obs) - N_BASE_FEATURES
            by_veh.setdefault(int(r["veh"]), []).append(tr)
        for recs in by_veh.values():
            recs.sort(key=lambda tr: tr.t)
            _fill_route_positions(recs)
        return cls(n_lanes=n_lanes or 0, vehicles=by_veh, horizon=horizon)


def _fill_route_positions(recs: list[Transition]) -> None:
    offset = 0.0
    for prev, tr in zip([None] + recs[:-1], recs):
        if prev is not None and tr.lane != prev.lane:
            offset += float(prev.obs[LANE_LENGTH])
        tr.route_pos = offset + tr.pos


def _run(env: TrafficEnv, T: int, choose, record: str, n_lanes: int, horizon: int | None) -> TrajectorySet:
    obs = env.reset()
    trajs = TrajectorySet(n_lanes=n_lanes, horizon=horizon)
    for _ in range(T):
        ids = list(obs)
        t = env.t
        acts = choose(ids, obs, t)
        states = {}
        for i in ids:
            v = env.vehicles[i]
            states[i] = (v.lane_id, v.position, v.speed, v.route_position)
        next_obs, _, _ = env.step(acts)
        for i in ids:
            lane, pos, speed, rpos = states[i]
            a_rec = float(acts[i]) if record == "requested" else float(next_obs[i][VELOCITY])
            trajs.vehicles.setdefault(i, []).append(
                Transition(t, lane, pos, speed, a_rec, obs[i], next_obs[i], rpos)
            )
        obs = {i: o for i, o in next_obs.items() if env.vehicles[i].active}
    return trajs


def simulate_policy(
    network: RoadNetwork,
    plan: SignalPlan,
    flow: FlowSpec,
    dyn: DynamicsConfig,
    policy: Policy | Callable[[np.ndarray, np.random.Generator], np.ndarray],
    T: int,
    seed: int = 0,
    record: str = "requested",
) -> TrajectorySet:
    """Roll the shared ``policy`` out for ``T`` steps from a fresh reset.

    The policy is evaluated on the stacked observations of all active
    vehicles (ordered by id) once per step. ``record="realized"`` stores the
    speed each vehicle actually reached as its action, which is how recorded
    driving data looks; ``"requested"`` stores the raw policy output.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if record not in ("requested", "realized"):
        raise ValueError(f"record must be 'requested' or 'realized', got {record!r}")
    rng = np.random.default_rng(seed)

    def choose(ids, obs, _t):
        if not ids:
            return {}
        acts = np.asarray(policy(np.array([obs[i] for i in ids]), rng), dtype=float)
        return dict(zip(ids, acts.tolist()))

    env = TrafficEnv(network, plan, flow, dyn)
    return _run(env, T, choose, record, network.n_lanes, T)


def replay(network: RoadNetwork, plan: SignalPlan, flow: FlowSpec, dyn: DynamicsConfig,
           trajs: TrajectorySet) -> TrajectorySet:
    """Feed each vehicle's recorded actions back through a fresh environment."""
    table = {(vid, tr.t): tr.action for vid, tr in trajs.transitions()}

    def choose(ids, _obs, t):
        try:
            return {i: table[(i, t)] for i in ids}
        except KeyError as exc:
            raise InconsistentFlow(f"replay: no recorded action for (vehicle, t) = {exc}") from exc

    env = TrafficEnv(network, plan, flow, dyn)
    return _run(env, trajs.effective_horizon(), choose, "requested", network.n_lanes, trajs.horizon)
