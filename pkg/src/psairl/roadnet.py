"""Static road network, signal plan and traffic flow.

Positions are lane-local: meters from the lane start. Intersections have no
physical extent, so a vehicle that crosses one reappears on the successor
lane at the overshoot distance.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .errors import InconsistentFlow, InvariantViolation, MalformedInput, UnknownIntersection

GREEN = "GREEN"
RED = "RED"


@dataclass(frozen=True)
class Lane:
    id: int
    length: float
    speed_limit: float
    downstream_intersection: int | None = None
    successors: tuple[int, ...] = ()


@dataclass(frozen=True)
class Intersection:
    id: int


@dataclass(frozen=True)
class RoadNetwork:
    lanes: tuple[Lane, ...]
    intersections: tuple[Intersection, ...] = ()

    def __post_init__(self) -> None:
        validate_network(self)

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    def lane(self, lane_id: int) -> Lane:
        return self.lanes[lane_id]


@dataclass(frozen=True)
class SignalPlan:
    """Per-intersection cyclic phase programs.

    ``cycles[i]`` is a tuple of ``(phase_id, duration_seconds)``;
    ``permissions[i][phase_id][lane_id]`` is ``GREEN`` or ``RED``.
    """

    cycles: Mapping[int, tuple[tuple[int, float], ...]] = field(default_factory=dict)
    permissions: Mapping[int, Mapping[int, Mapping[int, str]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for iid, cycle in self.cycles.items():
            if not cycle:
                raise InvariantViolation(f"intersection {iid}: empty cycle")
            for phase, duration in cycle:
                if not duration > 0:
                    raise InvariantViolation(
                        f"intersection {iid}: phase {phase} duration must be > 0, got {duration}"
                    )
            for phase, _ in cycle:
                if phase not in self.permissions.get(iid, {}):
                    raise InvariantViolation(f"intersection {iid}: no permissions for phase {phase}")

    def cycle_length(self, intersection_id: int) -> float:
        if intersection_id not in self.cycles:
            raise UnknownIntersection(intersection_id)
        return float(sum(d for _, d in self.cycles[intersection_id]))


@dataclass(frozen=True)
class VehicleEntry:
    id: int
    enter: int
    route: tuple[int, ...]


@dataclass(frozen=True)
class FlowSpec:
    vehicles: tuple[VehicleEntry, ...] = ()


# -- validation -------------------------------------------------------------


def validate_network(net: RoadNetwork) -> None:
    if not net.lanes:
        raise InvariantViolation("lanes: network needs at least one lane")
    ids = [lane.id for lane in net.lanes]
    if ids != list(range(len(ids))):
        raise InvariantViolation(f"lanes.id: ids must be exactly 0..{len(ids) - 1} in order, got {ids}")
    known_intersections = {i.id for i in net.intersections}
    for lane in net.lanes:
        if not lane.length > 0:
            raise InvariantViolation(f"lanes[{lane.id}].length must be > 0, got {lane.length}")
        if not lane.speed_limit > 0:
            raise InvariantViolation(f"lanes[{lane.id}].speed_limit must be > 0, got {lane.speed_limit}")
        for succ in lane.successors:
            if not 0 <= succ < len(ids):
                raise InvariantViolation(f"lanes[{lane.id}].successors: unknown lane {succ}")
        di = lane.downstream_intersection
        if di is not None and di not in known_intersections:
            raise InvariantViolation(
                f"lanes[{lane.id}].downstream_intersection: unknown intersection {di}"
            )


def validate_plan(plan: SignalPlan, net: RoadNetwork) -> None:
    """Every signalized lane needs a permission in every phase of its intersection."""
    for lane in net.lanes:
        iid = lane.downstream_intersection
        if iid is None:
            continue
        if iid not in plan.cycles:
            raise InvariantViolation(f"signal plan lacks intersection {iid} (lane {lane.id})")
        for phase, _ in plan.cycles[iid]:
            perm = plan.permissions[iid][phase].get(lane.id)
            if perm not in (GREEN, RED):
                raise InvariantViolation(
                    f"intersections[{iid}].permissions[{phase}][{lane.id}] missing or invalid: {perm!r}"
                )


def validate_flow(flow: FlowSpec, net: RoadNetwork) -> None:
    seen: set[int] = set()
    last_entry: dict[int, int] = {}
    for veh in flow.vehicles:
        if veh.id in seen:
            raise InconsistentFlow(f"vehicles: duplicate id {veh.id}")
        seen.add(veh.id)
        if veh.enter < 0:
            raise InconsistentFlow(f"vehicle {veh.id}: enter must be >= 0")
        if not veh.route:
            raise InconsistentFlow(f"vehicle {veh.id}: empty route")
        for lane_id in veh.route:
            if not 0 <= lane_id < net.n_lanes:
                raise InconsistentFlow(f"vehicle {veh.id}: route lane {lane_id} not in network")
        for a, b in zip(veh.route, veh.route[1:]):
            if b not in net.lane(a).successors:
                raise InconsistentFlow(f"vehicle {veh.id}: route step {a}->{b} is not connected")
        entry_lane = veh.route[0]
        if veh.enter < last_entry.get(entry_lane, 0):
            raise InconsistentFlow(
                f"vehicle {veh.id}: entry times on lane {entry_lane} must be nondecreasing"
            )
        last_entry[entry_lane] = veh.enter


# -- signal lookup ----------------------------------------------------------


def phase_at(plan: SignalPlan, intersection_id: int, t: float) -> int:
    """Phase active at time ``t`` under cyclic repetition of the plan."""
    if intersection_id not in plan.cycles:
        raise UnknownIntersection(intersection_id)
    cycle = plan.cycles[intersection_id]
    tau = float(t) % plan.cycle_length(intersection_id)
    acc = 0.0
    for phase, duration in cycle:
        acc += duration
        if tau < acc:
            return phase
    return cycle[-1][0]


def is_green(plan: SignalPlan, net: RoadNetwork, lane_id: int, t: float) -> bool:
    """Unsignalized lanes are always green."""
    iid = net.lane(lane_id).downstream_intersection
    if iid is None:
        return True
    phase = phase_at(plan, iid, t)
    return plan.permissions[iid][phase][lane_id] == GREEN


# -- JSON -------------------------------------------------------------------


def _parse(text: str) -> Any:
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedInput(f"invalid JSON: {exc}") from exc


def _require(obj: Mapping, key: str, kind: type | tuple[type, ...], where: str) -> Any:
    if not isinstance(obj, Mapping) or key not in obj:
        raise MalformedInput(f"{where}.{key}: missing")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise MalformedInput(f"{where}.{key}: expected {kind}, got {type(value).__name__}")
    return value


def load_network(json_text: str) -> RoadNetwork:
    data = _parse(json_text)
    lanes_raw = _require(data, "lanes", list, "network")
    lanes = []
    for k, raw in enumerate(lanes_raw):
        where = f"lanes[{k}]"
        di = raw.get("downstream_intersection") if isinstance(raw, Mapping) else None
        if di is not None and (isinstance(di, bool) or not isinstance(di, int)):
            raise MalformedInput(f"{where}.downstream_intersection: expected int or null")
        succ = raw.get("successors", []) if isinstance(raw, Mapping) else []
        if not isinstance(succ, list) or any(isinstance(s, bool) or not isinstance(s, int) for s in succ):
            raise MalformedInput(f"{where}.successors: expected list of int")
        lanes.append(
            Lane(
                id=_require(raw, "id", int, where),
                length=float(_require(raw, "length", (int, float), where)),
                speed_limit=float(_require(raw, "speed_limit", (int, float), where)),
                downstream_intersection=di,
                successors=tuple(succ),
            )
        )
    inter_raw = data.get("intersections", [])
    if not isinstance(inter_raw, list):
        raise MalformedInput("network.intersections: expected list")
    inters = tuple(Intersection(_require(i, "id", int, f"intersections[{k}]")) for k, i in enumerate(inter_raw))
    return RoadNetwork(lanes=tuple(lanes), intersections=inters)


def network_to_dict(net: RoadNetwork) -> dict:
    return {
        "lanes": [
            {
                "id": lane.id,
                "length": lane.length,
                "speed_limit": lane.speed_limit,
                "downstream_intersection": lane.downstream_intersection,
                "successors": list(lane.successors),
            }
            for lane in net.lanes
        ],
        "intersections": [{"id": i.id} for i in net.intersections],
    }


def load_signal_plan(json_text: str) -> SignalPlan:
    data = _parse(json_text)
    cycles: dict[int, tuple[tuple[int, float], ...]] = {}
    perms: dict[int, dict[int, dict[int, str]]] = {}
    for k, raw in enumerate(_require(data, "intersections", list, "signal")):
        where = f"intersections[{k}]"
        iid = _require(raw, "id", int, where)
        cyc = []
        for j, entry in enumerate(_require(raw, "cycle", list, where)):
            cyc.append(
                (
                    _require(entry, "phase", int, f"{where}.cycle[{j}]"),
                    float(_require(entry, "duration", (int, float), f"{where}.cycle[{j}]")),
                )
            )
        cycles[iid] = tuple(cyc)
        table: dict[int, dict[int, str]] = {}
        for phase_key, lane_map in _require(raw, "permissions", dict, where).items():
            if not isinstance(lane_map, dict):
                raise MalformedInput(f"{where}.permissions[{phase_key}]: expected object")
            try:
                table[int(phase_key)] = {int(lk): v for lk, v in lane_map.items()}
            except ValueError as exc:
                raise MalformedInput(f"{where}.permissions: non-integer key ({exc})") from exc
            for lk, v in lane_map.items():
                if v not in (GREEN, RED):
                    raise MalformedInput(f"{where}.permissions[{phase_key}][{lk}]: {v!r} is not GREEN/RED")
        perms[iid] = table
    return SignalPlan(cycles=cycles, permissions=perms)


def signal_plan_to_dict(plan: SignalPlan) -> dict:
    out = []
    for iid in sorted(plan.cycles):
        out.append(
            {
                "id": iid,
                "cycle": [{"phase": p, "duration": d} for p, d in plan.cycles[iid]],
                "permissions": {
                    str(p): {str(l): v for l, v in sorted(lanes.items())}
                    for p, lanes in sorted(plan.permissions[iid].items())
                },
            }
        )
    return {"intersections": out}


def load_flow(json_text: str) -> FlowSpec:
    data = _parse(json_text)
    vehicles = []
    for k, raw in enumerate(_require(data, "vehicles", list, "flow")):
        where = f"vehicles[{k}]"
        route = _require(raw, "route", list, where)
        if any(isinstance(r, bool) or not isinstance(r, int) for r in route):
            raise MalformedInput(f"{where}.route: expected list of int")
        vehicles.append(VehicleEntry(_require(raw, "id", int, where), _require(raw, "enter", int, where), tuple(route)))
    return FlowSpec(tuple(vehicles))


def flow_to_dict(flow: FlowSpec) -> dict:
    return {"vehicles": [{"id": v.id, "enter": v.enter, "route": list(v.route)} for v in flow.vehicles]}


# -- generators -------------------------------------------------------------


def gen_corridor(
    n_lanes: int, lane_length: float, speed_limit: float, green: float, red: float
) -> tuple[RoadNetwork, SignalPlan]:
    """Chain of lanes joined by signalized intersections, all on the same cycle."""
    if n_lanes < 1 or not (lane_length > 0 and speed_limit > 0 and green > 0 and red > 0):
        raise ValueError("gen_corridor: all arguments must be positive")
    lanes = []
    for i in range(n_lanes):
        last = i == n_lanes - 1
        lanes.append(
            Lane(
                id=i,
                length=float(lane_length),
                speed_limit=float(speed_limit),
                downstream_intersection=None if last else i,
                successors=() if last else (i + 1,),
            )
        )
    inters = tuple(Intersection(i) for i in range(n_lanes - 1))
    cycles = {i: ((0, float(green)), (1, float(red))) for i in range(n_lanes - 1)}
    perms = {i: {0: {i: GREEN}, 1: {i: RED}} for i in range(n_lanes - 1)}
    return RoadNetwork(tuple(lanes), inters), SignalPlan(cycles, perms)


def gen_flow(
    n_vehicles: int, route: Iterable[int], headway: int, start: int = 0, first_id: int = 0
) -> FlowSpec:
    """Vehicles entering one after another every ``headway`` steps along ``route``."""
    route = tuple(route)
    return FlowSpec(
        tuple(VehicleEntry(first_id + k, start + k * headway, route) for k in range(n_vehicles))
    )
