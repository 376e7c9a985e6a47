"""Deterministic ground-truth worlds.

A scenario scripts each VRU as a sequence of movement-primitive phases with
closed-form speed profiles, places sensing agents and occluding obstacles,
and defines the ego conflict geometry used by the warning metrics. Truth is
generated analytically, so positions are exact integrals of the speed
profile and every query is reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .core import (
    AgentKind,
    KinematicState,
    MovementPrimitive,
    SimulationError,
    VruKind,
    primitives_for,
    wrap_angle,
)
from .perception import SensorModel

# speeds below this are treated as stopped when a stopping phase decays
STOP_CLAMP = 0.05

DEFAULT_TICK_HZ = 25.0
DEFAULT_V_MAX = {VruKind.PEDESTRIAN: 1.5, VruKind.CYCLIST: 4.0}
DEFAULT_TAU = {VruKind.PEDESTRIAN: 1.0, VruKind.CYCLIST: 1.5}

_CRUISE = (MovementPrimitive.WALKING, MovementPrimitive.PEDALING)
_SPEED_UP = (MovementPrimitive.STARTING, MovementPrimitive.ACCELERATION)
_SLOW_DOWN = (MovementPrimitive.STOPPING, MovementPrimitive.DECELERATION)


class ScenarioError(SimulationError):
    """Scenario document violates the schema or an invariant."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class Phase:
    """One scripted movement phase. Parameters that a primitive does not use
    are ignored (e.g. omega outside turning)."""

    primitive: MovementPrimitive
    start: float
    v_max: float | None = None
    tau: float | None = None
    omega: float | None = None
    gesture: bool = False


@dataclass(frozen=True)
class RectObstacle:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    label: str = ""

    def blocks(self, p, q) -> bool:
        """True when the open segment p-q intersects the rectangle."""
        return _segment_hits_rect(p[0], p[1], q[0], q[1],
                                  self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class SegmentObstacle:
    x1: float
    y1: float
    x2: float
    y2: float
    label: str = ""

    def blocks(self, p, q) -> bool:
        return _segments_intersect(p[0], p[1], q[0], q[1],
                                   self.x1, self.y1, self.x2, self.y2)


def _segments_intersect(ax, ay, bx, by, cx, cy, dx, dy) -> bool:
    def orient(ox, oy, px, py, qx, qy):
        return (px - ox) * (qy - oy) - (py - oy) * (qx - ox)

    d1 = orient(ax, ay, bx, by, cx, cy)
    d2 = orient(ax, ay, bx, by, dx, dy)
    d3 = orient(cx, cy, dx, dy, ax, ay)
    d4 = orient(cx, cy, dx, dy, bx, by)
    if ((d1 > 0) != (d2 > 0) or d1 == 0 or d2 == 0) and \
       ((d3 > 0) != (d4 > 0) or d3 == 0 or d4 == 0):
        # conservative on touching endpoints: treat as intersecting
        if d1 == 0 and d2 == 0:  # collinear
            lo1, hi1 = min(ax, bx), max(ax, bx)
            lo2, hi2 = min(cx, dx), max(cx, dx)
            if hi1 - lo1 < 1e-12 and hi2 - lo2 < 1e-12:  # vertical
                lo1, hi1 = min(ay, by), max(ay, by)
                lo2, hi2 = min(cy, dy), max(cy, dy)
            return hi1 >= lo2 and hi2 >= lo1
        return True
    return False


def _segment_hits_rect(ax, ay, bx, by, xmin, ymin, xmax, ymax) -> bool:
    # quick reject / accept via slab clipping (Liang-Barsky)
    t0, t1 = 0.0, 1.0
    dx, dy = bx - ax, by - ay
    for p, q in ((-dx, ax - xmin), (dx, xmax - ax), (-dy, ay - ymin), (dy, ymax - ay)):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return False
            if r > t0:
                t0 = r
        else:
            if r < t0:
                return False
            if r < t1:
                t1 = r
    return t0 <= t1


@dataclass(frozen=True)
class VruConfig:
    vru_id: int
    kind: VruKind
    x: float
    y: float
    heading: float
    plan: tuple[Phase, ...]
    extent: float  # bounding radius, metres


@dataclass(frozen=True)
class NetworkParams:
    latency: float = 0.05
    jitter: float = 0.02
    loss: float = 0.05
    range_m: float = 300.0
    budget: int = 8
    queue_ttl: float = 1.0


@dataclass(frozen=True)
class AgentConfig:
    agent_id: int
    kind: AgentKind
    x: float
    y: float
    heading: float
    vx: float = 0.0
    vy: float = 0.0
    join: float = 0.0
    leave: float = math.inf
    sensor: SensorModel | None = None
    network: NetworkParams = field(default_factory=NetworkParams)
    reliability: float | None = None  # None = default for the kind
    attached_vru: int | None = None   # smart devices ride a VRU

    def position_at(self, t: float) -> tuple[float, float]:
        return self.x + self.vx * t, self.y + self.vy * t


@dataclass(frozen=True)
class ConflictSpec:
    x: float
    y: float
    vru_id: int
    radius: float = 1.0
    time: float | None = None  # resolved against truth when omitted


@dataclass(frozen=True)
class GroundTruthState:
    vru_id: int
    time: float
    state: KinematicState
    primitive: MovementPrimitive
    kind: VruKind
    extent: float
    gesture: bool = False

    @property
    def x(self):
        return self.state.x

    @property
    def y(self):
        return self.state.y


@dataclass(frozen=True)
class _PhaseState:
    """Phase with its entry conditions resolved (start pose and speed)."""

    phase: Phase
    t0: float
    x0: float
    y0: float
    v0: float
    heading0: float
    target: float  # asymptotic speed of the phase


@dataclass(frozen=True)
class Scenario:
    duration: float
    tick_hz: float
    vrus: tuple[VruConfig, ...]
    agents: tuple[AgentConfig, ...]
    obstacles: tuple[RectObstacle | SegmentObstacle, ...]
    conflict: ConflictSpec | None
    network_defaults: NetworkParams
    compiled: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def dt(self) -> float:
        return 1.0 / self.tick_hz

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration * self.tick_hz))

    def vru(self, vru_id: int) -> VruConfig:
        for v in self.vrus:
            if v.vru_id == vru_id:
                return v
        raise ScenarioError(f"unknown vru id {vru_id}")

    @property
    def ego(self) -> AgentConfig:
        for a in self.agents:
            if a.kind == AgentKind.EGO:
                return a
        raise ScenarioError("scenario has no ego-vehicle agent")

    def conflict_time(self) -> float | None:
        """Ground-truth time at which the conflict VRU reaches the conflict
        point (first entry into the conflict radius)."""
        if self.conflict is None:
            return None
        if self.conflict.time is not None:
            return self.conflict.time
        return self.compiled["conflict_time"]


# --- phase compilation and closed forms ------------------------------------


def _phase_target(phase: Phase, v0: float) -> float:
    prim = phase.primitive
    if prim == MovementPrimitive.WAITING:
        return 0.0
    if prim in _CRUISE:
        return v0
    if prim in _SPEED_UP:
        return phase.v_max
    if prim in _SLOW_DOWN:
        return 0.0
    if prim == MovementPrimitive.TURNING:
        return v0
    raise ScenarioError(f"unhandled primitive {prim}")


def _speed_at(ps: _PhaseState, dt: float) -> float:
    prim = ps.phase.primitive
    if prim == MovementPrimitive.WAITING:
        return 0.0
    if prim in _CRUISE or prim == MovementPrimitive.TURNING:
        return ps.v0
    tau = ps.phase.tau
    if prim in _SPEED_UP:
        return ps.target + (ps.v0 - ps.target) * math.exp(-dt / tau)
    # stopping / deceleration: exponential decay with a hard stop clamp
    v = ps.v0 * math.exp(-dt / tau)
    return v if v >= STOP_CLAMP else 0.0


def _distance_at(ps: _PhaseState, dt: float) -> float:
    """Exact integral of the phase speed over [0, dt]."""
    prim = ps.phase.primitive
    if prim == MovementPrimitive.WAITING:
        return 0.0
    if prim in _CRUISE or prim == MovementPrimitive.TURNING:
        return ps.v0 * dt
    tau = ps.phase.tau
    if prim in _SPEED_UP:
        e = math.exp(-dt / tau)
        return ps.target * dt + (ps.v0 - ps.target) * tau * (1.0 - e)
    # decay with clamp: frozen once the speed crosses the clamp
    if ps.v0 <= STOP_CLAMP:
        return 0.0
    t_clamp = tau * math.log(ps.v0 / STOP_CLAMP)
    if dt <= t_clamp:
        return ps.v0 * tau * (1.0 - math.exp(-dt / tau))
    return tau * (ps.v0 - STOP_CLAMP)


def _accel_at(ps: _PhaseState, dt: float) -> float:
    """Tangential acceleration dv/dt within the phase."""
    prim = ps.phase.primitive
    if prim in _SPEED_UP:
        return (ps.target - _speed_at(ps, dt)) / ps.phase.tau
    if prim in _SLOW_DOWN:
        v = _speed_at(ps, dt)
        return -v / ps.phase.tau if v > 0.0 else 0.0
    return 0.0


def _phase_end_pose(ps: _PhaseState, dt: float) -> tuple[float, float, float, float]:
    """Position, speed, heading after dt inside this phase."""
    v = _speed_at(ps, dt)
    if ps.phase.primitive == MovementPrimitive.TURNING:
        w = ps.phase.omega
        h = ps.heading0 + w * dt
        if abs(w) < 1e-12:
            x = ps.x0 + ps.v0 * dt * math.cos(ps.heading0)
            y = ps.y0 + ps.v0 * dt * math.sin(ps.heading0)
        else:
            r = ps.v0 / w
            x = ps.x0 + r * (math.sin(h) - math.sin(ps.heading0))
            y = ps.y0 - r * (math.cos(h) - math.cos(ps.heading0))
        return x, y, v, h
    dist = _distance_at(ps, dt)
    x = ps.x0 + dist * math.cos(ps.heading0)
    y = ps.y0 + dist * math.sin(ps.heading0)
    return x, y, v, ps.heading0


def compile_plan(vru: VruConfig) -> tuple[_PhaseState, ...]:
    """Resolve each phase's entry pose/speed by chaining terminal states."""
    states = []
    x, y, heading = vru.x, vru.y, vru.heading
    first = vru.plan[0]
    v = first.v_max if first.primitive in _CRUISE else 0.0
    for i, phase in enumerate(vru.plan):
        target = _phase_target(phase, v)
        ps = _PhaseState(phase, phase.start, x, y, v, heading, target)
        states.append(ps)
        if i + 1 < len(vru.plan):
            dt = vru.plan[i + 1].start - phase.start
            x, y, v, heading = _phase_end_pose(ps, dt)
    return tuple(states)


def _compiled_plan(scenario: Scenario, vru_id: int) -> tuple[_PhaseState, ...]:
    return scenario.compiled["plans"][vru_id]


def speed_profile(plan: tuple[Phase, ...] | VruConfig, t: float,
                  duration: float | None = None) -> float:
    """Speed of the scripted profile at time t (phase-continuous)."""
    if isinstance(plan, VruConfig):
        vru = plan
    else:
        vru = VruConfig(-1, VruKind.CYCLIST, 0.0, 0.0, 0.0, tuple(plan), 0.8)
    if t < 0.0 or (duration is not None and t > duration):
        raise ScenarioError(f"time {t} outside scenario")
    states = compile_plan(vru)
    ps = _locate_phase(states, t)
    return _speed_at(ps, t - ps.t0)


def _locate_phase(states: tuple[_PhaseState, ...], t: float) -> _PhaseState:
    current = states[0]
    for ps in states:
        if ps.t0 <= t:
            current = ps
        else:
            break
    return current


def ground_truth_at(scenario: Scenario, t: float) -> list[GroundTruthState]:
    """Exact state of every VRU at time t."""
    if t < 0.0 or t > scenario.duration + 1e-9:
        raise ScenarioError(f"time {t} outside scenario duration {scenario.duration}")
    out = []
    for vru in scenario.vrus:
        ps = _locate_phase(_compiled_plan(scenario, vru.vru_id), t)
        dt = t - ps.t0
        x, y, v, h = _phase_end_pose(ps, dt)
        a_t = _accel_at(ps, dt)
        if ps.phase.primitive == MovementPrimitive.TURNING:
            w = ps.phase.omega
            ax = -v * w * math.sin(h)
            ay = v * w * math.cos(h)
        else:
            ax = a_t * math.cos(h)
            ay = a_t * math.sin(h)
        state = KinematicState(x, y, v * math.cos(h), v * math.sin(h), ax, ay, h)
        out.append(GroundTruthState(vru.vru_id, t, state, ps.phase.primitive,
                                    vru.kind, vru.extent, ps.phase.gesture))
    return out


def transition_times(scenario: Scenario, vru_id: int):
    """Phase boundaries of one VRU's plan: (time, from, to) triples."""
    vru = scenario.vru(vru_id)
    out = []
    for prev, cur in zip(vru.plan, vru.plan[1:]):
        out.append((cur.start, prev.primitive, cur.primitive))
    return out


# --- strict document parsing ------------------------------------------------


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ScenarioError(f"missing required key '{key}'", path)
    return doc[key]


def _no_extras(doc: dict, allowed: set[str], path: str):
    extras = set(doc) - allowed
    if extras:
        raise ScenarioError(f"unknown keys {sorted(extras)}", path)


def _number(value, path: str, minimum=None, maximum=None, strict_min=False) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool) \
            or not math.isfinite(float(value)):
        raise ScenarioError(f"expected a finite number, got {value!r}", path)
    v = float(value)
    if minimum is not None and (v <= minimum if strict_min else v < minimum):
        raise ScenarioError(f"value {v} below minimum {minimum}", path)
    if maximum is not None and v > maximum:
        raise ScenarioError(f"value {v} above maximum {maximum}", path)
    return v


def _parse_phase(doc: dict, kind: VruKind, path: str) -> Phase:
    _no_extras(doc, {"primitive", "start_s", "v_max", "tau", "omega", "gesture"}, path)
    raw = _require(doc, "primitive", path)
    try:
        prim = MovementPrimitive(raw)
    except ValueError:
        raise ScenarioError(f"unknown primitive {raw!r}", path) from None
    # waiting is allowed in any plan (a cyclist can stand still even though
    # the classifier's cyclist set has no waiting class)
    if prim not in primitives_for(kind) and prim != MovementPrimitive.WAITING:
        raise ScenarioError(f"primitive {prim.value} not defined for {kind.value}", path)
    start = _number(_require(doc, "start_s", path), path + ".start_s", minimum=0.0)
    v_max = doc.get("v_max", DEFAULT_V_MAX[kind])
    tau = doc.get("tau", DEFAULT_TAU[kind])
    omega = doc.get("omega", 0.0)
    gesture = doc.get("gesture", False)
    if not isinstance(gesture, bool):
        raise ScenarioError("gesture must be a boolean", path + ".gesture")
    v_max = _number(v_max, path + ".v_max", minimum=0.0, strict_min=True)
    tau = _number(tau, path + ".tau", minimum=0.0, strict_min=True)
    omega = _number(omega, path + ".omega")
    if prim == MovementPrimitive.TURNING and omega == 0.0:
        raise ScenarioError("turning phase needs a non-zero omega", path)
    return Phase(prim, start, v_max, tau, omega, gesture)


def _parse_vru(doc: dict, duration: float, path: str) -> VruConfig:
    _no_extras(doc, {"id", "kind", "x", "y", "heading", "phases", "extent"}, path)
    vid = _require(doc, "id", path)
    if not isinstance(vid, int) or isinstance(vid, bool):
        raise ScenarioError(f"id must be an integer, got {vid!r}", path + ".id")
    try:
        kind = VruKind(_require(doc, "kind", path))
    except ValueError:
        raise ScenarioError(f"unknown vru kind {doc.get('kind')!r}", path + ".kind") from None
    x = _number(_require(doc, "x", path), path + ".x")
    y = _number(_require(doc, "y", path), path + ".y")
    heading = _number(doc.get("heading", 0.0), path + ".heading")
    extent = _number(doc.get("extent", 0.3 if kind == VruKind.PEDESTRIAN else 0.8),
                     path + ".extent", minimum=0.0, strict_min=True)
    raw_phases = _require(doc, "phases", path)
    if not isinstance(raw_phases, list) or not raw_phases:
        raise ScenarioError("phases must be a non-empty list", path + ".phases")
    phases = tuple(
        _parse_phase(p, kind, f"{path}.phases[{i}]") for i, p in enumerate(raw_phases)
    )
    if phases[0].start != 0.0:
        raise ScenarioError("first phase must start at t=0", path + ".phases[0]")
    for i in range(1, len(phases)):
        if phases[i].start <= phases[i - 1].start:
            raise ScenarioError("phase start times must be strictly increasing",
                                f"{path}.phases[{i}]")
    if phases[-1].start > duration:
        raise ScenarioError("phase plan exceeds duration", path + ".phases")
    return VruConfig(vid, kind, x, y, wrap_angle(heading), phases, extent)


def _parse_network(doc: dict, defaults: NetworkParams, path: str) -> NetworkParams:
    _no_extras(doc, {"latency_s", "jitter_s", "loss", "range_m", "budget_units",
                     "queue_ttl_s"}, path)
    latency = _number(doc.get("latency_s", defaults.latency), path + ".latency_s",
                      minimum=0.0, strict_min=True)
    jitter = _number(doc.get("jitter_s", defaults.jitter), path + ".jitter_s", minimum=0.0)
    loss = _number(doc.get("loss", defaults.loss), path + ".loss", minimum=0.0)
    if loss >= 1.0:
        raise ScenarioError("loss probability must be < 1", path + ".loss")
    range_m = _number(doc.get("range_m", defaults.range_m), path + ".range_m",
                      minimum=0.0, strict_min=True)
    budget = doc.get("budget_units", defaults.budget)
    if not isinstance(budget, int) or isinstance(budget, bool) or budget < 1:
        raise ScenarioError(f"budget_units must be a positive integer, got {budget!r}",
                            path + ".budget_units")
    ttl = _number(doc.get("queue_ttl_s", defaults.queue_ttl), path + ".queue_ttl_s",
                  minimum=0.0, strict_min=True)
    return NetworkParams(latency, jitter, loss, range_m, budget, ttl)


def _parse_sensor(doc: dict, kind: AgentKind, path: str) -> SensorModel:
    _no_extras(doc, {"fov_half_angle", "range_m", "sigma", "p_d", "lambda_fp",
                     "rate_hz", "confusion"}, path)
    smart = kind == AgentKind.SMART_DEVICE
    sigma_default = 3.0 if smart else 0.5
    sigma = _number(doc.get("sigma", sigma_default), path + ".sigma",
                    minimum=0.0, strict_min=True)
    p_d = _number(doc.get("p_d", 0.95), path + ".p_d", minimum=0.0, maximum=1.0,
                  strict_min=True)
    lam = _number(doc.get("lambda_fp", 0.0 if smart else 0.05), path + ".lambda_fp",
                  minimum=0.0)
    fov = _number(doc.get("fov_half_angle", math.pi if smart else 1.0),
                  path + ".fov_half_angle", minimum=0.0, strict_min=True)
    range_m = _number(doc.get("range_m", 80.0), path + ".range_m",
                      minimum=0.0, strict_min=True)
    rate = _number(doc.get("rate_hz", 5.0 if smart else 25.0), path + ".rate_hz",
                   minimum=0.0, strict_min=True)
    confusion = _number(doc.get("confusion", 0.1 if smart else 0.0),
                        path + ".confusion", minimum=0.0, maximum=1.0)
    return SensorModel(half_angle=fov, range_m=range_m, sigma=sigma, p_d=p_d,
                       fp_rate=lam, frame_hz=rate, confusion=confusion)


def _parse_agent(doc: dict, defaults: NetworkParams, path: str) -> AgentConfig:
    _no_extras(doc, {"id", "kind", "x", "y", "heading", "vx", "vy", "join_s",
                     "leave_s", "sensor", "network", "reliability", "attached_vru"},
               path)
    aid = _require(doc, "id", path)
    if not isinstance(aid, int) or isinstance(aid, bool):
        raise ScenarioError(f"id must be an integer, got {aid!r}", path + ".id")
    try:
        kind = AgentKind(_require(doc, "kind", path))
    except ValueError:
        raise ScenarioError(f"unknown agent kind {doc.get('kind')!r}", path + ".kind") from None
    x = _number(doc.get("x", 0.0), path + ".x")
    y = _number(doc.get("y", 0.0), path + ".y")
    heading = _number(doc.get("heading", 0.0), path + ".heading")
    vx = _number(doc.get("vx", 0.0), path + ".vx")
    vy = _number(doc.get("vy", 0.0), path + ".vy")
    join = _number(doc.get("join_s", 0.0), path + ".join_s", minimum=0.0)
    leave = doc.get("leave_s")
    leave = math.inf if leave is None else _number(leave, path + ".leave_s", minimum=join)
    sensor = _parse_sensor(doc.get("sensor", {}), kind, path + ".sensor")
    network = _parse_network(doc.get("network", {}), defaults, path + ".network")
    reliability = doc.get("reliability")
    if reliability is not None:
        reliability = _number(reliability, path + ".reliability", minimum=0.0,
                              maximum=1.0, strict_min=True)
    attached = doc.get("attached_vru")
    if kind == AgentKind.SMART_DEVICE:
        if not isinstance(attached, int) or isinstance(attached, bool):
            raise ScenarioError("smart-device agent needs attached_vru",
                                path + ".attached_vru")
    elif attached is not None:
        raise ScenarioError("attached_vru only applies to smart-device agents",
                            path + ".attached_vru")
    return AgentConfig(aid, kind, x, y, wrap_angle(heading), vx, vy, join, leave,
                       sensor, network, reliability, attached)


def _parse_obstacle(doc: dict, path: str):
    _no_extras(doc, {"rect", "segment", "label"}, path)
    label = doc.get("label", "")
    if not isinstance(label, str):
        raise ScenarioError("label must be a string", path + ".label")
    if ("rect" in doc) == ("segment" in doc):
        raise ScenarioError("obstacle needs exactly one of 'rect' or 'segment'", path)
    if "rect" in doc:
        r = doc["rect"]
        if not (isinstance(r, list) and len(r) == 4):
            raise ScenarioError("rect must be [xmin, ymin, xmax, ymax]", path + ".rect")
        xmin, ymin, xmax, ymax = (_number(v, path + ".rect") for v in r)
        if xmax <= xmin or ymax <= ymin:
            raise ScenarioError("rect has non-positive extent", path + ".rect")
        return RectObstacle(xmin, ymin, xmax, ymax, label)
    s = doc["segment"]
    if not (isinstance(s, list) and len(s) == 4):
        raise ScenarioError("segment must be [x1, y1, x2, y2]", path + ".segment")
    x1, y1, x2, y2 = (_number(v, path + ".segment") for v in s)
    if math.hypot(x2 - x1, y2 - y1) <= 0.0:
        raise ScenarioError("segment has zero length", path + ".segment")
    return SegmentObstacle(x1, y1, x2, y2, label)


def _parse_conflict(doc: dict, vru_ids: set[int], path: str) -> ConflictSpec:
    _no_extras(doc, {"point", "vru", "radius_m", "time_s"}, path)
    point = _require(doc, "point", path)
    if not (isinstance(point, list) and len(point) == 2):
        raise ScenarioError("point must be [x, y]", path + ".point")
    x = _number(point[0], path + ".point")
    y = _number(point[1], path + ".point")
    vid = _require(doc, "vru", path)
    if vid not in vru_ids:
        raise ScenarioError(f"conflict references unknown vru {vid!r}", path + ".vru")
    radius = _number(doc.get("radius_m", 1.0), path + ".radius_m",
                     minimum=0.0, strict_min=True)
    time_s = doc.get("time_s")
    if time_s is not None:
        time_s = _number(time_s, path + ".time_s", minimum=0.0)
    return ConflictSpec(x, y, vid, radius, time_s)


def build_scenario(doc: dict) -> Scenario:
    """Validate a scenario description document and compile ground truth.

    Unknown keys anywhere in the document are rejected so typos fail loudly;
    every error names the offending field path.
    """
    if not isinstance(doc, dict):
        raise ScenarioError(f"scenario document must be an object, got {type(doc).__name__}")
    _no_extras(doc, {"duration_s", "tick_hz", "vrus", "agents", "obstacles",
                     "conflict", "network"}, "$")
    duration = _number(_require(doc, "duration_s", "$"), "$.duration_s",
                       minimum=0.0, strict_min=True)
    tick_hz = _number(doc.get("tick_hz", DEFAULT_TICK_HZ), "$.tick_hz",
                      minimum=0.0, strict_min=True)
    net_defaults = _parse_network(doc.get("network", {}), NetworkParams(), "$.network")

    raw_vrus = _require(doc, "vrus", "$")
    if not isinstance(raw_vrus, list):
        raise ScenarioError("vrus must be a list", "$.vrus")
    vrus = tuple(
        _parse_vru(v, duration, f"$.vrus[{i}]") for i, v in enumerate(raw_vrus)
    )
    raw_agents = _require(doc, "agents", "$")
    if not isinstance(raw_agents, list) or not raw_agents:
        raise ScenarioError("agents must be a non-empty list", "$.agents")
    agents = tuple(
        _parse_agent(a, net_defaults, f"$.agents[{i}]") for i, a in enumerate(raw_agents)
    )

    vru_ids = [v.vru_id for v in vrus]
    agent_ids = [a.agent_id for a in agents]
    for name, ids in (("vru", vru_ids), ("agent", agent_ids)):
        seen = set()
        for i in ids:
            if i in seen:
                raise ScenarioError(f"duplicate {name} id {i}")
            seen.add(i)
    overlap = set(vru_ids) & set(agent_ids)
    if overlap:
        raise ScenarioError(f"ids shared between vrus and agents: {sorted(overlap)}")
    if sum(1 for a in agents if a.kind == AgentKind.EGO) != 1:
        raise ScenarioError("scenario needs exactly one ego-vehicle agent", "$.agents")
    for a in agents:
        if a.attached_vru is not None and a.attached_vru not in vru_ids:
            raise ScenarioError(f"agent {a.agent_id} attached to unknown vru "
                                f"{a.attached_vru}")

    obstacles = tuple(
        _parse_obstacle(o, f"$.obstacles[{i}]")
        for i, o in enumerate(doc.get("obstacles", []))
    )
    conflict = None
    if doc.get("conflict") is not None:
        conflict = _parse_conflict(doc["conflict"], set(vru_ids), "$.conflict")

    scenario = Scenario(duration, tick_hz, vrus, agents, obstacles, conflict,
                        net_defaults)
    scenario.compiled["plans"] = {v.vru_id: compile_plan(v) for v in vrus}
    if conflict is not None and conflict.time is None:
        scenario.compiled["conflict_time"] = _find_conflict_time(scenario)
    return scenario


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"invalid JSON: {exc}", path) from None
    return build_scenario(doc)


def _find_conflict_time(scenario: Scenario) -> float:
    """First time the conflict VRU enters the conflict radius (coarse scan
    at tick resolution, bisection refine)."""
    c = scenario.conflict
    plan = _compiled_plan(scenario, c.vru_id)

    def gap(t):
        ps = _locate_phase(plan, t)
        x, y, _, _ = _phase_end_pose(ps, t - ps.t0)
        return math.hypot(x - c.x, y - c.y) - c.radius

    dt = scenario.dt
    t_prev, g_prev = 0.0, gap(0.0)
    if g_prev <= 0.0:
        return 0.0
    t = dt
    while t <= scenario.duration + 1e-9:
        g = gap(t)
        if g <= 0.0:
            lo, hi = t_prev, t
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if gap(mid) <= 0.0:
                    hi = mid
                else:
                    lo = mid
            return hi
        t_prev, g_prev = t, g
        t += dt
    return math.inf  # never reaches the conflict point
