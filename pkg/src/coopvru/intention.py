"""Per-agent intention detection.

Kinematic features are extracted from the polynomial windows (never from
ground truth), a fixed margin/softmax rule scores the movement primitives,
argmax changes are debounced into transition events, and two forecasters
produce short-horizon trajectories: an analytical model bank triggered by the
movement probabilities, and polynomial extrapolation of the position windows.
An ensemble combines them with confidence weights derived from the forecast
covariances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DegenerateWeightsError,
    MalformedInputError,
    MovementPrimitive,
    SecondOrderDistribution,
    VruKind,
    primitives_for,
)
from .polyfit import ApproxWindow
from .tracking import TrackEstimate

P = MovementPrimitive

DEFAULT_HORIZONS = tuple(round(0.1 * k, 10) for k in range(1, 26))  # 0.1 .. 2.5 s

_SPEED_EPS = 0.05  # below this, direction-dependent features are unreliable


@dataclass(frozen=True)
class FeatureVector:
    speed: float = 0.0
    tan_accel: float = 0.0
    heading_rate: float = 0.0
    slope: float = 0.0          # speed trend, m/s^2
    heading: float = 0.0
    gesture: bool = False
    available: bool = True

    @classmethod
    def unavailable(cls):
        return cls(available=False)


@dataclass(frozen=True)
class TransitionEvent:
    subject_id: int
    time: float
    from_primitive: MovementPrimitive
    to_primitive: MovementPrimitive
    confidence: float

    def __post_init__(self):
        if self.from_primitive == self.to_primitive:
            raise MalformedInputError("transition must change the primitive")


@dataclass(frozen=True)
class ClassifierParams:
    v_wait: float = 0.3
    v_move_fraction: float = 0.8   # of the kind's default cruise speed
    cruise_speed: dict = field(default_factory=lambda: {
        VruKind.PEDESTRIAN: 1.5, VruKind.CYCLIST: 4.0})
    omega_min: float = 0.15
    temperature: float = 0.5
    s_max: float = 20.0
    s_min: float = 0.5
    slope_ref: float = 0.4

    def v_move(self, kind: VruKind) -> float:
        return self.v_move_fraction * self.cruise_speed[kind]


def extract_features(wx: ApproxWindow, wy: ApproxWindow, t: float,
                     speed_window: ApproxWindow | None = None,
                     gesture: bool = False) -> FeatureVector:
    """Kinematic features at time t from the fitted position windows.

    Returns the unavailable sentinel when either window cannot support a fit;
    the classifier then falls back to an uninformed distribution.
    """
    if not (wx.well_posed() and wy.well_posed()):
        return FeatureVector.unavailable()
    fx, fy = wx.fit(t), wy.fit(t)
    vx, vy = fx.value(t, 1), fy.value(t, 1)
    ax, ay = (fx.value(t, 2), fy.value(t, 2)) if wx.degree >= 2 else (0.0, 0.0)
    speed = math.hypot(vx, vy)
    if speed > _SPEED_EPS:
        tan_accel = (vx * ax + vy * ay) / speed
        heading_rate = (vx * ay - vy * ax) / (speed * speed)
        heading = math.atan2(vy, vx)
    else:
        tan_accel = math.hypot(ax, ay)
        heading_rate = 0.0
        heading = 0.0
    slope = tan_accel
    if speed_window is not None and speed_window.well_posed() \
            and speed_window.degree >= 1:
        slope = speed_window.evaluate(t, order=1)
    return FeatureVector(speed, tan_accel, heading_rate, slope, heading, gesture)


def _margins(f: FeatureVector, kind: VruKind, params: ClassifierParams) -> dict:
    """Signed, roughly unit-scaled margin per primitive: positive when the
    features sit inside the primitive's regime."""
    v_wait = params.v_wait
    v_move = params.v_move(kind)
    nv = f.speed / v_wait
    prog = (f.speed - v_wait) / (v_move - v_wait)
    sl = f.slope / params.slope_ref
    rot = (abs(f.heading_rate) - params.omega_min) / params.omega_min

    starting = min(nv - 0.5, 1.0 - prog, sl)
    cruise = min(2.0 * prog, 1.5, 0.5 - 0.25 * abs(sl))
    turning = min(nv - 0.5, rot, 1.5)
    if f.gesture:  # an arm signal announces a turn before kinematics show it
        turning = max(turning, 1.0)
    if kind == VruKind.PEDESTRIAN:
        return {
            P.WAITING: 1.5 * (1.0 - nv),
            P.STARTING: starting,
            P.WALKING: cruise,
            P.STOPPING: min(1.0 - 0.5 * prog, -sl - 0.3),
            P.TURNING: turning,
        }
    return {
        P.STARTING: starting,
        P.STOPPING: max(min(1.0 - prog, -sl - 0.3), 1.2 * (1.0 - nv)),
        P.PEDALING: cruise,
        P.ACCELERATION: min(2.0 * prog - 0.5, sl - 0.3, 1.5),
        P.DECELERATION: min(2.0 * prog - 0.5, -sl - 0.3, 1.5),
        P.TURNING: turning,
    }


def classify_movement(f: FeatureVector, kind: VruKind, window_fill: float,
                      params: ClassifierParams | None = None) -> SecondOrderDistribution:
    """Score the movement primitives from kinematic features.

    Probabilities are a tempered softmax over fixed margins; the evidence
    mass scales with how much of the window is actually filled, so a cold
    start is honest about knowing nothing.
    """
    params = params or ClassifierParams()
    support = primitives_for(kind)
    if not f.available:
        return SecondOrderDistribution.uniform(support, params.s_min)
    margins = _margins(f, kind, params)
    scores = [margins[m] / params.temperature for m in support]
    top = max(scores)
    expd = [math.exp(v - top) for v in scores]
    total = sum(expd)
    p = [v / total for v in expd]
    s = max(params.s_min, params.s_max * min(1.0, max(0.0, window_fill)))
    return SecondOrderDistribution(support, p, s)


class TransitionDetector:
    """Debounces argmax changes: a new primitive must hold for the dwell time
    with enough mean probability before an event is emitted; at most one
    event per change."""

    def __init__(self, subject_id: int, dwell: float = 0.2, hysteresis: float = 0.1):
        self.subject_id = subject_id
        self.dwell = dwell
        self.hysteresis = hysteresis
        self.stable: MovementPrimitive | None = None
        self._candidate: MovementPrimitive | None = None
        self._since = 0.0
        self._probs: list[float] = []

    def update(self, t: float, dist: SecondOrderDistribution) -> TransitionEvent | None:
        current = dist.argmax()
        if self.stable is None:
            self.stable = current
            return None
        if current == self.stable:
            self._candidate = None
            return None
        if current != self._candidate:
            self._candidate = current
            self._since = t
            self._probs = []
        self._probs.append(float(dist.p[dist.support.index(current)]))
        if t - self._since >= self.dwell:
            mean_p = sum(self._probs) / len(self._probs)
            if mean_p >= 0.5 + self.hysteresis:
                event = TransitionEvent(self.subject_id, t, self.stable, current,
                                        min(1.0, mean_p))
                self.stable = current
                self._candidate = None
                return event
        return None


def detect_transition(history, dwell: float = 0.2, hysteresis: float = 0.1,
                      subject_id: int = 0) -> TransitionEvent | None:
    """Scan a time-ordered (time, distribution) history; first event or None."""
    det = TransitionDetector(subject_id, dwell, hysteresis)
    for t, dist in history:
        event = det.update(t, dist)
        if event is not None:
            return event
    return None


# --- trajectory forecasting -------------------------------------------------


@dataclass(frozen=True)
class ForecastTrajectory:
    """Horizon-gridded position forecast with per-horizon covariance.

    Covariance trace is non-decreasing in the horizon by construction (a
    deficit is floored away), and every covariance is kept symmetric PSD.
    """

    origin_time: float
    horizons: np.ndarray      # strictly increasing, relative seconds
    means: np.ndarray         # (H, 2)
    covs: np.ndarray          # (H, 2, 2)
    producer: str

    def cov_trace_at(self, horizon: float) -> float:
        idx = int(np.argmin(np.abs(self.horizons - horizon)))
        return float(self.covs[idx, 0, 0] + self.covs[idx, 1, 1])


def _finalize_forecast(origin_time, horizons, means, covs, producer) -> ForecastTrajectory:
    horizons = np.asarray(horizons, dtype=float)
    if horizons.ndim != 1 or np.any(np.diff(horizons) <= 0.0):
        raise MalformedInputError("horizon grid must be strictly increasing")
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float).copy()
    # symmetrize, then floor away any negative eigenvalue (closed form, 2x2)
    b = 0.5 * (covs[:, 0, 1] + covs[:, 1, 0])
    covs[:, 0, 1] = covs[:, 1, 0] = b
    half = 0.5 * (covs[:, 0, 0] + covs[:, 1, 1])
    rad = np.hypot(0.5 * (covs[:, 0, 0] - covs[:, 1, 1]), b)
    lift = np.maximum(0.0, rad - half) + 1e-15
    covs[:, 0, 0] += lift
    covs[:, 1, 1] += lift
    # covariance trace must not shrink with the horizon
    traces = covs[:, 0, 0] + covs[:, 1, 1]
    floored = np.maximum.accumulate(traces)
    bump = 0.5 * (floored - traces)
    covs[:, 0, 0] += bump
    covs[:, 1, 1] += bump
    for a in (horizons, means, covs):
        a.flags.writeable = False
    return ForecastTrajectory(origin_time, horizons, means, covs, producer)


@dataclass(frozen=True)
class ForecastParams:
    cruise_speed: dict = field(default_factory=lambda: {
        VruKind.PEDESTRIAN: 1.5, VruKind.CYCLIST: 4.0})
    tau: float = 1.2              # deliberately generic response time
    q_growth: float = 0.3         # position process noise PSD, m^2/s^3
    extrap_floor_var: float = 1e-8


def _primitive_displacements(support, v0, kind, params, h, heading_rate):
    """Along-path displacement per primitive over the horizon array."""
    v_max = params.cruise_speed[kind]
    tau = params.tau
    decay = 1.0 - np.exp(-h / tau)
    out = {}
    for prim in support:
        if prim == P.WAITING:
            out[prim] = np.zeros_like(h)
        elif prim in (P.STARTING, P.ACCELERATION):
            out[prim] = v_max * h + (v0 - v_max) * tau * decay
        elif prim in (P.STOPPING, P.DECELERATION):
            out[prim] = v0 * tau * decay
        else:  # walking / pedaling / turning hold the current speed
            out[prim] = v0 * h
    return out


def forecast_analytical(track: TrackEstimate, dist: SecondOrderDistribution,
                        kind: VruKind, params: ForecastParams | None = None,
                        horizons=DEFAULT_HORIZONS,
                        heading_rate: float | None = None) -> ForecastTrajectory:
    """Model-bank forecast: one closed-form path per movement primitive,
    mixed with the primitive probabilities (law of total covariance adds the
    between-model spread)."""
    params = params or ForecastParams()
    h = np.asarray(horizons, dtype=float)
    vx, vy = track.velocity
    v0 = math.hypot(vx, vy)
    heading = math.atan2(vy, vx) if v0 > _SPEED_EPS else 0.0
    ux, uy = math.cos(heading), math.sin(heading)
    x0, y0 = track.position

    disp = _primitive_displacements(dist.support, v0, kind, params, h, heading_rate)
    K = len(dist.support)
    paths = np.empty((K, len(h), 2))
    w = heading_rate if heading_rate is not None else 0.0
    for k, prim in enumerate(dist.support):
        d = disp[prim]
        if prim == P.TURNING and abs(w) > 1e-6 and v0 > _SPEED_EPS:
            ang = heading + w * h
            r = v0 / w
            paths[k, :, 0] = x0 + r * (np.sin(ang) - math.sin(heading))
            paths[k, :, 1] = y0 - r * (np.cos(ang) - math.cos(heading))
        else:
            paths[k, :, 0] = x0 + d * ux
            paths[k, :, 1] = y0 + d * uy

    p = dist.p
    mean = np.einsum("k,khi->hi", p, paths)
    dev = paths - mean[None, :, :]
    spread = np.einsum("k,khi,khj->hij", p, dev, dev)

    Pm = track.cov
    Ppos, Pc, Pv = Pm[:2, :2], Pm[:2, 2:], Pm[2:, 2:]
    eye = np.eye(2)
    covs = (Ppos[None, :, :]
            + h[:, None, None] * (Pc + Pc.T)[None, :, :]
            + (h ** 2)[:, None, None] * Pv[None, :, :]
            + (params.q_growth * h ** 3 / 3.0)[:, None, None] * eye[None, :, :]
            + spread)
    return _finalize_forecast(track.time, h, mean, covs, "analytical")


def forecast_extrapolate(wx: ApproxWindow, wy: ApproxWindow, origin_time: float,
                         horizons=DEFAULT_HORIZONS,
                         params: ForecastParams | None = None) -> ForecastTrajectory:
    """Polynomial extrapolation of the position windows; the covariance is
    calibrated from the fit residuals and inflated quadratically with the
    horizon fraction."""
    params = params or ForecastParams()
    h = np.asarray(horizons, dtype=float)
    fx, fy = wx.fit(origin_time), wy.fit(origin_time)
    ts = origin_time + h
    means = np.empty((len(h), 2))
    means[:, 0] = [fx.value(t) for t in ts]
    means[:, 1] = [fy.value(t) for t in ts]
    inflate = 1.0 + (h / wx.span) ** 2
    var_x = (fx.residual_rms ** 2 + params.extrap_floor_var) * inflate
    var_y = (fy.residual_rms ** 2 + params.extrap_floor_var) * inflate
    covs = np.zeros((len(h), 2, 2))
    covs[:, 0, 0] = var_x
    covs[:, 1, 1] = var_y
    return _finalize_forecast(origin_time, h, means, covs, "extrapolation")


def ensemble_forecast(members, weights, producer: str = "ensemble") -> ForecastTrajectory:
    """Convex combination of member forecasts sharing one horizon grid.

    Mixture moments: weighted mean, weighted within-member covariance plus
    the between-member spread.
    """
    members = list(members)
    if not members:
        raise MalformedInputError("ensemble needs at least one member")
    grid = members[0].horizons
    for m in members[1:]:
        if m.horizons.shape != grid.shape or not np.array_equal(m.horizons, grid):
            raise MalformedInputError("ensemble members have mismatched horizon grids")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(members),) or np.any(w < 0.0):
        raise DegenerateWeightsError(f"bad ensemble weights {weights}")
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateWeightsError("ensemble weights sum to zero")
    w = w / total
    means = np.einsum("k,khi->hi", w, np.stack([m.means for m in members]))
    covs = np.zeros((len(grid), 2, 2))
    for wk, m in zip(w, members):
        d = m.means - means
        covs += wk * (m.covs + d[:, :, None] * d[:, None, :])
    origin = members[0].origin_time
    return _finalize_forecast(origin, grid, means, covs, producer)


# --- per-track pipeline ------------------------------------------------------


@dataclass
class PipelineOutput:
    time: float
    features: FeatureVector
    distribution: SecondOrderDistribution
    event: TransitionEvent | None
    forecast: ForecastTrajectory | None
    members: tuple[ForecastTrajectory, ...] = ()


class IntentionPipeline:
    """One intention-detection chain per tracked subject.

    Owns the position/speed windows (which cooperative feature fusion may
    enrich with remote samples), the classifier state, the transition
    debouncer, and the two forecasters plus their ensemble.
    """

    def __init__(self, subject_id: int, degree: int = 2, span: float = 2.0,
                 half_life: float = 1.0, dwell: float = 0.2,
                 hysteresis: float = 0.1,
                 cparams: ClassifierParams | None = None,
                 fparams: ForecastParams | None = None,
                 horizons=DEFAULT_HORIZONS):
        self.subject_id = subject_id
        self.wx = ApproxWindow(degree, span, half_life)
        self.wy = ApproxWindow(degree, span, half_life)
        self.wspeed = ApproxWindow(1, span, half_life)
        self.detector = TransitionDetector(subject_id, dwell, hysteresis)
        self.cparams = cparams or ClassifierParams()
        self.fparams = fparams or ForecastParams()
        self.horizons = horizons
        self.last_output: PipelineOutput | None = None

    def observe(self, t: float, x: float, y: float, weight: float = 1.0,
                source: int | None = None) -> None:
        self.wx.insert(time=t, value=x, weight=weight, source=source)
        self.wy.insert(time=t, value=y, weight=weight, source=source)

    def step(self, t: float, track: TrackEstimate, kind: VruKind,
             gesture: bool = False, with_forecast: bool = True) -> PipelineOutput:
        features = extract_features(self.wx, self.wy, t, self.wspeed, gesture)
        dist = classify_movement(features, kind, self.wx.fill(), self.cparams)
        if features.available:
            self.wspeed.insert(time=t, value=features.speed)
        event = self.detector.update(t, dist)
        forecast = None
        members: tuple[ForecastTrajectory, ...] = ()
        if with_forecast:
            analytical = forecast_analytical(
                track, dist, kind, self.fparams, self.horizons,
                features.heading_rate if features.available else None)
            members = (analytical,)
            if features.available:
                extrap = forecast_extrapolate(self.wx, self.wy, t, self.horizons,
                                              self.fparams)
                members = (analytical, extrap)
            weights = [1.0 / max(m.cov_trace_at(1.0), 1e-12) for m in members]
            forecast = ensemble_forecast(members, weights)
        output = PipelineOutput(t, features, dist, event, forecast, members)
        self.last_output = output
        return output
