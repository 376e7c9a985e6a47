"""Per-agent sensing: field-of-view and occlusion gating, noisy detections
with misses and false positives, and smart-device self reports.

Cameras and scanners are replaced by a parametric model: a sensor sees a VRU
when it is inside the field of view, within range, and has a clear line of
sight; it then reports the true position plus isotropic Gaussian noise with
probability p_d, and adds Poisson-distributed clutter. Smart devices ride a
VRU and self-report position (coarsely) and the kind of movement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .core import MovementPrimitive, VruKind, primitives_for, wrap_angle

if TYPE_CHECKING:  # only for annotations; no runtime dependency
    from .scenario import GroundTruthState


@dataclass(frozen=True)
class SensorModel:
    """Parametric sensor.

    half_angle/range_m bound the field of view; sigma is the isotropic
    position noise; p_d the per-frame detection probability; fp_rate the
    expected false positives per frame; frame_hz the sensing rate.
    ``confusion`` only applies to smart devices: the probability that the
    self-reported movement primitive is wrong.
    """

    half_angle: float = 1.0
    range_m: float = 80.0
    sigma: float = 0.5
    p_d: float = 0.95
    fp_rate: float = 0.05
    frame_hz: float = 25.0
    confusion: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0.0 or not (0.0 < self.p_d <= 1.0) or self.range_m <= 0.0:
            raise ValueError(f"invalid sensor parameters {self}")


@dataclass(frozen=True)
class Detection:
    agent_id: int
    time: float
    x: float
    y: float
    cov: tuple[tuple[float, float], tuple[float, float]]
    extent: float
    true_id: int | None = None  # debug only; algorithms must not read it

    @property
    def position(self) -> tuple[float, float]:
        return self.x, self.y

    def cov_array(self) -> np.ndarray:
        return np.asarray(self.cov, dtype=float)


@dataclass(frozen=True)
class SelfReport:
    """Smart-device self report: coarse position plus the device's belief
    about its carrier's current movement."""

    agent_id: int
    vru_id: int
    time: float
    x: float
    y: float
    sigma: float
    kind: VruKind
    primitive: MovementPrimitive
    gesture: bool = False


def line_of_sight(sensor_pos, target_pos, obstacles) -> bool:
    """True when no obstacle blocks the open segment sensor -> target."""
    for ob in obstacles:
        if ob.blocks(sensor_pos, target_pos):
            return False
    return True


def in_field_of_view(sensor: SensorModel, pose, target_pos) -> bool:
    x, y, heading = pose
    dx, dy = target_pos[0] - x, target_pos[1] - y
    dist = math.hypot(dx, dy)
    if dist > sensor.range_m:
        return False
    if dist < 1e-9:
        return True
    bearing = wrap_angle(math.atan2(dy, dx) - heading)
    return abs(bearing) <= sensor.half_angle


def sense(
    sensor: SensorModel,
    agent_id: int,
    pose: tuple[float, float, float],
    truths: Sequence["GroundTruthState"],
    obstacles: Iterable,
    rng: np.random.Generator,
    attached_vru: int | None = None,
) -> tuple[list[Detection], list[SelfReport]]:
    """One sensing frame.

    ``pose`` is the sensor's current (x, y, heading). The rng must be a
    stream derived deterministically from (run seed, agent, frame) so that
    identical inputs reproduce identical detections. Draw order is fixed:
    VRUs in id order, then the false-positive count, then their positions.
    """
    detections: list[Detection] = []
    reports: list[SelfReport] = []
    t = truths[0].time if truths else 0.0

    if attached_vru is not None:
        # self-report path: no field of view, no occlusion
        for truth in truths:
            if truth.vru_id != attached_vru:
                continue
            nx, ny = rng.normal(0.0, sensor.sigma, size=2)
            var = sensor.sigma * sensor.sigma
            detections.append(Detection(
                agent_id, truth.time, truth.x + nx, truth.y + ny,
                ((var, 0.0), (0.0, var)), truth.extent, true_id=truth.vru_id,
            ))
            primitive = truth.primitive
            support = primitives_for(truth.kind)
            if primitive not in support:  # e.g. a waiting cyclist
                primitive = MovementPrimitive.STOPPING
            if sensor.confusion > 0.0 and rng.random() < sensor.confusion:
                others = [p for p in support if p != primitive]
                primitive = others[rng.integers(len(others))]
            reports.append(SelfReport(
                agent_id, truth.vru_id, truth.time, truth.x + nx, truth.y + ny,
                sensor.sigma, truth.kind, primitive, truth.gesture,
            ))
        return detections, reports

    var = sensor.sigma * sensor.sigma
    cov = ((var, 0.0), (0.0, var))
    for truth in sorted(truths, key=lambda s: s.vru_id):
        target = (truth.x, truth.y)
        if not in_field_of_view(sensor, pose, target):
            continue
        if not line_of_sight((pose[0], pose[1]), target, obstacles):
            continue
        if rng.random() > sensor.p_d:
            continue
        nx, ny = rng.normal(0.0, sensor.sigma, size=2)
        extent = max(0.05, truth.extent + float(rng.normal(0.0, 0.05)))
        detections.append(Detection(
            agent_id, truth.time, truth.x + nx, truth.y + ny, cov, extent,
            true_id=truth.vru_id,
        ))

    n_fp = int(rng.poisson(sensor.fp_rate)) if sensor.fp_rate > 0.0 else 0
    for _ in range(n_fp):
        # uniform over the field-of-view sector
        r = sensor.range_m * math.sqrt(rng.random())
        a = pose[2] + rng.uniform(-sensor.half_angle, sensor.half_angle)
        extent = float(rng.uniform(0.2, 1.0))
        detections.append(Detection(
            agent_id, t, pose[0] + r * math.cos(a), pose[1] + r * math.sin(a),
            cov, extent, true_id=None,
        ))
    return detections, reports
