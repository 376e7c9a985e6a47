"""Shared value types, validation helpers, and probability utilities.

Everything in here is an immutable value or a pure function; the rest of the
simulator builds on these without sharing mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from math import fsum

import numpy as np

TWO_PI = 2.0 * math.pi


class SimulationError(Exception):
    """Base class for simulator errors."""


class MalformedInputError(SimulationError):
    """Input violates a structural precondition (shape, finiteness)."""


class DegenerateWeightsError(SimulationError):
    """Weight vector carries no usable mass."""


class UnderdeterminedWindowError(SimulationError):
    """Approximation window lacks the samples needed for the requested fit."""


class InternalConsistencyError(SimulationError):
    """A numeric invariant broke mid-run. Indicates a bug; aborts the run."""


class AgentKind(str, Enum):
    EGO = "ego-vehicle"
    VEHICLE = "vehicle"
    INFRASTRUCTURE = "infrastructure"
    SMART_DEVICE = "smart-device"


class VruKind(str, Enum):
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class MovementPrimitive(str, Enum):
    WAITING = "waiting"
    STARTING = "starting"
    WALKING = "walking"
    PEDALING = "pedaling"
    STOPPING = "stopping"
    ACCELERATION = "acceleration"
    DECELERATION = "deceleration"
    TURNING = "turning"


PEDESTRIAN_PRIMITIVES = (
    MovementPrimitive.WAITING,
    MovementPrimitive.STARTING,
    MovementPrimitive.WALKING,
    MovementPrimitive.STOPPING,
    MovementPrimitive.TURNING,
)

CYCLIST_PRIMITIVES = (
    MovementPrimitive.STARTING,
    MovementPrimitive.STOPPING,
    MovementPrimitive.PEDALING,
    MovementPrimitive.ACCELERATION,
    MovementPrimitive.DECELERATION,
    MovementPrimitive.TURNING,
)


def primitives_for(kind: VruKind) -> tuple[MovementPrimitive, ...]:
    if kind == VruKind.PEDESTRIAN:
        return PEDESTRIAN_PRIMITIVES
    return CYCLIST_PRIMITIVES


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0.0:
        a += TWO_PI
    return a - math.pi


@dataclass(frozen=True)
class KinematicState:
    """Planar kinematic state: position [m], velocity [m/s], acceleration
    [m/s^2], heading [rad] in (-pi, pi]."""

    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.vx, self.vy, self.ax, self.ay, self.heading)
        if not all(math.isfinite(v) for v in vals):
            raise MalformedInputError(f"non-finite kinematic state: {vals}")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


def validate_covariance(m) -> str | None:
    """Check that ``m`` is a usable covariance matrix.

    Returns None when the matrix is symmetric within 1e-9 relative and has no
    eigenvalue below -1e-9 * trace, otherwise a short description of the
    failed check. Non-square or non-finite input raises MalformedInputError.
    """
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise MalformedInputError(f"covariance must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MalformedInputError("covariance has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(arr))))
    if float(np.max(np.abs(arr - arr.T))) > 1e-9 * scale:
        return "not symmetric"
    eigmin = float(np.linalg.eigvalsh(0.5 * (arr + arr.T))[0])
    if eigmin < -1e-9 * float(np.trace(arr)) - 1e-300:
        return f"not PSD (min eigenvalue {eigmin:.3e})"
    return None


def ensure_covariance(m, context: str = "") -> None:
    """Raise InternalConsistencyError when a produced covariance is invalid."""
    violation = validate_covariance(m)
    if violation is not None:
        raise InternalConsistencyError(f"{context or 'covariance'}: {violation}")


def normalize_distribution(w) -> np.ndarray:
    """Normalize a non-negative weight vector to a probability vector."""
    arr = np.asarray(w, dtype=float)
    if arr.ndim != 1:
        raise MalformedInputError(f"weights must be a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MalformedInputError("weights have non-finite entries")
    if np.any(arr < 0.0):
        raise DegenerateWeightsError("negative weight")
    total = float(arr.sum())
    if total <= 0.0:
        raise DegenerateWeightsError("all weights are zero")
    return arr / total


class SecondOrderDistribution:
    """Probability vector over a movement-primitive set plus an evidence mass.

    The pair (p, s) behaves like a Dirichlet pseudo-count vector
    alpha = s * p: the probabilities say which primitive is active, the
    evidence mass says how much observation weight backs that claim.
    Pooling independent sources adds their alphas.

    Instances keep the additive terms they were built from so that pooled
    results are bit-identical under regrouping and reordering (sums are
    evaluated with exactly rounded fsum over the flattened terms).
    """

    __slots__ = ("support", "alpha", "p", "s", "_terms")

    def __init__(self, support, p, s, _terms=None):
        support = tuple(support)
        p = np.asarray(p, dtype=float)
        if p.shape != (len(support),):
            raise MalformedInputError(
                f"probability vector shape {p.shape} does not match support size {len(support)}"
            )
        if not np.all(np.isfinite(p)) or np.any(p < 0.0):
            raise MalformedInputError("probabilities must be finite and non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-12:
            raise MalformedInputError(f"probabilities sum to {p.sum()!r}, not 1")
        s = float(s)
        if not math.isfinite(s) or s <= 0.0:
            raise MalformedInputError(f"evidence mass must be finite and > 0, got {s}")
        alpha = s * p
        self.support = support
        self.alpha = alpha
        self.p = p
        self.s = s
        self._terms = _terms if _terms is not None else ((1.0, alpha),)
        self.alpha.flags.writeable = False
        self.p.flags.writeable = False

    @classmethod
    def _from_terms(cls, support, terms):
        """Build from flattened (coefficient, alpha-vector) leaf terms."""
        k = len(support)
        alpha = np.array(
            [fsum(c * v[i] for c, v in terms) for i in range(k)], dtype=float
        )
        s = fsum(alpha)
        if s <= 0.0:
            raise DegenerateWeightsError("pooled evidence is zero")
        obj = cls.__new__(cls)
        obj.support = tuple(support)
        obj.alpha = alpha
        obj.p = alpha / s
        obj.s = s
        obj._terms = tuple(terms)
        obj.alpha.flags.writeable = False
        obj.p.flags.writeable = False
        return obj

    @classmethod
    def uniform(cls, support, s: float):
        k = len(tuple(support))
        return cls(support, np.full(k, 1.0 / k), s)

    @classmethod
    def concentrated(cls, support, primitive: MovementPrimitive, s: float,
                     leak: float = 0.0):
        """Distribution peaked on one primitive, with optional mass leaked
        uniformly to the others."""
        support = tuple(support)
        k = len(support)
        p = np.full(k, leak / (k - 1) if k > 1 else 0.0)
        p[support.index(primitive)] = 1.0 - leak
        return cls(support, p, s)

    def argmax(self) -> MovementPrimitive:
        return self.support[int(np.argmax(self.p))]

    def __eq__(self, other):
        if not isinstance(other, SecondOrderDistribution):
            return NotImplemented
        return (
            self.support == other.support
            and self.alpha.shape == other.alpha.shape
            and bool(np.all(self.alpha == other.alpha))
        )

    def __hash__(self):
        return hash((self.support, self.alpha.tobytes()))

    def __repr__(self):
        pairs = ", ".join(f"{m.value}={q:.3f}" for m, q in zip(self.support, self.p))
        return f"SecondOrderDistribution({pairs}; s={self.s:.3f})"


def second_order_mean_and_uncertainty(d: SecondOrderDistribution):
    """Mean probabilities plus a scalar uncertainty in (0, 1].

    u = K / (s + K) for K primitives: vanishing evidence gives u -> 1,
    infinite evidence gives u -> 0.
    """
    k = len(d.support)
    return d.p, k / (d.s + k)
