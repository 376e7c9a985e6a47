"""Ego-side cooperation: the virtual VRU traffic map.

Remote tracks fuse into map entries with covariance intersection (safe under
the unknown cross-correlation between agents that share process history),
remote feature samples enrich the per-entry approximation windows, movement
probabilities pool by evidence addition, and trajectory forecasts combine
with confidence weights. Association of remote information to entries is
purely geometric; there is no global identity service.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AgentKind,
    MalformedInputError,
    SecondOrderDistribution,
    SimulationError,
    VruKind,
)
from .intention import ForecastTrajectory, IntentionPipeline, ensemble_forecast
from .tracking import DEFAULT_GATE, TrackEstimate, cv_matrices

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class DegenerateInputError(SimulationError):
    """Fusion input (covariance) is singular or unusable."""


@dataclass(frozen=True)
class FusionWeights:
    """Per-source reliability in (0, 1], by agent kind with optional
    per-agent overrides."""

    by_kind: dict = field(default_factory=lambda: {
        AgentKind.EGO: 1.0,
        AgentKind.VEHICLE: 0.8,
        AgentKind.INFRASTRUCTURE: 1.0,
        AgentKind.SMART_DEVICE: 0.4,
    })
    by_agent: dict = field(default_factory=dict)

    def reliability(self, agent_id: int, kind: AgentKind) -> float:
        r = self.by_agent.get(agent_id, self.by_kind[kind])
        if not (0.0 < r <= 1.0):
            raise MalformedInputError(f"reliability {r} outside (0, 1]")
        return r


# --- covariance intersection --------------------------------------------------


def _golden_section(f, tol: float = 1e-4) -> float:
    a, b = 0.0, 1.0
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def ci_fuse(xa, Pa, xb, Pb, tol: float = 1e-4):
    """Covariance intersection of two Gaussian estimates.

    P(w)^-1 = w Pa^-1 + (1-w) Pb^-1; w minimizes trace(P) via golden-section
    search on [0, 1] (endpoints included). Returns (x, P, w).

    The trace objective is evaluated in a basis that diagonalizes both
    information matrices at once, so each probe costs O(n) instead of a
    matrix inverse.
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    try:
        A = np.linalg.inv(np.asarray(Pa, dtype=float))
        B = np.linalg.inv(np.asarray(Pb, dtype=float))
        L = np.linalg.cholesky(0.5 * (B + B.T))
        Linv = np.linalg.inv(L)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInputError(f"singular covariance in CI fusion: {exc}") from None
    C = Linv @ (0.5 * (A + A.T)) @ Linv.T
    lam, Q = np.linalg.eigh(0.5 * (C + C.T))
    if lam.min() <= 0.0:
        raise DegenerateInputError("information matrix not positive definite")
    W = Linv.T @ Q
    M = (W * W).sum(axis=0)

    def trace_at(w: float) -> float:
        return float((M / (w * lam + (1.0 - w))).sum())

    best = _golden_section(trace_at, tol)
    w = min((0.0, 1.0, best), key=trace_at)
    info = w * A + (1.0 - w) * B
    P = np.linalg.inv(info)
    P = 0.5 * (P + P.T)
    x = P @ (w * (A @ xa) + (1.0 - w) * (B @ xb))
    return x, P, w


def naive_fuse(xa, Pa, xb, Pb):
    """Information-sum fusion, valid only under independence; kept for
    comparison runs."""
    try:
        A = np.linalg.inv(np.asarray(Pa, dtype=float))
        B = np.linalg.inv(np.asarray(Pb, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise DegenerateInputError(f"singular covariance: {exc}") from None
    P = np.linalg.inv(A + B)
    P = 0.5 * (P + P.T)
    x = P @ (A @ np.asarray(xa, float) + B @ np.asarray(xb, float))
    return x, P, 0.5


def _predict_track(est: TrackEstimate, dt: float, q: float = 0.5) -> TrackEstimate:
    """Constant-velocity prediction of a 4D snapshot."""
    if dt <= 0.0:
        return est
    F, Q = cv_matrices(dt, q)
    mean = F @ est.mean
    cov = F @ est.cov @ F.T + Q
    cov = 0.5 * (cov + cov.T)
    mean.flags.writeable = False
    cov.flags.writeable = False
    return TrackEstimate(est.track_id, est.agent_id, est.time + dt, mean, cov,
                         est.model_probs, est.hits, est.misses, est.confirmed,
                         est.extent)


def fuse_tracks_ci(a: TrackEstimate, b: TrackEstimate, tol: float = 1e-4,
                   method: str = "ci") -> TrackEstimate:
    """Fuse two track snapshots; the older one is predicted to the newer
    timestamp first."""
    if a.time < b.time:
        a = _predict_track(a, b.time - a.time)
    elif b.time < a.time:
        b = _predict_track(b, a.time - b.time)
    if method == "naive":
        x, P, w = naive_fuse(a.mean, a.cov, b.mean, b.cov)
    else:
        x, P, w = ci_fuse(a.mean, a.cov, b.mean, b.cov, tol)
    probs = w * a.model_probs + (1.0 - w) * b.model_probs
    probs = probs / probs.sum()
    x.flags.writeable = False
    P.flags.writeable = False
    probs.flags.writeable = False
    return TrackEstimate(a.track_id, a.agent_id, a.time, x, P, probs,
                         a.hits + b.hits, min(a.misses, b.misses),
                         a.confirmed or b.confirmed,
                         0.5 * (a.extent + b.extent))


# --- decision fusion ----------------------------------------------------------


def fuse_decisions(inputs, weights=None,
                   mode: str = "cooperative") -> SecondOrderDistribution:
    """Pool movement-primitive distributions.

    Cooperative mode adds the reliability-scaled evidence vectors
    (alpha_f = sum_i r_i s_i p_i), which is commutative and associative: the
    sum is taken over the flattened leaf terms with exact rounding, so any
    grouping or ordering of calls yields the bit-identical result.
    Competitive mode picks the single most self-certain input instead.
    """
    inputs = list(inputs)
    if not inputs:
        raise MalformedInputError("fuse_decisions needs at least one input")
    support = inputs[0].support
    for d in inputs[1:]:
        if d.support != support:
            raise MalformedInputError("inputs cover different primitive sets")
    if weights is None:
        weights = [1.0] * len(inputs)
    if len(weights) != len(inputs):
        raise MalformedInputError("one weight per input required")
    if mode == "competitive":
        idx = max(range(len(inputs)),
                  key=lambda i: weights[i] * inputs[i].s * float(inputs[i].p.max()))
        return inputs[idx]
    terms = []
    for r, d in zip(weights, inputs):
        if r == 1.0:
            terms.extend(d._terms)
        else:
            terms.extend((r * c, v) for c, v in d._terms)
    return SecondOrderDistribution._from_terms(support, terms)


# --- the virtual VRU traffic map ----------------------------------------------


@dataclass(frozen=True)
class RemoteSample:
    """One feature-level sample shared by a remote agent (Type A fusion)."""

    source: int
    time: float
    x: float
    y: float


@dataclass
class MapCounters:
    samples_in: int = 0
    samples_inserted: int = 0
    orphan_samples: int = 0
    stale_discards: int = 0
    entries_created: int = 0
    entries_dropped: int = 0
    ci_fusions: int = 0

    def reconciles(self) -> bool:
        return self.samples_in == (self.samples_inserted + self.orphan_samples
                                   + self.stale_discards)


class VruMapEntry:
    """One fused subject in the ego's traffic map."""

    __slots__ = ("entry_id", "track", "contributors", "decisions",
                 "remote_forecasts", "pipeline", "fused_distribution",
                 "fused_forecast", "created", "last_contribution", "kind_votes",
                 "gesture")

    def __init__(self, entry_id: int, track: TrackEstimate, source: int,
                 now: float, pipeline: IntentionPipeline):
        self.entry_id = entry_id
        self.track = track
        self.contributors = {source: now}
        self.decisions = {}
        self.remote_forecasts = {}
        self.pipeline = pipeline
        self.fused_distribution: SecondOrderDistribution | None = None
        self.fused_forecast: ForecastTrajectory | None = None
        self.created = now
        self.last_contribution = now
        self.kind_votes = 0.0
        self.gesture = False

    def staleness(self, now: float) -> float:
        return max(0.0, now - self.last_contribution)

    def confirmation_count(self, now: float, window: float = 1.0) -> int:
        return sum(1 for t in self.contributors.values() if now - t <= window)

    def confirmed(self, now: float) -> bool:
        return self.confirmation_count(now) >= 2

    def vote_kind(self, extent: float) -> None:
        self.kind_votes += 1.0 if extent > 0.55 else -1.0

    @property
    def kind(self) -> VruKind:
        return VruKind.CYCLIST if self.kind_votes >= 0.0 else VruKind.PEDESTRIAN

    def position(self) -> tuple[float, float]:
        return self.track.position


class VruMap:
    """The ego's fused picture of every VRU contributed by any agent."""

    def __init__(self, stale_drop: float = 2.0, gate: float = DEFAULT_GATE,
                 fusion_method: str = "ci", q_predict: float = 3.0,
                 pipeline_factory=None):
        # q_predict is deliberately generous: map entries coast between
        # contributions and VRUs can change their motion within fractions of
        # a second, so a tight coast model would make the intersection lean
        # on stale state and lag behind manoeuvres.
        self.entries: dict[int, VruMapEntry] = {}
        self.stale_drop = stale_drop
        self.gate = gate
        self.fusion_method = fusion_method
        self.q_predict = q_predict
        self.counters = MapCounters()
        self._next_id = 1
        self._pipeline_factory = pipeline_factory or (
            lambda eid: IntentionPipeline(eid))

    def predict_to(self, now: float) -> None:
        """Coast every entry to the current time so gating and coverage are
        evaluated against a current state."""
        for entry in self.entries.values():
            dt = now - entry.track.time
            if dt > 0.0:
                entry.track = _predict_track(entry.track, dt, self.q_predict)

    def _gate_match(self, est: TrackEstimate) -> VruMapEntry | None:
        best, best_m2 = None, self.gate
        ex, ey = est.position
        for key in sorted(self.entries):
            entry = self.entries[key]
            S = entry.track.cov[:2, :2] + est.cov[:2, :2]
            a, b = S[0, 0], S[0, 1]
            c, d = S[1, 0], S[1, 1]
            det = a * d - b * c
            if det <= 0.0:
                continue
            px, py = entry.track.position
            ix, iy = ex - px, ey - py
            m2 = (d * ix * ix - (b + c) * ix * iy + a * iy * iy) / det
            if m2 <= best_m2:
                best, best_m2 = entry, m2
        return best

    def update(self, incoming, now: float) -> None:
        """Fold a batch of (TrackEstimate, source agent, extent-ish) tuples
        into the map: gated entries fuse, the rest become new entries, and
        anything stale beyond the drop budget disappears."""
        for est, source in sorted(incoming, key=lambda p: (p[1], p[0].track_id)):
            entry = self._gate_match(est)
            if entry is None:
                eid = self._next_id
                self._next_id += 1
                entry = VruMapEntry(eid, est, source, now,
                                    self._pipeline_factory(eid))
                self.entries[eid] = entry
                self.counters.entries_created += 1
            else:
                entry.track = fuse_tracks_ci(entry.track, est,
                                             method=self.fusion_method)
                entry.contributors[source] = now
                entry.last_contribution = now
                self.counters.ci_fusions += 1
            entry.vote_kind(est.extent)
        dead = [k for k, e in self.entries.items()
                if e.staleness(now) > self.stale_drop]
        for k in dead:
            del self.entries[k]
            self.counters.entries_dropped += 1

    def fuse_features(self, samples, weights: FusionWeights, kinds: dict,
                      now: float) -> None:
        """Type A: insert remote feature samples into the gated entry's
        windows with the source's reliability as sample weight."""
        for s in sorted(samples, key=lambda s: (s.source, s.time)):
            self.counters.samples_in += 1
            entry = self._gate_sample(s)
            if entry is None:
                self.counters.orphan_samples += 1
                continue
            w = weights.reliability(s.source, kinds[s.source])
            before = entry.pipeline.wx.stale_discarded + entry.pipeline.wy.stale_discarded
            entry.pipeline.wx.insert(time=s.time, value=s.x, weight=w, source=s.source)
            entry.pipeline.wy.insert(time=s.time, value=s.y, weight=w, source=s.source)
            after = entry.pipeline.wx.stale_discarded + entry.pipeline.wy.stale_discarded
            if after > before:
                self.counters.stale_discards += 1
            else:
                self.counters.samples_inserted += 1

    def _gate_sample(self, s: RemoteSample) -> VruMapEntry | None:
        best, best_m2 = None, self.gate
        for key in sorted(self.entries):
            entry = self.entries[key]
            P = entry.track.cov
            a, b = P[0, 0] + 1.0, P[0, 1]
            c, d = P[1, 0], P[1, 1] + 1.0
            det = a * d - b * c
            if det <= 0.0:
                continue
            px, py = entry.track.position
            ix, iy = s.x - px, s.y - py
            m2 = (d * ix * ix - (b + c) * ix * iy + a * iy * iy) / det
            if m2 <= best_m2:
                best, best_m2 = entry, m2
        return best

    def fuse_entry_decisions(self, entry: VruMapEntry, now: float,
                             weights: FusionWeights, kinds: dict,
                             local: SecondOrderDistribution | None,
                             max_age: float = 1.0,
                             mode: str = "cooperative") -> SecondOrderDistribution | None:
        """Type B: pool the ego's own classification with the latest remote
        distribution from each contributor."""
        inputs, rels = [], []
        if local is not None:
            inputs.append(local)
            rels.append(1.0)
        for src in sorted(entry.decisions):
            t, dist = entry.decisions[src]
            if now - t > max_age:
                continue
            if inputs and dist.support != inputs[0].support:
                continue
            inputs.append(dist)
            rels.append(weights.reliability(src, kinds[src]))
        if not inputs:
            return None
        fused = fuse_decisions(inputs, rels, mode)
        entry.fused_distribution = fused
        return fused


def update_vru_map(vmap: VruMap, incoming, now: float) -> VruMap:
    vmap.update(incoming, now)
    return vmap


def fuse_forecasts(members, reliabilities, at_horizon: float = 1.0) -> ForecastTrajectory:
    """Confidence-weighted forecast fusion: weight = reliability divided by
    the member's covariance trace at the reference horizon."""
    members = list(members)
    weights = [r / max(m.cov_trace_at(at_horizon), 1e-12)
               for m, r in zip(members, reliabilities)]
    return ensemble_forecast(members, weights, producer="fused")
