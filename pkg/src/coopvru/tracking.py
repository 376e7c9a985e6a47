"""Local multi-target tracking with an interacting multiple model filter.

Each agent runs one tracker over its own detections. The model bank holds a
constant-velocity filter (4D state, white-noise acceleration) and a
constant-acceleration filter (6D state, white-noise jerk), mixed with a fixed
Markov matrix; turning shows up as lateral acceleration picked up by the CA
model. Association is greedy nearest-neighbour in Mahalanobis distance, which
is adequate for the handful of VRUs a scenario carries.

Tracks coast through occlusions: a miss only predicts, and a track survives
until its consecutive miss time exceeds the coast budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import InternalConsistencyError
from .perception import Detection

# Mahalanobis gate, chi-square 2 dof at 99%
DEFAULT_GATE = 9.21


@dataclass(frozen=True)
class ImmParams:
    q_cv: float = 0.5        # white-noise acceleration PSD, m^2/s^3
    q_ca: float = 1.0        # white-noise jerk PSD, m^2/s^5
    p_stay: float = 0.95     # Markov self-transition probability
    accel_prior_var: float = 1.0   # variance given to accel states when lifting CV
    init_vel_var: float = 9.0      # velocity variance of a fresh track
    gate: float = DEFAULT_GATE
    confirm_m: int = 3
    confirm_n: int = 4
    coast_budget: float = 1.5      # seconds of consecutive misses before drop
    trace_ceiling: float = 100.0   # position-covariance trace drop threshold, m^2

    def mixing(self) -> np.ndarray:
        return _mixing_matrix(self.p_stay)


@lru_cache(maxsize=None)
def _mixing_matrix(p_stay: float) -> np.ndarray:
    q = 1.0 - p_stay
    m = np.array([[p_stay, q], [q, p_stay]])
    m.flags.writeable = False
    return m


@dataclass(frozen=True)
class TrackEstimate:
    """Immutable snapshot of a track: position+velocity mean and covariance,
    plus model probabilities and bookkeeping counters."""

    track_id: int
    agent_id: int
    time: float
    mean: np.ndarray          # [x, y, vx, vy]
    cov: np.ndarray           # 4x4
    model_probs: np.ndarray   # (CV, CA)
    hits: int
    misses: int
    confirmed: bool
    extent: float

    @property
    def position(self) -> tuple[float, float]:
        return float(self.mean[0]), float(self.mean[1])

    @property
    def velocity(self) -> tuple[float, float]:
        return float(self.mean[2]), float(self.mean[3])


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@lru_cache(maxsize=64)
def cv_matrices(dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    d3, d2 = dt**3 / 3.0, dt**2 / 2.0
    Q = np.zeros((4, 4))
    for ax in (0, 1):
        Q[ax, ax] = q * d3
        Q[ax, ax + 2] = Q[ax + 2, ax] = q * d2
        Q[ax + 2, ax + 2] = q * dt
    F.flags.writeable = Q.flags.writeable = False
    return F, Q


@lru_cache(maxsize=64)
def ca_matrices(dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    F = np.eye(6)
    F[0, 2] = F[1, 3] = F[2, 4] = F[3, 5] = dt
    F[0, 4] = F[1, 5] = dt**2 / 2.0
    d5, d4, d3, d2 = dt**5 / 20.0, dt**4 / 8.0, dt**3 / 6.0, dt**2 / 2.0
    Q = np.zeros((6, 6))
    for ax in (0, 1):
        i, j, k = ax, ax + 2, ax + 4
        Q[i, i] = q * d5
        Q[i, j] = Q[j, i] = q * d4
        Q[i, k] = Q[k, i] = q * d3
        Q[j, j] = q * dt**3 / 3.0
        Q[j, k] = Q[k, j] = q * d2
        Q[k, k] = q * dt
    F.flags.writeable = Q.flags.writeable = False
    return F, Q


def kalman_update(x: np.ndarray, P: np.ndarray, z, R) -> tuple[np.ndarray, np.ndarray, float]:
    """Position-only measurement update; returns (mean, cov, likelihood)."""
    R = np.asarray(R, dtype=float)
    innov = np.asarray(z, dtype=float) - x[:2]
    a = P[0, 0] + R[0, 0]
    b = P[0, 1] + R[0, 1]
    c = P[1, 0] + R[1, 0]
    d = P[1, 1] + R[1, 1]
    det = a * d - b * c
    if det <= 0.0:
        raise InternalConsistencyError("singular innovation covariance")
    Sinv = np.array([[d, -b], [-c, a]])
    Sinv /= det
    K = P[:, :2] @ Sinv
    x_new = x + K @ innov
    P_new = P - K @ P[:2, :]
    P_new = 0.5 * (P_new + P_new.T)
    q = (d * innov[0] * innov[0] - (b + c) * innov[0] * innov[1]
         + a * innov[1] * innov[1]) / det
    likelihood = math.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(det))
    return x_new, P_new, likelihood


def _lift(x4: np.ndarray, P4: np.ndarray, accel_var: float):
    x6 = np.zeros(6)
    x6[:4] = x4
    P6 = np.zeros((6, 6))
    P6[:4, :4] = P4
    P6[4, 4] = P6[5, 5] = accel_var
    return x6, P6


class ImmTrack:
    """Mutable per-track filter state: one CV and one CA filter plus model
    probabilities."""

    __slots__ = ("track_id", "agent_id", "time", "x_cv", "P_cv", "x_ca", "P_ca",
                 "mu", "hits", "misses", "last_update", "miss_time",
                 "hit_window", "confirmed", "extent", "_mean", "_cov")

    def __init__(self, track_id: int, agent_id: int, detection: Detection,
                 params: ImmParams):
        self.track_id = track_id
        self.agent_id = agent_id
        self.time = detection.time
        R = detection.cov_array()
        self.x_cv = np.array([detection.x, detection.y, 0.0, 0.0])
        P = np.zeros((4, 4))
        P[:2, :2] = R
        P[2, 2] = P[3, 3] = params.init_vel_var
        self.P_cv = P
        self.x_ca, self.P_ca = _lift(self.x_cv, P, params.accel_prior_var)
        self.mu = np.array([0.5, 0.5])
        self.hits = 1
        self.misses = 0
        self.last_update = detection.time
        self.miss_time = 0.0
        self.hit_window = [True]
        self.confirmed = False
        self.extent = detection.extent
        self._refresh_combined()

    def _refresh_combined(self):
        mu = self.mu
        xa = self.x_ca[:4]
        mean = mu[0] * self.x_cv + mu[1] * xa
        d0 = self.x_cv - mean
        d1 = xa - mean
        cov = (mu[0] * (self.P_cv + d0[:, None] * d0)
               + mu[1] * (self.P_ca[:4, :4] + d1[:, None] * d1))
        self._mean = mean
        self._cov = 0.5 * (cov + cov.T)

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def cov(self) -> np.ndarray:
        return self._cov

    def predicted_position(self, dt: float):
        m = self._mean
        return m[0] + m[2] * dt, m[1] + m[3] * dt

    def gate_cov(self, dt: float, q: float) -> np.ndarray:
        """Position covariance extrapolated by dt, for association gating."""
        P = self._cov
        return (P[:2, :2] + dt * (P[:2, 2:] + P[2:, :2]) + dt * dt * P[2:, 2:]
                + q * dt * np.eye(2))

    def estimate(self) -> TrackEstimate:
        return TrackEstimate(
            self.track_id, self.agent_id, self.time,
            _freeze(self._mean.copy()), _freeze(self._cov.copy()),
            _freeze(self.mu.copy()), self.hits, self.misses, self.confirmed,
            self.extent,
        )


def _psd_check_4x4(P: np.ndarray) -> bool:
    """Cholesky by hand with a tiny jitter; cheap PSD test for 4x4."""
    eps = 1e-12 * (1.0 + abs(P[0, 0]) + abs(P[1, 1]) + abs(P[2, 2]) + abs(P[3, 3]))
    L = [[0.0] * 4 for _ in range(4)]
    for i in range(4):
        for j in range(i + 1):
            s = P[i, j] - sum(L[i][k] * L[j][k] for k in range(j))
            if i == j:
                s += eps
                if s <= 0.0:
                    return False
                L[i][i] = math.sqrt(s)
            else:
                L[i][j] = s / L[j][j]
    return True


def _imm_advance(track: ImmTrack, detection: Detection | None, dt: float,
                 params: ImmParams) -> None:
    """Mix, predict per model, and update in place."""
    if dt <= 0.0:
        raise InternalConsistencyError(f"imm_step needs dt > 0, got {dt}")
    M = params.mixing()
    mu = track.mu
    cbar = M.T @ mu

    # mixed initial conditions, computed in the lifted 6D space
    x_cv6, P_cv6 = _lift(track.x_cv, track.P_cv, params.accel_prior_var)
    xs = (x_cv6, track.x_ca)
    Ps = (P_cv6, track.P_ca)
    mixed = []
    for j in range(2):
        if cbar[j] <= 1e-300:
            mixed.append((xs[j].copy(), Ps[j].copy()))
            continue
        w0 = M[0, j] * mu[0] / cbar[j]
        w1 = M[1, j] * mu[1] / cbar[j]
        x0 = w0 * xs[0] + w1 * xs[1]
        d0 = xs[0] - x0
        d1 = xs[1] - x0
        P0 = (w0 * (Ps[0] + d0[:, None] * d0) + w1 * (Ps[1] + d1[:, None] * d1))
        mixed.append((x0, P0))

    F_cv, Q_cv = cv_matrices(dt, params.q_cv)
    F_ca, Q_ca = ca_matrices(dt, params.q_ca)
    x_cv = F_cv @ mixed[0][0][:4]
    P_cv = F_cv @ mixed[0][1][:4, :4] @ F_cv.T + Q_cv
    x_ca = F_ca @ mixed[1][0]
    P_ca = F_ca @ mixed[1][1] @ F_ca.T + Q_ca

    track.time += dt
    if detection is None:
        track.mu = cbar
        track.misses += 1
        track.miss_time += dt
    else:
        z = (detection.x, detection.y)
        R = detection.cov_array()
        x_cv, P_cv, l_cv = kalman_update(x_cv, P_cv, z, R)
        x_ca, P_ca, l_ca = kalman_update(x_ca, P_ca, z, R)
        w0 = cbar[0] * l_cv
        w1 = cbar[1] * l_ca
        total = w0 + w1
        track.mu = np.array([w0 / total, w1 / total]) if total > 0.0 else cbar
        track.hits += 1
        track.miss_time = 0.0
        track.last_update = track.time
        track.extent += 0.1 * (detection.extent - track.extent)

    track.x_cv, track.P_cv = x_cv, 0.5 * (P_cv + P_cv.T)
    track.x_ca, track.P_ca = x_ca, 0.5 * (P_ca + P_ca.T)
    track._refresh_combined()
    if not _psd_check_4x4(track._cov):
        raise InternalConsistencyError(
            f"track {track.track_id} covariance not PSD after step"
        )


def imm_step(track: ImmTrack, detection: Detection | None, dt: float,
             params: ImmParams) -> TrackEstimate:
    """Advance one track by dt: mix, predict per model, update when a
    detection is present (a miss predicts only). Returns the new combined
    estimate; raises InternalConsistencyError if the covariance degenerates.
    """
    _imm_advance(track, detection, dt, params)
    return track.estimate()


def associate(tracks, detections, gate: float = DEFAULT_GATE, dt: float = 0.0,
              q_gate: float = 0.5):
    """Greedy nearest-neighbour assignment under a Mahalanobis gate.

    Returns (pairs, unmatched_detections, unmatched_tracks) where pairs maps
    track -> detection. Each detection feeds at most one track and vice
    versa.
    """
    tracks = list(tracks)
    detections = list(detections)
    candidates = []
    for ti, track in enumerate(tracks):
        px, py = track.predicted_position(dt)
        S0 = track.gate_cov(dt, q_gate)
        for di, det in enumerate(detections):
            S = S0 + det.cov_array()
            a, b, c, d = S[0, 0], S[0, 1], S[1, 0], S[1, 1]
            det_s = a * d - b * c
            if det_s <= 0.0:
                continue
            ix, iy = det.x - px, det.y - py
            m2 = (d * ix * ix - (b + c) * ix * iy + a * iy * iy) / det_s
            if m2 <= gate:
                candidates.append((m2, ti, di))
    candidates.sort()
    pairs = {}
    used_tracks: set[int] = set()
    used_dets: set[int] = set()
    for m2, ti, di in candidates:
        if ti in used_tracks or di in used_dets:
            continue
        used_tracks.add(ti)
        used_dets.add(di)
        pairs[tracks[ti]] = detections[di]
    unmatched_dets = [d for i, d in enumerate(detections) if i not in used_dets]
    unmatched_tracks = [t for i, t in enumerate(tracks) if i not in used_tracks]
    return pairs, unmatched_dets, unmatched_tracks


class Tracker:
    """Per-agent track store: associate, filter, confirm, and prune."""

    def __init__(self, agent_id: int, params: ImmParams | None = None):
        self.agent_id = agent_id
        self.params = params or ImmParams()
        self.tracks: dict[int, ImmTrack] = {}
        self._next_id = 1

    def step(self, t: float, dt: float, detections) -> None:
        params = self.params
        live = [self.tracks[k] for k in sorted(self.tracks)]
        pairs, unmatched_dets, unmatched_tracks = associate(
            live, detections, params.gate, dt, params.q_cv)
        for track in live:
            det = pairs.get(track)
            _imm_advance(track, det, dt, params)
            track.hit_window.append(det is not None)
            if len(track.hit_window) > params.confirm_n:
                track.hit_window.pop(0)
            if not track.confirmed and sum(track.hit_window) >= params.confirm_m:
                track.confirmed = True
        self.manage(unmatched_dets, t)

    def manage(self, unmatched_detections, t: float) -> None:
        """Births from unmatched detections; deaths from coasting too long or
        covariance blow-up. Tentative tracks that can no longer reach M hits
        inside their confirmation window die immediately instead of coasting,
        so clutter does not linger for the full coast budget."""
        params = self.params
        for det in unmatched_detections:
            track = ImmTrack(self._next_id, self.agent_id, det, params)
            self.tracks[self._next_id] = track
            self._next_id += 1
        dead = []
        for tid, track in self.tracks.items():
            if track.miss_time > params.coast_budget:
                dead.append(tid)
            elif not track.confirmed and \
                    len(track.hit_window) >= params.confirm_n and \
                    sum(track.hit_window) < params.confirm_m:
                dead.append(tid)
            elif float(track._cov[0, 0] + track._cov[1, 1]) > params.trace_ceiling:
                dead.append(tid)
        for tid in dead:
            del self.tracks[tid]

    def estimates(self) -> list[TrackEstimate]:
        return [self.tracks[k].estimate() for k in sorted(self.tracks)]

    def confirmed_estimates(self) -> list[TrackEstimate]:
        return [t.estimate() for k, t in sorted(self.tracks.items()) if t.confirmed]
