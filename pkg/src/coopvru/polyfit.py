"""Sliding-window weighted least squares in an orthogonal polynomial basis.

A window holds timestamped scalar samples and fits a low-degree polynomial
whose objective weights each sample by its own weight times an exponential
age decay. Samples may arrive in any time order; the fit only depends on the
retained sample multiset, which is what makes the window safe to feed from an
ad-hoc network where data shows up late or interleaved.

Internally the window keeps decay-weighted power sums (normal-equation
accumulators), so an in-order insert costs O(1) regardless of window size.
The orthogonal basis is rebuilt from those moments at fit time via
Gram-Schmidt on {1, u, u^2, ...} under the discrete weighted inner product.
"""

from __future__ import annotations

import math
from bisect import bisect_right, insort
from dataclasses import dataclass

import numpy as np

from .core import MalformedInputError, UnderdeterminedWindowError

# Re-anchor / rebuild the accumulators before the decay factors or shifted
# times grow large enough to hurt conditioning.
_REBUILD_OPS = 4096


@dataclass(frozen=True)
class Sample:
    """One scalar observation: value at a time, carrying a fusion weight."""

    time: float
    value: float
    weight: float = 1.0
    source: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.time) and math.isfinite(self.value)
                and math.isfinite(self.weight)):
            raise MalformedInputError(f"non-finite sample {self!r}")
        if self.weight < 0.0:
            raise MalformedInputError(f"negative sample weight {self.weight}")


class FitResult:
    """Fitted polynomial: orthogonal-basis coefficients plus evaluators.

    The residual RMS is computed on first access (most fits are only ever
    differentiated, not residual-checked)."""

    __slots__ = ("coefficients", "_rms", "_rms_fn", "_mono", "_anchor", "_deriv")

    def __init__(self, coefficients, rms_fn, mono, anchor):
        self.coefficients = coefficients
        self._rms = None
        self._rms_fn = rms_fn
        self._mono = tuple(float(c) for c in mono)  # coefficients in u = t - anchor
        self._anchor = anchor
        self._deriv = {0: self._mono}

    @property
    def residual_rms(self) -> float:
        if self._rms is None:
            self._rms = self._rms_fn(self._mono)
        return self._rms

    def _coeffs(self, order: int):
        c = self._deriv.get(order)
        if c is None:
            prev = self._coeffs(order - 1)
            c = tuple(k * prev[k] for k in range(1, len(prev)))
            self._deriv[order] = c
        return c

    def value(self, t: float, order: int = 0) -> float:
        """Evaluate the fitted polynomial or one of its derivatives at t."""
        c = self._coeffs(order)
        u = t - self._anchor
        out = 0.0
        for ck in reversed(c):
            out = out * u + ck
        return out


class ApproxWindow:
    """Sliding time window with incremental weighted polynomial fits.

    Parameters
    ----------
    degree : polynomial degree of the fit (default 2).
    span : window length in seconds; samples older than latest - span are
        evicted (default 2.0).
    half_life : age at which a sample's decay weight halves, in seconds
        (default 1.0).
    """

    def __init__(self, degree: int = 2, span: float = 2.0, half_life: float = 1.0):
        if degree < 0 or span <= 0.0 or half_life <= 0.0:
            raise MalformedInputError(
                f"bad window parameters degree={degree} span={span} half_life={half_life}"
            )
        self.degree = degree
        self.span = span
        self.half_life = half_life
        self._times: list[float] = []      # sorted, parallel to _samples
        self._samples: list[Sample] = []
        self._moments = [0.0] * (2 * degree + 1)  # sum w * d * u^k
        self._rhs = [0.0] * (degree + 1)          # sum w * d * u^k * y
        self._ysq = 0.0                           # sum w * d * y^2
        self._anchor = 0.0
        self._ops = 0
        self.stale_discarded = 0
        self.evicted = 0
        self._version = 0
        self._fit_cache: tuple[int, FitResult] | None = None
        self._distinct: dict[float, int] = {}  # positive-weight sample times

    # -- bookkeeping -------------------------------------------------------

    def __len__(self):
        return len(self._samples)

    @property
    def latest(self) -> float | None:
        return self._times[-1] if self._times else None

    @property
    def oldest(self) -> float | None:
        return self._times[0] if self._times else None

    def fill(self) -> float:
        """Fraction of the span covered by retained samples, in [0, 1]."""
        if len(self._times) < 2:
            return 0.0
        return min(1.0, (self._times[-1] - self._times[0]) / self.span)

    def is_extrapolation(self, t: float) -> bool:
        return not self._times or t < self._times[0] or t > self._times[-1]

    def _accumulate(self, s: Sample, sign: float) -> None:
        u = s.time - self._anchor
        e = sign * s.weight * 2.0 ** (u / self.half_life)
        y = s.value
        M = self._moments
        R = self._rhs
        if self.degree == 2:
            u2 = u * u
            ey = e * y
            M[0] += e
            M[1] += e * u
            M[2] += e * u2
            M[3] += e * u2 * u
            M[4] += e * u2 * u2
            R[0] += ey
            R[1] += ey * u
            R[2] += ey * u2
        else:
            up = 1.0
            for k in range(2 * self.degree + 1):
                M[k] += e * up
                if k <= self.degree:
                    R[k] += e * up * y
                up *= u
        self._ysq += e * y * y
        self._ops += 1

    def _rebuild(self) -> None:
        """Recompute accumulators from scratch with a fresh anchor."""
        self._anchor = self._times[0] if self._times else 0.0
        self._moments = [0.0] * (2 * self.degree + 1)
        self._rhs = [0.0] * (self.degree + 1)
        self._ysq = 0.0
        self._ops = 0
        for s in self._samples:
            self._accumulate(s, 1.0)
        self._ops = 0

    # -- the operations ----------------------------------------------------

    def insert(self, sample: Sample | None = None, *, time: float | None = None,
               value: float | None = None, weight: float = 1.0,
               source: int | None = None) -> "ApproxWindow":
        """Insert a sample, placed by timestamp regardless of arrival order.

        Samples older than the span (relative to the latest retained time)
        are silently discarded and counted in ``stale_discarded``. Inserting
        a newer sample evicts everything that falls off the span.
        """
        if sample is None:
            sample = Sample(time, value, weight, source)
        self._version += 1
        if self._times and sample.time <= self._times[-1] - self.span:
            self.stale_discarded += 1
            return self
        if not self._times:
            self._anchor = sample.time
        idx = bisect_right(self._times, sample.time)
        self._times.insert(idx, sample.time)
        self._samples.insert(idx, sample)
        self._accumulate(sample, 1.0)
        if sample.weight > 0.0:
            self._distinct[sample.time] = self._distinct.get(sample.time, 0) + 1
        # evict anything beyond the span if the latest time advanced
        cutoff = self._times[-1] - self.span
        while self._times and self._times[0] <= cutoff:
            old = self._samples.pop(0)
            self._times.pop(0)
            self._accumulate(old, -1.0)
            self.evicted += 1
            if old.weight > 0.0:
                n = self._distinct[old.time] - 1
                if n:
                    self._distinct[old.time] = n
                else:
                    del self._distinct[old.time]
        if (self._times[-1] - self._anchor) > self.span + 4.0 * self.half_life \
                or self._ops > _REBUILD_OPS:
            self._rebuild()
        return self

    def well_posed(self) -> bool:
        return len(self._distinct) >= self.degree + 1

    def _rank_floor(self, k: int) -> float:
        S = self._moments
        return 1e-13 * max(S[0] * max(abs(S[2 * k]), 1.0), 1e-300)

    def fit(self, reference_time: float | None = None) -> FitResult:
        """Weighted least-squares fit over the retained samples.

        The decay weight 2^(-(t_ref - t_i)/half_life) factors into a global
        scale times a per-sample factor, so the minimizing coefficients do
        not depend on ``reference_time``; the parameter is kept for symmetry
        with evaluation and accepted for any finite value.
        """
        if not self.well_posed():
            raise UnderdeterminedWindowError(
                f"need {self.degree + 1} distinct-time weighted samples, have {len(self)}"
            )
        if self._fit_cache is not None and self._fit_cache[0] == self._version:
            return self._fit_cache[1]
        result = self._fit_deg2() if self.degree == 2 else (
            self._fit_deg1() if self.degree == 1 else self._fit_generic())
        self._fit_cache = (self._version, result)
        return result

    def _rms_closure(self):
        """Weighted RMS of the actual residuals over a snapshot of the
        current samples; immune to the cancellation that plagues the
        sum-of-squares identity on near-exact fits."""
        samples = tuple(self._samples)
        anchor = self._anchor
        inv_h = 1.0 / self.half_life

        def rms_of(mono) -> float:
            num = 0.0
            den = 0.0
            for s in samples:
                u = s.time - anchor
                e = s.weight * 2.0 ** (u * inv_h)
                p = 0.0
                for ck in reversed(mono):
                    p = p * u + ck
                r = s.value - p
                num += e * r * r
                den += e
            return math.sqrt(num / den) if den > 0.0 else 0.0

        return rms_of

    def _fit_deg1(self) -> FitResult:
        S0, S1, S2 = self._moments
        T0, T1 = self._rhs
        a = S1 / S0
        n1 = S2 - a * S1
        if n1 <= self._rank_floor(1):
            raise UnderdeterminedWindowError("rank-deficient window at basis degree 1")
        c0 = T0 / S0
        c1 = (T1 - a * T0) / n1
        mono = (c0 - c1 * a, c1)
        return FitResult(np.array([c0, c1]), self._rms_closure(), mono,
                         self._anchor)

    def _fit_deg2(self) -> FitResult:
        """Closed-form Gram-Schmidt on {1, u, u^2} from the moment sums."""
        S0, S1, S2, S3, S4 = self._moments
        T0, T1, T2 = self._rhs
        a = S1 / S0
        n1 = S2 - a * S1
        if n1 <= self._rank_floor(1):
            raise UnderdeterminedWindowError("rank-deficient window at basis degree 1")
        b = (S3 - a * S2) / n1
        c = S2 / S0
        n2 = S4 - b * (S3 - a * S2) - c * S2
        if n2 <= self._rank_floor(2):
            raise UnderdeterminedWindowError("rank-deficient window at basis degree 2")
        c0 = T0 / S0
        yq1 = T1 - a * T0
        c1 = yq1 / n1
        yq2 = T2 - b * yq1 - c * T0
        c2 = yq2 / n2
        mono = (c0 - c1 * a + c2 * (a * b - c), c1 - c2 * b, c2)
        return FitResult(np.array([c0, c1, c2]), self._rms_closure(), mono,
                         self._anchor)

    def _fit_generic(self) -> FitResult:
        d = self.degree
        S = self._moments
        H = np.empty((d + 1, d + 1))
        for i in range(d + 1):
            for j in range(d + 1):
                H[i, j] = S[i + j]
        T = np.asarray(self._rhs)

        # Gram-Schmidt on {1, u, ..., u^d} under <a, b> = a' H b.
        basis = []   # monomial coefficient vectors, length d+1
        norms = []
        coeffs = []
        for k in range(d + 1):
            q = np.zeros(d + 1)
            q[k] = 1.0
            for j in range(k):
                proj = float(q @ H @ basis[j]) / norms[j]
                q = q - proj * basis[j]
            nk = float(q @ H @ q)
            if nk <= self._rank_floor(k):
                raise UnderdeterminedWindowError(
                    f"rank-deficient window at basis degree {k}"
                )
            basis.append(q)
            norms.append(nk)
            coeffs.append(float(q @ T) / nk)

        mono = np.zeros(d + 1)
        for ck, q in zip(coeffs, basis):
            mono += ck * q
        return FitResult(np.asarray(coeffs), self._rms_closure(), mono,
                         self._anchor)

    def evaluate(self, t: float, order: int = 0) -> float:
        """Value (order 0) or analytic derivative (orders 1..degree) of the
        current fit at time t. Extrapolation beyond the samples is allowed;
        check ``is_extrapolation`` when it matters."""
        if order > self.degree:
            raise MalformedInputError(
                f"derivative order {order} exceeds degree {self.degree}"
            )
        return self.fit().value(t, order)
