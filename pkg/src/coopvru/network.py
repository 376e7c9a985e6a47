"""Simulated ad-hoc network between agents.

Typed messages move through per-agent priority outboxes under a per-tick
bandwidth budget, then fly per-receiver copies subject to range, loss, and
latency plus jitter. Strategies decide what enters the outbox: broadcast
everything, answer requests only, or score urgency/novelty/information gain
and send what clears a threshold. Counter conservation is checked exactly:
nothing is created or lost without being counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappop, heappush

import numpy as np

from .core import MalformedInputError
from .scenario import AgentConfig, NetworkParams


class PayloadKind(str, Enum):
    TRACK = "track"
    FEATURE_SAMPLES = "feature-samples"
    DECISION = "decision"
    FORECAST = "forecast"
    SELF_REPORT = "self-report"
    REQUEST = "request"


def payload_size(kind: PayloadKind, n_samples: int = 0) -> int:
    """Abstract size units: 1 per track/decision/self-report/request, 1 per
    10 feature samples, 2 per forecast."""
    if kind == PayloadKind.FEATURE_SAMPLES:
        return max(1, math.ceil(n_samples / 10))
    if kind == PayloadKind.FORECAST:
        return 2
    return 1


@dataclass(frozen=True)
class SubjectState:
    """Kinematic summary of the subject a message talks about; rides along
    with every payload so receivers and schedulers can score it uniformly."""

    time: float
    x: float
    y: float
    vx: float
    vy: float
    var_x: float
    var_y: float

    def predicted(self, now: float) -> tuple[float, float]:
        dt = max(0.0, now - self.time)
        return self.x + self.vx * dt, self.y + self.vy * dt


@dataclass
class Message:
    sender: int
    created: float
    kind: PayloadKind
    subject_key: tuple
    subject: SubjectState | None
    body: object
    size: int
    priority: float = 0.0
    seq: int = -1

    def __post_init__(self):
        if self.size < 1:
            raise MalformedInputError(f"message size must be >= 1, got {self.size}")


@dataclass
class NetCounters:
    enqueued: int = 0
    expired: int = 0
    transmitted: int = 0
    transmitted_units: int = 0
    copies: int = 0
    delivered: int = 0
    dropped_loss: int = 0
    dropped_departed_queue: int = 0
    dropped_departed_flight: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class NetworkState:
    """Outboxes, in-flight copies, and exact message accounting."""

    def __init__(self, params_by_agent: dict[int, NetworkParams]):
        self.params = params_by_agent
        self.outbox: dict[int, list] = {aid: [] for aid in params_by_agent}
        self.in_flight: list = []  # heap of (deliver_time, seq, receiver, message)
        self.counters = NetCounters()
        self._seq = 0

    def queued_count(self) -> int:
        return sum(len(q) for q in self.outbox.values())

    def queued_units(self) -> int:
        return sum(m.size for q in self.outbox.values() for _, _, m in q)

    def enqueue(self, message: Message) -> None:
        message.seq = self._seq
        self._seq += 1
        self.counters.enqueued += 1
        heappush(self.outbox[message.sender], (-message.priority, message.seq, message))

    def drop_departed(self, agent_id: int) -> None:
        """An agent left: its queued messages and its own in-flight copies
        are gone; anything addressed to it will be dropped on delivery."""
        q = self.outbox.get(agent_id, [])
        self.counters.dropped_departed_queue += len(q)
        q.clear()
        kept, dropped = [], 0
        for item in self.in_flight:
            if item[3].sender == agent_id:
                dropped += 1
            else:
                kept.append(item)
        if dropped:
            kept.sort()
            self.in_flight = kept
            self.counters.dropped_departed_flight += dropped

    def deliver_due(self, now: float, active: set[int]):
        out = []
        while self.in_flight and self.in_flight[0][0] <= now:
            _, _, receiver, msg = heappop(self.in_flight)
            if receiver in active:
                self.counters.delivered += 1
                out.append((receiver, msg))
            else:
                self.counters.dropped_departed_flight += 1
        return out

    def transmit(self, now: float, active: set[int],
                 positions: dict[int, tuple[float, float]],
                 rng: np.random.Generator) -> None:
        """Drain each active agent's outbox in priority order until its
        per-tick budget runs out; spawn one in-flight copy per in-range
        receiver, subject to loss."""
        for sender in sorted(active):
            q = self.outbox.get(sender)
            if not q:
                continue
            params = self.params[sender]
            budget = params.budget
            sx, sy = positions[sender]
            while q:
                neg_prio, seq, msg = q[0]
                if now - msg.created > params.queue_ttl:
                    heappop(q)
                    self.counters.expired += 1
                    continue
                if msg.size > budget:
                    break  # stays queued for the next tick
                heappop(q)
                budget -= msg.size
                self.counters.transmitted += 1
                self.counters.transmitted_units += msg.size
                for receiver in sorted(active):
                    if receiver == sender:
                        continue
                    rx, ry = positions[receiver]
                    if math.hypot(rx - sx, ry - sy) > params.range_m:
                        continue
                    self.counters.copies += 1
                    if rng.random() < params.loss:
                        self.counters.dropped_loss += 1
                        continue
                    jitter = rng.uniform(-params.jitter, params.jitter) \
                        if params.jitter > 0.0 else 0.0
                    deliver_at = now + max(1e-9, params.latency + jitter)
                    self._seq += 1
                    heappush(self.in_flight, (deliver_at, self._seq, receiver, msg))

    def check_conservation(self) -> bool:
        c = self.counters
        queue_ok = c.enqueued == (self.queued_count() + c.expired + c.transmitted
                                  + c.dropped_departed_queue)
        flight_ok = c.copies == (c.delivered + c.dropped_loss + len(self.in_flight)
                                 + c.dropped_departed_flight)
        return queue_ok and flight_ok


def agent_membership(now: float, agents) -> set[int]:
    """Agents currently inside their join/leave window."""
    return {a.agent_id for a in agents if a.join <= now < a.leave}


def step_network(state: NetworkState, now: float, active: set[int],
                 positions: dict[int, tuple[float, float]],
                 rng: np.random.Generator):
    """One network tick: deliver what is due, then transmit under budgets.
    Returns the delivered (receiver, message) pairs in deterministic order."""
    delivered = state.deliver_due(now, active)
    state.transmit(now, active, positions, rng)
    return delivered


# --- prioritization -----------------------------------------------------------


@dataclass(frozen=True)
class PriorityWeights:
    urgency: float = 1.0
    novelty: float = 0.5
    reduction: float = 0.5
    gate: float = 9.21


def urgency_term(subject: SubjectState, conflict: tuple[float, float] | None) -> float:
    """clamp(1/TTC, 0, 2) with TTC = distance to conflict / closing speed
    (infinite when receding or when no conflict is defined)."""
    if conflict is None:
        return 0.0
    dx, dy = conflict[0] - subject.x, conflict[1] - subject.y
    dist = math.hypot(dx, dy)
    if dist < 1e-9:
        return 2.0
    closing = (subject.vx * dx + subject.vy * dy) / dist
    if closing <= 0.0:
        return 0.0
    return min(2.0, closing / dist)


def novelty_term(subject: SubjectState, known: SubjectState | None, now: float,
                 gate: float) -> float:
    """Max-normalized gated distance between the payload state and what the
    receiver is believed to hold; 1 when the receiver holds nothing."""
    if known is None:
        return 1.0
    kx, ky = known.predicted(now)
    var = known.var_x + known.var_y + subject.var_x + subject.var_y + 1e-6
    m2 = ((subject.x - kx) ** 2 + (subject.y - ky) ** 2) / (0.5 * var)
    dv = math.hypot(subject.vx - known.vx, subject.vy - known.vy)
    return min(1.0, m2 / gate + dv / 2.0)


def reduction_term(subject: SubjectState, known: SubjectState | None) -> float:
    """Relative trace decrease the payload would cause on the receiver's
    estimate, under covariance-intersection semantics on the diagonal
    position block (so a duplicate of what the receiver already holds gains
    nothing)."""
    if known is None:
        return 1.0
    before = known.var_x + known.var_y
    if before <= 0.0:
        return 0.0
    ax = 1.0 / max(subject.var_x, 1e-12)
    ay = 1.0 / max(subject.var_y, 1e-12)
    bx = 1.0 / max(known.var_x, 1e-12)
    by = 1.0 / max(known.var_y, 1e-12)
    after = before
    for w in (0.25, 0.5, 0.75, 1.0):
        cand = (1.0 / (w * ax + (1.0 - w) * bx)
                + 1.0 / (w * ay + (1.0 - w) * by))
        if cand < after:
            after = cand
    return max(0.0, 1.0 - after / before)


def priority_score(subject: SubjectState | None,
                   known: SubjectState | None,
                   conflict: tuple[float, float] | None,
                   now: float,
                   weights: PriorityWeights | None = None) -> float:
    weights = weights or PriorityWeights()
    if subject is None:
        return weights.novelty  # control traffic (requests) rides mid-band
    u = urgency_term(subject, conflict)
    n = novelty_term(subject, known, now, weights.gate)
    r = reduction_term(subject, known)
    return weights.urgency * u + weights.novelty * n + weights.reduction * r


class EchoModel:
    """Sender-side belief about what each receiver already holds: the last
    state sent to (or received from) that peer per subject, expiring after a
    TTL so silent peers are eventually refreshed."""

    def __init__(self, ttl: float = 0.6):
        self.ttl = ttl
        self._known: dict[tuple, dict[int, tuple[float, SubjectState]]] = {}

    def view(self, receiver: int, subject_key: tuple, now: float) -> SubjectState | None:
        per_receiver = self._known.get(subject_key)
        if per_receiver is None:
            return None
        item = per_receiver.get(receiver)
        if item is None or now - item[0] > self.ttl:
            return None
        return item[1]

    def views(self, subject_key: tuple, now: float) -> dict[int, SubjectState]:
        """All non-expired receiver views of one subject."""
        per_receiver = self._known.get(subject_key)
        if not per_receiver:
            return {}
        horizon = now - self.ttl
        return {r: s for r, (t, s) in per_receiver.items() if t >= horizon}

    def note(self, receiver: int, subject_key: tuple, subject: SubjectState,
             now: float) -> None:
        if subject is not None:
            self._known.setdefault(subject_key, {})[receiver] = (now, subject)


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "adaptive"            # broadcast | request | adaptive
    threshold: float = 0.3
    weights: PriorityWeights = field(default_factory=PriorityWeights)
    echo_ttl: float = 0.6
    request_staleness: float = 0.5    # ego requests when map entries go stale


class CommunicationStrategy:
    """Decides, each tick, which local products become messages."""

    def __init__(self, agent_id: int, config: StrategyConfig):
        self.agent_id = agent_id
        self.config = config
        self.echo = EchoModel(config.echo_ttl)
        self.request_pending = False

    def note_received(self, message: Message, now: float) -> None:
        if message.kind == PayloadKind.REQUEST:
            self.request_pending = True
        elif message.subject is not None:
            self.echo.note(message.sender, message.subject_key, message.subject, now)

    def decide(self, products: list[Message], now: float, active: set[int],
               conflict: tuple[float, float] | None) -> list[Message]:
        """Select and prioritize; selected messages get their priority set."""
        name = self.config.name
        others = [a for a in sorted(active) if a != self.agent_id]
        if name == "broadcast":
            for m in products:
                m.priority = 1.0
            selected = list(products)
        elif name == "request":
            if self.request_pending:
                for m in products:
                    m.priority = 1.0
                selected = list(products)
                self.request_pending = False
            else:
                selected = [m for m in products if m.kind == PayloadKind.REQUEST]
                for m in selected:
                    m.priority = 1.0
        elif name == "adaptive":
            w = self.config.weights
            selected = []
            for m in products:
                if m.kind == PayloadKind.REQUEST:
                    m.priority = w.novelty
                    selected.append(m)
                    continue
                u_term = w.urgency * urgency_term(m.subject, conflict) \
                    if m.subject is not None else 0.0
                ceiling = u_term + w.novelty + w.reduction
                views = self.echo.views(m.subject_key, now)
                if any(r not in views for r in others):
                    score = ceiling  # someone holds nothing: maximal gain
                else:
                    score = 0.0
                    for receiver in others:
                        known = views[receiver]
                        cand = (u_term
                                + w.novelty * novelty_term(m.subject, known, now, w.gate)
                                + w.reduction * reduction_term(m.subject, known))
                        if cand > score:
                            score = cand
                            if score >= ceiling - 1e-12:
                                break
                if score >= self.config.threshold:
                    m.priority = score
                    selected.append(m)
        else:
            raise MalformedInputError(f"unknown strategy {name!r}")
        for m in selected:
            if m.subject is not None:
                for receiver in others:
                    self.echo.note(receiver, m.subject_key, m.subject, now)
        return selected


def strategy_decide(strategy: CommunicationStrategy, products, now: float,
                    active: set[int], conflict=None) -> list[Message]:
    return strategy.decide(list(products), now, active, conflict)
