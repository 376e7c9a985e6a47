"""Deterministic tick engine orchestrating the full pipeline.

Each tick runs a fixed eight-stage contract: (1) ground-truth advance,
(2) agent membership, (3) per-agent sensing and tracking, (4) per-agent
intention pipelines, (5) communication strategy and enqueueing, (6) network
stepping, (7) ego-side cooperative fusion, (8) metrics accumulation. All
randomness flows through streams derived from (master seed, purpose, agent,
tick), so a configuration reproduces bit for bit and one agent's parameters
never perturb another agent's draws.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AgentKind,
    InternalConsistencyError,
    MalformedInputError,
    MovementPrimitive,
    SecondOrderDistribution,
    VruKind,
    primitives_for,
)
from .fusion import FusionWeights, RemoteSample, VruMap, fuse_forecasts
from .intention import (
    DEFAULT_HORIZONS,
    ForecastTrajectory,
    IntentionPipeline,
    TransitionDetector,
    TransitionEvent,
)
from .metrics import (
    ForecastRecord,
    MetricsReport,
    metric_forecast_error,
    metric_transition_latency,
    metric_warning_lead,
)
from .network import (
    CommunicationStrategy,
    Message,
    NetworkState,
    PayloadKind,
    StrategyConfig,
    SubjectState,
    agent_membership,
    payload_size,
    step_network,
)
from .perception import SelfReport, in_field_of_view, line_of_sight, sense
from .scenario import GroundTruthState, Scenario, ground_truth_at, load_scenario, transition_times
from .tracking import DEFAULT_GATE, ImmParams, TrackEstimate, Tracker

_PURPOSE_SENSE = 1
_PURPOSE_NET = 2

# coverage gate adds a nominal observation variance, matching how
# detection-to-track association would gate: an entry correct to within
# sensor noise counts as covering the subject
COVERAGE_OBS_VAR = 0.25

MOVING_PRIMITIVES = frozenset({
    MovementPrimitive.STARTING,
    MovementPrimitive.WALKING,
    MovementPrimitive.PEDALING,
    MovementPrimitive.ACCELERATION,
    MovementPrimitive.TURNING,
})

STAGES = ("truth", "membership", "perception", "intention", "strategy",
          "network", "fusion", "knowledge-acquisition", "metrics")


@dataclass(frozen=True)
class RunConfig:
    scenario_path: str
    seed: int = 0
    coop: bool = True
    strategy: str = "adaptive"
    fusion_a: bool = True
    fusion_b: bool = True
    track_fusion: str = "ci"          # ci | naive
    out_dir: str | None = None
    horizons: tuple = DEFAULT_HORIZONS
    trace: bool = False
    forecast_every: int = 5           # pipeline forecast cadence, ticks
    ttc_alert: float = 4.0
    alert_dwell: float = 0.2          # alert condition must persist this long
    alert_min_age: float = 0.5        # subject must have been tracked this long
    decision_max_age: float = 1.0
    decision_mode: str = "cooperative"

    def __post_init__(self):
        if not (0 <= self.seed < 2 ** 64):
            raise MalformedInputError("seed must fit in 64 bits")
        if self.coop and not (self.fusion_a or self.fusion_b):
            raise MalformedInputError(
                "cooperation needs at least one fusion type enabled")
        if self.strategy not in ("broadcast", "request", "adaptive"):
            raise MalformedInputError(f"unknown strategy {self.strategy!r}")
        if self.track_fusion not in ("ci", "naive"):
            raise MalformedInputError(f"unknown track fusion {self.track_fusion!r}")


def _stream(seed: int, purpose: int, agent: int, tick: int) -> np.random.Generator:
    """Independent, reproducible stream per (seed, purpose, agent, tick).

    Philox is counter-based: distinct keys give independent streams, so one
    agent's draw count can never perturb another agent or another tick.
    """
    key = [
        (seed ^ (purpose << 56)) & 0xFFFFFFFFFFFFFFFF,
        (((agent & 0xFFFFFFFF) << 32) | (tick & 0xFFFFFFFF)),
    ]
    return np.random.Generator(np.random.Philox(key=key))


class _AgentRuntime:
    """Per-agent state: tracker, intention pipelines, strategy, buffers."""

    def __init__(self, cfg, scenario: Scenario, run: RunConfig,
                 strategy_cfg: StrategyConfig):
        self.cfg = cfg
        self.is_smart = cfg.kind == AgentKind.SMART_DEVICE
        self.tracker = None if self.is_smart else Tracker(cfg.agent_id)
        self.pipelines: dict[int, IntentionPipeline] = {}
        self.strategy = CommunicationStrategy(cfg.agent_id, strategy_cfg)
        self.frame_interval = max(1, int(round(scenario.tick_hz / cfg.sensor.frame_hz)))
        self.sample_buffers: dict[int, list[tuple[float, float, float]]] = {}
        self.horizons = run.horizons
        self.last_report: SelfReport | None = None
        self.detection_count = 0

    def pose(self, t: float):
        x, y = self.cfg.position_at(t)
        return (x, y, self.cfg.heading)

    def kind_of(self, track) -> VruKind:
        return VruKind.CYCLIST if track.extent > 0.55 else VruKind.PEDESTRIAN


class Engine:
    def __init__(self, scenario: Scenario, run: RunConfig):
        self.scenario = scenario
        self.run = run
        strategy_cfg = StrategyConfig(name=run.strategy)
        self.agents = {
            a.agent_id: _AgentRuntime(a, scenario, run, strategy_cfg)
            for a in scenario.agents
        }
        self.ego_id = scenario.ego.agent_id
        self.weights = FusionWeights(by_agent={
            a.agent_id: a.reliability for a in scenario.agents
            if a.reliability is not None
        })
        self.kind_by_agent = {a.agent_id: a.kind for a in scenario.agents}
        self.net = NetworkState({a.agent_id: a.network for a in scenario.agents})
        self.vmap = VruMap(
            fusion_method=run.track_fusion,
            pipeline_factory=lambda eid: IntentionPipeline(eid, horizons=run.horizons),
        )
        self.fused_detectors: dict[int, TransitionDetector] = {}
        self.mirror_pipelines: dict[int, IntentionPipeline] = {}
        self.mirror_detectors: dict[int, TransitionDetector] = {}
        self._mirror_first_seen: dict[int, float] = {}
        self.fusion_calls = {"fuse_tracks_ci": 0, "fuse_features": 0,
                             "fuse_decisions": 0, "fuse_forecasts": 0,
                             "update_vru_map": 0}
        self._alert_since: dict = {}
        self._alert_fired: dict = {}
        self.transition_events: list[TransitionEvent] = []
        self.alert_times: list[float] = []
        self.forecast_records: list[ForecastRecord] = []
        self.trace: list[list[str]] = [] if run.trace else None
        self._was_active: set[int] = set()
        self._conflict = None
        if scenario.conflict is not None:
            self._conflict = (scenario.conflict.x, scenario.conflict.y)
        self._ts_time: list[float] = []
        self._ts_cov: list[float] = []
        self._ts_queue: list[int] = []
        self._ts_delivered: list[int] = []
        self._ts_err1: list[float | None] = []
        self._occluded: dict[int, int] = {v.vru_id: 0 for v in scenario.vrus}
        self._covered_occluded: dict[int, int] = {v.vru_id: 0 for v in scenario.vrus}
        self._covered_total = 0
        self._vru_ticks = 0

    # --- helpers ---------------------------------------------------------

    def _subject_of(self, est: TrackEstimate) -> SubjectState:
        return SubjectState(est.time, est.mean[0], est.mean[1], est.mean[2],
                            est.mean[3], est.cov[0, 0], est.cov[1, 1])

    def _entry_ttc(self, entry_track: TrackEstimate) -> float:
        if self._conflict is None:
            return math.inf
        dx = self._conflict[0] - entry_track.mean[0]
        dy = self._conflict[1] - entry_track.mean[1]
        dist = math.hypot(dx, dy)
        if dist < 1e-9:
            return 0.0
        closing = (entry_track.mean[2] * dx + entry_track.mean[3] * dy) / dist
        if closing <= 0.0:
            return math.inf
        return dist / closing

    def _self_report_distribution(self, report: SelfReport) -> SecondOrderDistribution:
        support = primitives_for(report.kind)
        if report.gesture and report.primitive != MovementPrimitive.TURNING:
            k = len(support)
            p = np.full(k, 0.05 / (k - 2) if k > 2 else 0.0)
            p[support.index(report.primitive)] = 0.575
            p[support.index(MovementPrimitive.TURNING)] = 0.375
            p /= p.sum()
            return SecondOrderDistribution(support, p, 4.0)
        return SecondOrderDistribution.concentrated(support, report.primitive,
                                                    4.0, leak=0.1)

    def _report_track(self, report: SelfReport) -> TrackEstimate:
        var = report.sigma * report.sigma
        mean = np.array([report.x, report.y, 0.0, 0.0])
        cov = np.diag([var, var, 4.0, 4.0])
        mean.flags.writeable = False
        cov.flags.writeable = False
        probs = np.array([0.5, 0.5])
        probs.flags.writeable = False
        return TrackEstimate(report.vru_id, report.agent_id, report.time, mean,
                             cov, probs, 1, 0, True,
                             0.8 if report.kind == VruKind.CYCLIST else 0.3)

    # --- the tick --------------------------------------------------------

    def run_sim(self) -> MetricsReport:
        t0 = _time.perf_counter()
        scenario = self.scenario
        run = self.run
        dt = scenario.dt
        delivered: list = []
        for tick in range(scenario.n_ticks):
            now = tick * dt
            stages: list[str] | None = None
            if self.trace is not None:
                self.trace.append([])
                stages = self.trace[-1]

            # (1) truth advance
            truths = ground_truth_at(scenario, now)
            if self.trace is not None:
                stages.append("truth")

            # (2) membership
            active = agent_membership(now, scenario.agents)
            for gone in sorted(self._was_active - active):
                self.net.drop_departed(gone)
            self._was_active = set(active)
            if self.trace is not None:
                stages.append("membership")

            # (3) perception: sense -> associate -> filter -> manage
            reports_by_agent: dict[int, list[SelfReport]] = {}
            for aid in sorted(active):
                art = self.agents[aid]
                if tick % art.frame_interval != 0:
                    continue
                rng = _stream(run.seed, _PURPOSE_SENSE, aid, tick)
                dets, reports = sense(
                    art.cfg.sensor, aid, art.pose(now), truths,
                    scenario.obstacles, rng, attached_vru=art.cfg.attached_vru)
                art.detection_count += len(dets)
                if art.is_smart:
                    if reports:
                        art.last_report = reports[0]
                    reports_by_agent[aid] = reports
                else:
                    art.tracker.step(now, art.frame_interval * dt, dets)
            if self.trace is not None:
                stages.append("perception")

            # (4) per-agent intention pipelines on confirmed local tracks,
            # stepped on the agent's own sensor frames (between frames the
            # track estimate carries no new information)
            forecast_tick = tick % run.forecast_every == 0
            for aid in sorted(active):
                art = self.agents[aid]
                if art.tracker is None or tick % art.frame_interval != 0:
                    continue
                live_ids = set()
                for est in art.tracker.confirmed_estimates():
                    live_ids.add(est.track_id)
                    pipe = art.pipelines.get(est.track_id)
                    if pipe is None:
                        pipe = IntentionPipeline(est.track_id, horizons=run.horizons)
                        art.pipelines[est.track_id] = pipe
                        art.sample_buffers[est.track_id] = []
                    x, y = est.position
                    pipe.observe(now, x, y)
                    art.sample_buffers[est.track_id].append((now, x, y))
                    with_fc = forecast_tick and pipe.wx.well_posed() and pipe.wy.well_posed()
                    pipe.step(now, est, art.kind_of(est), with_forecast=with_fc)
                for tid in list(art.pipelines):
                    if tid not in live_ids:
                        del art.pipelines[tid]
                        art.sample_buffers.pop(tid, None)
            if self.trace is not None:
                stages.append("intention")

            # (5) strategy: build products, score, enqueue
            if run.coop:
                self._stage_strategy(now, active)
            if self.trace is not None:
                stages.append("strategy")

            # (6) network
            rng_net = _stream(run.seed, _PURPOSE_NET, 0, tick)
            positions = {aid: self.agents[aid].cfg.position_at(now)
                         for aid in active}
            delivered = step_network(self.net, now, active, positions, rng_net)
            if self.trace is not None:
                stages.append("network")

            # (7) ego fusion (or the ego-only mirror when cooperation is off)
            if run.coop:
                self._stage_fusion(now, active, delivered, reports_by_agent,
                                   forecast_tick, truths)
            else:
                self._stage_mirror(now, forecast_tick, truths)
            if self.trace is not None:
                stages.append("fusion")
                stages.append("knowledge-acquisition")  # reserved no-op hook

            # (8) metrics
            self._stage_metrics(now, truths, len(delivered))
            if self.trace is not None:
                stages.append("metrics")

        return self._finish(_time.perf_counter() - t0)

    # --- stage bodies ----------------------------------------------------

    def _stage_strategy(self, now: float, active: set[int]) -> None:
        run = self.run
        for aid in sorted(active):
            art = self.agents[aid]
            products: list[Message] = []
            if art.is_smart:
                if art.last_report is not None and art.last_report.time == now:
                    rep = art.last_report
                    var = rep.sigma * rep.sigma
                    subject = SubjectState(now, rep.x, rep.y, 0.0, 0.0, var, var)
                    products.append(Message(
                        aid, now, PayloadKind.SELF_REPORT, ("vru", rep.vru_id),
                        subject, rep, payload_size(PayloadKind.SELF_REPORT)))
            elif art.tracker is not None:
                for est in art.tracker.confirmed_estimates():
                    key = (aid, est.track_id)
                    subject = self._subject_of(est)
                    products.append(Message(
                        aid, now, PayloadKind.TRACK, key, subject, est,
                        payload_size(PayloadKind.TRACK)))
                    pipe = art.pipelines.get(est.track_id)
                    if pipe is None or pipe.last_output is None:
                        continue
                    out = pipe.last_output
                    if run.fusion_a:
                        buf = art.sample_buffers.get(est.track_id, [])
                        if buf:
                            products.append(Message(
                                aid, now, PayloadKind.FEATURE_SAMPLES, key,
                                subject, tuple(buf),
                                payload_size(PayloadKind.FEATURE_SAMPLES, len(buf))))
                    if run.fusion_b:
                        products.append(Message(
                            aid, now, PayloadKind.DECISION, key, subject,
                            (out.distribution, art.kind_of(est)),
                            payload_size(PayloadKind.DECISION)))
                        if out.forecast is not None and out.time == now:
                            products.append(Message(
                                aid, now, PayloadKind.FORECAST, key, subject,
                                out.forecast, payload_size(PayloadKind.FORECAST)))
            if aid == self.ego_id and run.strategy == "request":
                if self._ego_wants_data(now):
                    products.append(Message(
                        aid, now, PayloadKind.REQUEST, ("req", aid), None, None,
                        payload_size(PayloadKind.REQUEST)))
            selected = art.strategy.decide(products, now, active, self._conflict)
            for msg in selected:
                if msg.kind == PayloadKind.FEATURE_SAMPLES:
                    art.sample_buffers[msg.subject_key[1]] = []
                self.net.enqueue(msg)

    def _ego_wants_data(self, now: float) -> bool:
        if not self.vmap.entries:
            return True
        stale = self.agents[self.ego_id].strategy.config.request_staleness
        return any(e.staleness(now) > stale for e in self.vmap.entries.values())

    def _stage_fusion(self, now: float, active: set[int], delivered,
                      reports_by_agent, forecast_tick: bool, truths) -> None:
        run = self.run
        ego = self.agents[self.ego_id]
        self.vmap.predict_to(now)

        incoming: list[tuple[TrackEstimate, int]] = []
        remote_samples: list[RemoteSample] = []
        remote_decisions: list[tuple[int, SubjectState, SecondOrderDistribution]] = []
        remote_forecasts: list[tuple[int, SubjectState, ForecastTrajectory]] = []

        for receiver, msg in delivered:
            self.agents[receiver].strategy.note_received(msg, now)
            if receiver != self.ego_id:
                continue
            if msg.kind == PayloadKind.TRACK:
                incoming.append((msg.body, msg.sender))
            elif msg.kind == PayloadKind.SELF_REPORT:
                rep: SelfReport = msg.body
                incoming.append((self._report_track(rep), msg.sender))
                if run.fusion_b:
                    remote_decisions.append(
                        (msg.sender, msg.subject, self._self_report_distribution(rep)))
            elif msg.kind == PayloadKind.FEATURE_SAMPLES and run.fusion_a:
                for (t, x, y) in msg.body:
                    remote_samples.append(RemoteSample(msg.sender, t, x, y))
            elif msg.kind == PayloadKind.DECISION and run.fusion_b:
                dist, kind = msg.body
                remote_decisions.append((msg.sender, msg.subject, dist))
            elif msg.kind == PayloadKind.FORECAST and run.fusion_b:
                remote_forecasts.append((msg.sender, msg.subject, msg.body))

        if ego.tracker is not None:
            for est in ego.tracker.confirmed_estimates():
                incoming.append((est, self.ego_id))

        self.vmap.update(incoming, now)
        self.fusion_calls["update_vru_map"] += 1
        self.fusion_calls["fuse_tracks_ci"] = self.vmap.counters.ci_fusions

        if run.fusion_a and remote_samples:
            self.vmap.fuse_features(remote_samples, self.weights,
                                    self.kind_by_agent, now)
            self.fusion_calls["fuse_features"] += 1

        # route decisions/forecasts to gated entries
        for sender, subject, dist in remote_decisions:
            entry = self._entry_near(subject, now)
            if entry is not None:
                entry.decisions[sender] = (now, dist)
        for sender, subject, fc in remote_forecasts:
            entry = self._entry_near(subject, now)
            if entry is not None:
                entry.remote_forecasts[sender] = (now, fc)

        for eid in sorted(self.vmap.entries):
            entry = self.vmap.entries[eid]
            pipe = entry.pipeline
            ex, ey = entry.track.position
            pipe.observe(now, ex, ey)
            with_fc = forecast_tick and pipe.wx.well_posed() and pipe.wy.well_posed()
            out = pipe.step(now, entry.track, entry.kind, gesture=entry.gesture,
                            with_forecast=with_fc)
            local_dist = out.distribution
            if run.fusion_b:
                fused = self.vmap.fuse_entry_decisions(
                    entry, now, self.weights, self.kind_by_agent, local_dist,
                    run.decision_max_age, run.decision_mode)
                self.fusion_calls["fuse_decisions"] += 1
            else:
                fused = local_dist
                entry.fused_distribution = fused
            detector = self.fused_detectors.get(eid)
            if detector is None:
                detector = TransitionDetector(eid)
                self.fused_detectors[eid] = detector
            event = detector.update(now, fused)
            if event is not None:
                self.transition_events.append(event)

            if out.forecast is not None and out.time == now:
                members = [out.forecast]
                rels = [1.0]
                for sender in sorted(entry.remote_forecasts):
                    t_fc, fc = entry.remote_forecasts[sender]
                    if now - t_fc > run.decision_max_age:
                        continue
                    if fc.horizons.shape == out.forecast.horizons.shape and \
                            np.array_equal(fc.horizons, out.forecast.horizons):
                        members.append(fc)
                        rels.append(self.weights.reliability(
                            sender, self.kind_by_agent[sender]))
                if run.fusion_b and len(members) > 1:
                    fused_fc = fuse_forecasts(members, rels)
                    self.fusion_calls["fuse_forecasts"] += 1
                else:
                    fused_fc = out.forecast
                entry.fused_forecast = fused_fc
                self._record_forecast(now, entry, fused_fc, truths)

            self._maybe_alert(now, ('map', eid), entry, fused, now - entry.created)

    def _entry_near(self, subject: SubjectState, now: float):
        if subject is None:
            return None
        best, best_m2 = None, DEFAULT_GATE
        px, py = subject.predicted(now)
        for eid in sorted(self.vmap.entries):
            entry = self.vmap.entries[eid]
            P = entry.track.cov
            sx = P[0, 0] + subject.var_x + 1e-9
            sy = P[1, 1] + subject.var_y + 1e-9
            ex, ey = entry.track.position
            m2 = (px - ex) ** 2 / sx + (py - ey) ** 2 / sy
            if m2 <= best_m2:
                best, best_m2 = entry, m2
        return best

    def _maybe_alert(self, now: float, key, entry,
                     dist: SecondOrderDistribution | None, age: float,
                     ego_confirmed: bool = False) -> None:
        """Raise the warning when an established, confirmed, conflict-closing
        subject shows a moving primitive; the condition must persist for the
        alert dwell so single-tick estimation glitches stay silent."""
        if dist is None or self._conflict is None:
            return
        if age < self.run.alert_min_age:
            self._alert_since.pop(key, None)
            return
        ego_fresh = (self.ego_id in entry.contributors
                     and now - entry.contributors[self.ego_id] <= 1.0)
        condition = (
            (ego_confirmed or entry.confirmed(now) or ego_fresh)
            and dist.argmax() in MOVING_PRIMITIVES
            and self._entry_ttc(entry.track) <= self.run.ttc_alert
        )
        if not condition:
            self._alert_since.pop(key, None)
            return
        since = self._alert_since.setdefault(key, now)
        held = now - since
        if held >= self.run.alert_dwell and not self._alert_fired.get(key):
            self._alert_fired[key] = True
            self.alert_times.append(now)

    def _record_forecast(self, now: float, entry, fc: ForecastTrajectory,
                         truths) -> None:
        vru_id = self._gated_truth_vru(entry, truths)
        if vru_id is not None:
            self.forecast_records.append(ForecastRecord(
                now, vru_id, fc.horizons, np.asarray(fc.means)))

    def _gated_truth_vru(self, entry, truths) -> int | None:
        best, best_m2 = None, DEFAULT_GATE
        P = entry.track.cov
        ex, ey = entry.track.position
        for s in truths:
            sx = P[0, 0] + COVERAGE_OBS_VAR
            sy = P[1, 1] + COVERAGE_OBS_VAR
            m2 = (s.x - ex) ** 2 / sx + (s.y - ey) ** 2 / sy
            if m2 <= best_m2:
                best, best_m2 = s.vru_id, m2
        return best

    # --- cooperation-off mirror ------------------------------------------

    class _MirrorEntry:
        __slots__ = ("track", "contributors", "gesture")

        def __init__(self, track, ego_id, now):
            self.track = track
            self.contributors = {ego_id: now}
            self.gesture = False

        def confirmed(self, now):
            return False

    def _stage_mirror(self, now: float, forecast_tick: bool, truths) -> None:
        """Without cooperation the ego's picture is just its own confirmed
        tracks; no fusion operation is invoked."""
        run = self.run
        ego = self.agents[self.ego_id]
        if ego.tracker is None:
            return
        live = set()
        for est in ego.tracker.confirmed_estimates():
            live.add(est.track_id)
            pipe = self.mirror_pipelines.get(est.track_id)
            if pipe is None:
                pipe = IntentionPipeline(est.track_id, horizons=run.horizons)
                self.mirror_pipelines[est.track_id] = pipe
                self.mirror_detectors[est.track_id] = TransitionDetector(est.track_id)
            x, y = est.position
            pipe.observe(now, x, y)
            with_fc = forecast_tick and pipe.wx.well_posed() and pipe.wy.well_posed()
            out = pipe.step(now, est, ego.kind_of(est), with_forecast=with_fc)
            event = self.mirror_detectors[est.track_id].update(now, out.distribution)
            if event is not None:
                self.transition_events.append(event)
            first = self._mirror_first_seen.setdefault(est.track_id, now)
            entry = Engine._MirrorEntry(est, self.ego_id, now)
            if out.forecast is not None and out.time == now:
                self._record_forecast(now, entry, out.forecast, truths)
            self._maybe_alert(now, ('mirror', est.track_id), entry,
                              out.distribution, now - first, ego_confirmed=True)
        for tid in list(self.mirror_pipelines):
            if tid not in live:
                del self.mirror_pipelines[tid]
                del self.mirror_detectors[tid]

    # --- metrics ----------------------------------------------------------

    def _coverage_entries(self):
        if self.run.coop:
            return [e.track for e in self.vmap.entries.values()]
        ego = self.agents[self.ego_id]
        return list(ego.tracker.confirmed_estimates()) if ego.tracker else []

    def _stage_metrics(self, now: float, truths, delivered_count: int) -> None:
        scenario = self.scenario
        ego_cfg = self.agents[self.ego_id].cfg
        ego_pose = self.agents[self.ego_id].pose(now)
        tracks = self._coverage_entries()
        covered_now = 0
        for s in truths:
            self._vru_ticks += 1
            covered = False
            for tr in tracks:
                dx = s.x - tr.mean[0]
                dy = s.y - tr.mean[1]
                m2 = (dx * dx / (tr.cov[0, 0] + COVERAGE_OBS_VAR)
                      + dy * dy / (tr.cov[1, 1] + COVERAGE_OBS_VAR))
                if m2 <= DEFAULT_GATE:
                    covered = True
                    break
            if covered:
                self._covered_total += 1
                covered_now += 1
            in_fov = in_field_of_view(ego_cfg.sensor, ego_pose, (s.x, s.y))
            if in_fov and not line_of_sight(ego_pose[:2], (s.x, s.y),
                                            scenario.obstacles):
                self._occluded[s.vru_id] += 1
                if covered:
                    self._covered_occluded[s.vru_id] += 1
        self._ts_time.append(now)
        self._ts_cov.append(covered_now / max(1, len(truths)))
        self._ts_queue.append(self.net.queued_units())
        self._ts_delivered.append(delivered_count)
        err1 = None
        if self.forecast_records:
            rec = self.forecast_records[-1]
            if rec.origin_time == now and now + 1.0 <= scenario.duration:
                idx = int(np.argmin(np.abs(rec.horizons - 1.0)))
                truth = {s.vru_id: s for s in
                         ground_truth_at(scenario, now + float(rec.horizons[idx]))}
                if rec.vru_id in truth:
                    s = truth[rec.vru_id]
                    err1 = math.hypot(rec.means[idx, 0] - s.x, rec.means[idx, 1] - s.y)
        self._ts_err1.append(err1)
        if not self.net.check_conservation():
            raise InternalConsistencyError("network counter conservation violated")

    def _finish(self, runtime: float) -> MetricsReport:
        scenario = self.scenario
        run = self.run
        report = MetricsReport()
        report.config = {
            "scenario": run.scenario_path,
            "seed": run.seed,
            "coop": run.coop,
            "strategy": run.strategy,
            "fusion_a": run.fusion_a,
            "fusion_b": run.fusion_b,
            "track_fusion": run.track_fusion,
        }
        report.duration = scenario.duration
        report.tick_hz = scenario.tick_hz
        report.n_ticks = scenario.n_ticks
        report.runtime_s = runtime

        tagged = []
        for vru in scenario.vrus:
            for t, frm, to in transition_times(scenario, vru.vru_id):
                tagged.append((t, frm, to, vru.vru_id))
        rows, false_alarms = metric_transition_latency(
            self.transition_events, [(t, frm, to) for t, frm, to, _ in tagged])
        by_vru = {str(v.vru_id): [] for v in scenario.vrus}
        for row, (_, _, _, vid) in zip(rows, sorted(tagged)):
            by_vru[str(vid)].append(row)
        report.transition_latency = by_vru
        report.false_alarms = false_alarms

        report.forecast_error, report.skipped_forecast_pairs = \
            metric_forecast_error(self.forecast_records, scenario, run.horizons)
        report.conflict_time = scenario.conflict_time()
        report.warning_lead = metric_warning_lead(self.alert_times,
                                                  report.conflict_time)
        if self.alert_times:
            report.alert_time = min(self.alert_times)
        report.occlusion = {
            str(v.vru_id): {
                "occluded_ticks": self._occluded[v.vru_id],
                "covered_ticks": self._covered_occluded[v.vru_id],
                "coverage": (self._covered_occluded[v.vru_id]
                             / self._occluded[v.vru_id])
                if self._occluded[v.vru_id] else None,
            }
            for v in scenario.vrus
        }
        report.coverage_overall = self._covered_total / max(1, self._vru_ticks)
        report.message_counters = self.net.counters.as_dict()
        report.message_counters["queued"] = self.net.queued_count()
        report.message_counters["in_flight"] = len(self.net.in_flight)
        report.fusion_calls = dict(self.fusion_calls)
        report.timeseries = {
            "time": self._ts_time,
            "coverage": self._ts_cov,
            "queue_units": self._ts_queue,
            "delivered": self._ts_delivered,
            "err_1s": self._ts_err1,
        }
        if self.trace is not None:
            report.trace = self.trace
        return report


def run(config: RunConfig) -> MetricsReport:
    """Load, simulate, and (when an output directory is set) emit reports."""
    scenario = load_scenario(config.scenario_path)
    report = Engine(scenario, config).run_sim()
    if config.out_dir:
        from .metrics import emit_report
        emit_report(report, config.out_dir)
    return report


def run_scenario(scenario: Scenario, config: RunConfig) -> MetricsReport:
    """Simulate an already-built scenario (used by tests and sweeps)."""
    return Engine(scenario, config).run_sim()
