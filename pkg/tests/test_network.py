import math

import numpy as np
import pytest

from coopvru.network import (
    CommunicationStrategy,
    EchoModel,
    Message,
    NetworkState,
    PayloadKind,
    PriorityWeights,
    StrategyConfig,
    SubjectState,
    agent_membership,
    payload_size,
    priority_score,
    step_network,
    urgency_term,
)
from coopvru.scenario import AgentConfig, NetworkParams
from coopvru.core import AgentKind


def params(**kw):
    base = dict(latency=0.05, jitter=0.0, loss=0.0, range_m=300.0, budget=8,
                queue_ttl=1.0)
    base.update(kw)
    return NetworkParams(**base)


def make_state(n_agents=2, **kw):
    return NetworkState({i: params(**kw) for i in range(1, n_agents + 1)})


def msg(sender=1, created=0.0, kind=PayloadKind.TRACK, key=("t", 1),
        subject=None, size=1, priority=1.0):
    return Message(sender, created, kind, key, subject, None, size, priority)


def subject(x=0.0, y=0.0, vx=0.0, vy=0.0, var=1.0, t=0.0):
    return SubjectState(t, x, y, vx, vy, var, var)


POS = {1: (0.0, 0.0), 2: (10.0, 0.0), 3: (20.0, 0.0)}


def rng_net(tick=0, seed=0):
    return np.random.default_rng(np.random.SeedSequence([seed, 99, 2, tick]))


class TestPriorityScore:
    def test_receding_known_duplicate_scores_zero(self):
        s = subject(x=0.0, y=10.0, vx=0.0, vy=5.0)  # moving away from (0, 0)
        known = subject(x=0.0, y=10.0, vx=0.0, vy=5.0)
        assert priority_score(s, known, (0.0, 0.0), 0.0) == pytest.approx(0.0)

    def test_urgency_from_distance_and_closing_speed(self):
        # 20 m away closing at 10 m/s: TTC 2 s, urgency 1/2
        s = subject(x=20.0, y=0.0, vx=-10.0, vy=0.0)
        assert urgency_term(s, (0.0, 0.0)) == pytest.approx(0.5)
        score = priority_score(s, subject(x=20.0, y=0.0, vx=-10.0, vy=0.0),
                               (0.0, 0.0), 0.0)
        assert score == pytest.approx(1.0 * 0.5, abs=1e-9)

    def test_unknown_beats_known_duplicate(self):
        s = subject(x=5.0, y=5.0)
        known_dup = subject(x=5.0, y=5.0)
        hi = priority_score(s, None, None, 0.0)
        lo = priority_score(s, known_dup, None, 0.0)
        assert hi > lo

    def test_urgency_clamped_at_two(self):
        s = subject(x=0.5, y=0.0, vx=-10.0, vy=0.0)
        assert urgency_term(s, (0.0, 0.0)) == 2.0


class TestStrategies:
    def cfg(self, name, **kw):
        return StrategyConfig(name=name, **kw)

    def test_broadcast_sends_all(self):
        strat = CommunicationStrategy(1, self.cfg("broadcast"))
        products = [msg(key=("t", k)) for k in range(3)]
        out = strat.decide(products, 0.0, {1, 2}, None)
        assert len(out) == 3

    def test_request_only_silent_without_requests(self):
        strat = CommunicationStrategy(1, self.cfg("request"))
        out = strat.decide([msg(key=("t", 1))], 0.0, {1, 2}, None)
        assert out == []

    def test_request_only_answers_request(self):
        strat = CommunicationStrategy(1, self.cfg("request"))
        strat.note_received(msg(sender=2, kind=PayloadKind.REQUEST, key=("r", 2)),
                            0.0)
        out = strat.decide([msg(key=("t", 1))], 0.04, {1, 2}, None)
        assert len(out) == 1

    def test_adaptive_thresholds_and_orders(self):
        strat = CommunicationStrategy(1, self.cfg("adaptive", threshold=0.3))
        near = msg(key=("t", 1), subject=subject(x=20.0, y=0.0, vx=-10.0, vy=0.0))
        unknown = msg(key=("t", 2), subject=subject(x=40.0, y=3.0))
        # prime the echo so subject 3 is a known, receding duplicate
        stale = subject(x=-5.0, y=30.0, vx=0.0, vy=2.0)
        strat.echo.note(2, ("t", 3), stale, 0.0)
        dup = msg(key=("t", 3), subject=stale)
        out = strat.decide([near, unknown, dup], 0.0, {1, 2}, (0.0, 0.0))
        kept = {m.subject_key for m in out}
        assert ("t", 2) in kept      # novelty 1 + reduction 1 -> 1.0
        assert ("t", 1) in kept      # urgency 0.5 + novelty/reduction 1.5w
        assert ("t", 3) not in kept  # known duplicate, receding

    def test_adaptive_echo_ttl_forces_refresh(self):
        strat = CommunicationStrategy(1, self.cfg("adaptive", echo_ttl=0.6))
        still = msg(key=("t", 1), subject=subject(x=10.0, y=10.0))
        assert strat.decide([still], 0.0, {1, 2}, None)      # first: novel
        still2 = msg(key=("t", 1), subject=subject(x=10.0, y=10.0, t=0.2),
                     created=0.2)
        assert not strat.decide([still2], 0.2, {1, 2}, None)  # echoed: quiet
        still3 = msg(key=("t", 1), subject=subject(x=10.0, y=10.0, t=0.9),
                     created=0.9)
        assert strat.decide([still3], 0.9, {1, 2}, None)      # expired: resend


class TestStepNetwork:
    def test_total_loss_delivers_nothing(self):
        state = make_state(2, loss=0.999999999)
        m = msg()
        state.enqueue(m)
        delivered = []
        for k in range(10):
            delivered += step_network(state, 0.04 * k, {1, 2}, POS, rng_net(k))
        assert delivered == []
        assert state.counters.dropped_loss == state.counters.copies == 1

    def test_deterministic_latency(self):
        state = make_state(2, latency=0.1, jitter=0.0, loss=0.0)
        state.enqueue(msg(created=0.0))
        out0 = step_network(state, 0.0, {1, 2}, POS, rng_net(0))
        assert out0 == []
        out1 = step_network(state, 0.04, {1, 2}, POS, rng_net(1))
        assert out1 == []  # 0.04 < 0.1
        out2 = step_network(state, 0.08, {1, 2}, POS, rng_net(2))
        assert out2 == []
        out3 = step_network(state, 0.12, {1, 2}, POS, rng_net(3))
        assert len(out3) == 1 and out3[0][0] == 2

    def test_budget_takes_top_two_of_three(self):
        state = make_state(2, budget=2, loss=0.0)
        for k, prio in enumerate((0.2, 0.9, 0.5)):
            state.enqueue(msg(key=("t", k), priority=prio))
        step_network(state, 0.0, {1, 2}, POS, rng_net(0))
        assert state.counters.transmitted == 2
        remaining = [m for _, _, m in state.outbox[1]]
        assert [m.priority for m in remaining] == [0.2]
        step_network(state, 0.04, {1, 2}, POS, rng_net(1))
        assert state.counters.transmitted == 3

    def test_out_of_range_receiver_gets_no_copy(self):
        state = make_state(3, range_m=15.0, loss=0.0)
        state.enqueue(msg())
        step_network(state, 0.0, {1, 2, 3}, POS, rng_net(0))
        # agent 2 at 10 m is in range, agent 3 at 20 m is not
        assert state.counters.copies == 1

    def test_queue_ttl_expiry(self):
        state = make_state(2, queue_ttl=0.5)
        state.enqueue(msg(created=0.0))
        delivered = step_network(state, 1.0, {1, 2}, POS, rng_net(0))
        assert delivered == [] and state.counters.expired == 1

    def test_conservation_under_random_traffic(self):
        rng = np.random.default_rng(7)
        for run in range(10):
            state = make_state(3, loss=float(rng.uniform(0, 0.4)),
                               budget=int(rng.integers(1, 5)))
            t = 0.0
            for tick in range(100):
                t = tick * 0.04
                for sender in (1, 2, 3):
                    if rng.random() < 0.4:
                        state.enqueue(msg(sender=sender, created=t,
                                          key=("t", int(rng.integers(5))),
                                          size=int(rng.integers(1, 3)),
                                          priority=float(rng.random())))
                step_network(state, t, {1, 2, 3}, POS, rng_net(tick, seed=run))
                assert state.check_conservation()

    def test_identical_seeds_identical_counters(self):
        def run():
            state = make_state(3, loss=0.3)
            for tick in range(50):
                t = tick * 0.04
                state.enqueue(msg(created=t, key=("t", tick % 3)))
                step_network(state, t, {1, 2, 3}, POS, rng_net(tick, seed=5))
            return state.counters.as_dict()

        assert run() == run()

    def test_no_delivery_before_latency_minus_jitter(self):
        state = make_state(2, latency=0.1, jitter=0.02, loss=0.0)
        for tick in range(30):
            t = tick * 0.01
            if tick == 0:
                state.enqueue(msg(created=0.0))
            for receiver, m in step_network(state, t, {1, 2}, POS, rng_net(tick)):
                assert t >= m.created + 0.1 - 0.02 - 1e-12


class TestMembership:
    def agents(self):
        mk = lambda aid, join, leave: AgentConfig(
            aid, AgentKind.VEHICLE, 0.0, 0.0, 0.0, join=join,
            leave=leave if leave is not None else math.inf)
        return [mk(1, 0.0, None), mk(2, 10.0, None), mk(3, 0.0, 30.0)]

    def test_not_yet_joined(self):
        active = agent_membership(5.0, self.agents())
        assert active == {1, 3}

    def test_all_permanent_constant(self):
        agents = self.agents()[:1]
        assert agent_membership(0.0, agents) == agent_membership(100.0, agents)

    def test_departure_drops_in_flight_and_conserves(self):
        state = make_state(3, latency=0.5, loss=0.0)
        state.enqueue(msg(sender=3, created=0.0, key=("t", 1)))
        state.enqueue(msg(sender=3, created=0.0, key=("t", 2)))
        step_network(state, 0.0, {1, 2, 3}, POS, rng_net(0))
        assert len(state.in_flight) == 4  # two receivers each
        state.drop_departed(3)
        assert state.counters.dropped_departed_flight == 4
        assert state.check_conservation()
        assert step_network(state, 1.0, {1, 2}, POS, rng_net(1)) == []


class TestPayloadSize:
    def test_sizes(self):
        assert payload_size(PayloadKind.TRACK) == 1
        assert payload_size(PayloadKind.DECISION) == 1
        assert payload_size(PayloadKind.SELF_REPORT) == 1
        assert payload_size(PayloadKind.FORECAST) == 2
        assert payload_size(PayloadKind.FEATURE_SAMPLES, n_samples=10) == 1
        assert payload_size(PayloadKind.FEATURE_SAMPLES, n_samples=11) == 2
