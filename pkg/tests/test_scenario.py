import math

import numpy as np
import pytest

from coopvru.core import MovementPrimitive, VruKind
from coopvru.scenario import (
    Phase,
    RectObstacle,
    ScenarioError,
    SegmentObstacle,
    build_scenario,
    ground_truth_at,
    speed_profile,
    transition_times,
)

P = MovementPrimitive


def minimal_doc(**overrides):
    doc = {
        "duration_s": 10.0,
        "vrus": [
            {
                "id": 1,
                "kind": "pedestrian",
                "x": 0.0,
                "y": 0.0,
                "heading": 0.0,
                "phases": [{"primitive": "waiting", "start_s": 0.0}],
            }
        ],
        "agents": [{"id": 100, "kind": "ego-vehicle", "x": -20.0, "y": 0.0}],
    }
    doc.update(overrides)
    return doc


class TestBuildScenario:
    def test_minimal(self):
        sc = build_scenario(minimal_doc())
        assert len(sc.vrus) == 1
        assert len(sc.agents) == 1
        assert sc.tick_hz == 25.0

    def test_duplicate_agent_id(self):
        doc = minimal_doc()
        doc["agents"].append({"id": 100, "kind": "infrastructure", "x": 0.0, "y": 5.0})
        with pytest.raises(ScenarioError, match="100"):
            build_scenario(doc)

    def test_phase_exceeding_duration(self):
        doc = minimal_doc(duration_s=60.0)
        doc["vrus"][0]["phases"].append({"primitive": "walking", "start_s": 70.0})
        with pytest.raises(ScenarioError, match="exceeds duration"):
            build_scenario(doc)

    def test_unknown_key_rejected_with_path(self):
        doc = minimal_doc()
        doc["vrus"][0]["speling_error"] = 1
        with pytest.raises(ScenarioError, match=r"\$\.vrus\[0\]"):
            build_scenario(doc)

    def test_missing_ego_rejected(self):
        doc = minimal_doc()
        doc["agents"][0]["kind"] = "vehicle"
        with pytest.raises(ScenarioError, match="ego"):
            build_scenario(doc)

    def test_first_phase_must_start_at_zero(self):
        doc = minimal_doc()
        doc["vrus"][0]["phases"][0]["start_s"] = 1.0
        with pytest.raises(ScenarioError, match="t=0"):
            build_scenario(doc)

    def test_conflict_unknown_vru(self):
        doc = minimal_doc(conflict={"point": [0.0, 0.0], "vru": 9})
        with pytest.raises(ScenarioError, match="unknown vru"):
            build_scenario(doc)


def cyclist_doc(phases):
    return {
        "duration_s": 30.0,
        "vrus": [
            {"id": 1, "kind": "cyclist", "x": 0.0, "y": 0.0, "heading": 0.0,
             "phases": phases}
        ],
        "agents": [{"id": 100, "kind": "ego-vehicle", "x": -20.0, "y": 0.0}],
    }


class TestSpeedProfile:
    def test_starting_at_onset_is_zero(self):
        plan = (Phase(P.STARTING, 0.0, v_max=4.0, tau=1.5),)
        assert speed_profile(plan, 0.0) == pytest.approx(0.0)

    def test_starting_at_tau(self):
        plan = (Phase(P.STARTING, 0.0, v_max=4.0, tau=1.5),)
        assert speed_profile(plan, 1.5) == pytest.approx(4.0 * (1 - math.exp(-1)), abs=1e-12)

    def test_waiting_is_zero(self):
        plan = (Phase(P.WAITING, 0.0),)
        for t in (0.0, 1.0, 5.0):
            assert speed_profile(plan, t) == 0.0

    def test_stopping_decays_and_clamps(self):
        plan = (
            Phase(P.PEDALING, 0.0, v_max=4.0, tau=1.5),
            Phase(P.STOPPING, 5.0, v_max=4.0, tau=1.0),
        )
        assert speed_profile(plan, 5.5) == pytest.approx(4.0 * math.exp(-0.5))
        assert speed_profile(plan, 5.0 + 1.0 * math.log(4.0 / 0.05) + 0.2) == 0.0

    def test_continuity_at_boundaries(self):
        phases = [
            {"primitive": "waiting", "start_s": 0.0},
            {"primitive": "starting", "start_s": 2.0, "v_max": 4.0, "tau": 1.5},
            {"primitive": "pedaling", "start_s": 6.0},
            {"primitive": "turning", "start_s": 8.0, "omega": 0.4},
            {"primitive": "deceleration", "start_s": 11.0, "tau": 2.0},
        ]
        sc = build_scenario(cyclist_doc(phases))
        vru = sc.vrus[0]
        for t_b in (2.0, 6.0, 8.0, 11.0):
            before = speed_profile(vru, t_b - 1e-9)
            after = speed_profile(vru, t_b + 1e-9)
            assert abs(before - after) < 1e-6  # continuous up to the 1e-9 probe


class TestGroundTruth:
    def test_constant_walk(self):
        doc = minimal_doc()
        doc["vrus"][0]["phases"] = [
            {"primitive": "walking", "start_s": 0.0, "v_max": 1.5}
        ]
        sc = build_scenario(doc)
        st = ground_truth_at(sc, 2.0)[0]
        assert st.state.x == pytest.approx(3.0)
        assert st.state.y == pytest.approx(0.0)
        assert st.primitive == P.WALKING

    def test_waiting_stays_put(self):
        sc = build_scenario(minimal_doc())
        for t in (0.0, 3.3, 9.9):
            st = ground_truth_at(sc, t)[0]
            assert (st.state.x, st.state.y) == (0.0, 0.0)

    def test_starting_cyclist_displacement(self):
        # closed form: vmax * (dt - tau*(1 - e^(-dt/tau))) at dt = tau
        sc = build_scenario(cyclist_doc(
            [{"primitive": "starting", "start_s": 0.0, "v_max": 4.0, "tau": 1.5}]))
        st = ground_truth_at(sc, 1.5)[0]
        assert st.state.x == pytest.approx(4.0 * 1.5 * math.exp(-1), rel=1e-9)
        # numerical oracle: integrate the speed profile, step 1e-4
        ts = np.arange(0.0, 1.5 + 1e-9, 1e-4)
        vs = [speed_profile(sc.vrus[0], float(t)) for t in ts]
        assert st.state.x == pytest.approx(np.trapezoid(vs, ts), abs=1e-6)

    def test_position_matches_trapezoid_every_phase(self):
        phases = [
            {"primitive": "waiting", "start_s": 0.0},
            {"primitive": "starting", "start_s": 1.0, "v_max": 4.0, "tau": 1.5},
            {"primitive": "pedaling", "start_s": 5.0},
            {"primitive": "stopping", "start_s": 7.0, "tau": 1.0},
        ]
        sc = build_scenario(cyclist_doc(phases))
        vru = sc.vrus[0]
        ts = np.arange(0.0, 14.0, 2e-5)
        vs = np.array([speed_profile(vru, float(t)) for t in ts])
        for t_probe in (0.5, 3.0, 6.0, 9.0, 13.0):
            n = int(round(t_probe / 2e-5)) + 1
            expected = np.trapezoid(vs[:n], ts[:n])
            st = ground_truth_at(sc, t_probe)[0]
            assert st.state.x == pytest.approx(expected, abs=1e-6)

    def test_turning_arc(self):
        phases = [
            {"primitive": "pedaling", "start_s": 0.0, "v_max": 4.0},
            {"primitive": "turning", "start_s": 1.0, "omega": math.pi / 4},
        ]
        sc = build_scenario(cyclist_doc(phases))
        st = ground_truth_at(sc, 3.0)[0]  # heading has advanced pi/2
        assert st.state.heading == pytest.approx(math.pi / 2)
        # radius v/omega = 16/pi; center of the arc is at (4, r)
        r = 4.0 / (math.pi / 4)
        assert st.state.x == pytest.approx(4.0 + r)
        assert st.state.y == pytest.approx(r)
        assert st.state.speed == pytest.approx(4.0)

    def test_heading_changes_only_while_turning(self):
        phases = [
            {"primitive": "starting", "start_s": 0.0, "v_max": 4.0, "tau": 1.5},
            {"primitive": "turning", "start_s": 4.0, "omega": 0.5},
            {"primitive": "pedaling", "start_s": 6.0},
        ]
        sc = build_scenario(cyclist_doc(phases))
        h0 = ground_truth_at(sc, 3.9)[0].state.heading
        assert h0 == 0.0
        h1 = ground_truth_at(sc, 6.0)[0].state.heading
        assert h1 == pytest.approx(1.0)
        assert ground_truth_at(sc, 9.0)[0].state.heading == pytest.approx(h1)

    def test_deterministic(self):
        sc = build_scenario(minimal_doc())
        a = ground_truth_at(sc, 4.12)[0]
        b = ground_truth_at(sc, 4.12)[0]
        assert a.state == b.state

    def test_out_of_range(self):
        sc = build_scenario(minimal_doc())
        with pytest.raises(ScenarioError):
            ground_truth_at(sc, -0.5)
        with pytest.raises(ScenarioError):
            ground_truth_at(sc, 11.0)


class TestTransitionTimes:
    def test_three_phase_plan(self):
        sc = build_scenario(cyclist_doc([
            {"primitive": "waiting", "start_s": 0.0},
            {"primitive": "starting", "start_s": 5.0, "v_max": 4.0, "tau": 1.5},
            {"primitive": "pedaling", "start_s": 8.0},
        ]))
        assert transition_times(sc, 1) == [
            (5.0, P.WAITING, P.STARTING),
            (8.0, P.STARTING, P.PEDALING),
        ]

    def test_single_phase_no_transitions(self):
        sc = build_scenario(minimal_doc())
        assert transition_times(sc, 1) == []

    def test_four_phases_three_transitions(self):
        sc = build_scenario(cyclist_doc([
            {"primitive": "waiting", "start_s": 0.0},
            {"primitive": "starting", "start_s": 2.0, "v_max": 4.0, "tau": 1.5},
            {"primitive": "pedaling", "start_s": 5.0},
            {"primitive": "stopping", "start_s": 9.0, "tau": 1.0},
        ]))
        assert len(transition_times(sc, 1)) == 3

    def test_unknown_vru(self):
        sc = build_scenario(minimal_doc())
        with pytest.raises(ScenarioError):
            transition_times(sc, 42)


class TestObstacles:
    def test_segment_blocks(self):
        ob = SegmentObstacle(5.0, -1.0, 5.0, 1.0)
        assert ob.blocks((0.0, 0.0), (10.0, 0.0))
        assert not ob.blocks((0.0, 0.0), (4.0, 0.0))

    def test_rect_blocks(self):
        ob = RectObstacle(2.0, -2.0, 4.0, 2.0)
        assert ob.blocks((0.0, 0.0), (10.0, 0.0))
        assert not ob.blocks((0.0, 3.0), (10.0, 3.0))
        assert not ob.blocks((5.0, 0.0), (10.0, 0.0))  # behind the target

    def test_conflict_time_resolution(self):
        doc = cyclist_doc([
            {"primitive": "pedaling", "start_s": 0.0, "v_max": 4.0},
        ])
        doc["conflict"] = {"point": [8.0, 0.0], "vru": 1, "radius_m": 1.0}
        sc = build_scenario(doc)
        # constant 4 m/s toward (8, 0): enters the 1 m radius at t = 7/4
        assert sc.conflict_time() == pytest.approx(1.75, abs=1e-6)
