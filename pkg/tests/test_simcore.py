import math

import numpy as np
import pytest
from helpers import make_obs, safety_violations
from hypothesis import given, settings
from hypothesis import strategies as st

from psairl import roadnet as rn
from psairl import simcore as sc
from psairl.errors import MissingAction, NonFiniteAction, UnknownVehicle


def free_lane(length=300.0):
    net, plan = rn.gen_corridor(1, length, 11.0, 30, 30)
    return net, plan


# -- Krauss rule -------------------------------------------------------------------


def test_krauss_accelerates_from_rest(dyn):
    assert sc.krauss_action(make_obs(v=0.0), dyn) == 2.0


def test_krauss_stops_behind_stopped_leader(dyn):
    assert sc.krauss_action(make_obs(v=10.0, pos=100.0, leader_v=0.0, leader_pos=105.0), dyn) == 0.0


def test_krauss_holds_speed_limit(dyn):
    assert sc.krauss_action(make_obs(v=11.0, pos=10.0), dyn) == 11.0


def test_krauss_safe_speed_formula():
    # v_l + (g - v_l * tau) / ((v + v_l) / (2b) + tau)
    assert sc.krauss_safe_speed(5.0, 20.0, 4.0, 1.0, 7.0) == pytest.approx(5.0 + 15.0 / (12.0 / 8.0 + 1.0))


def test_krauss_brakes_for_red_when_it_can(dyn):
    o = make_obs(v=8.0, pos=290.0, green=0.0)
    assert sc.krauss_action(o, dyn) < 8.0


def test_stopping_distance_matches_brute_force():
    for v in np.linspace(0, 20, 41):
        brute, u = 0.0, v
        while True:
            u = max(0.0, u - 4.0)
            if u == 0.0:
                break
            brute += u
        assert sc.stopping_distance(v, 4.0, 1.0) == pytest.approx(brute, abs=1e-9)


@given(st.floats(0.0, 200.0), st.floats(0.5, 8.0))
def test_max_stoppable_speed_is_tight(dist, b):
    u = sc.max_stoppable_speed(dist, b, 1.0)
    assert u + sc.stopping_distance(u, b, 1.0) == pytest.approx(dist, abs=1e-7)
    bigger = u + 1e-3
    assert bigger + sc.stopping_distance(bigger, b, 1.0) > dist


# -- reset / step ------------------------------------------------------------------


def test_reset_empty_flow(dyn):
    net, plan = free_lane()
    env = sc.TrafficEnv(net, plan, rn.FlowSpec(), dyn)
    assert env.reset(0) == {}
    assert env.t == 0


def test_reset_single_vehicle(dyn):
    net, plan = free_lane()
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0,), 1), dyn)
    obs = env.reset(0)
    o = obs[0]
    assert o[sc.POSITION] == 0.0 and o[sc.VELOCITY] == 0.0 and o[sc.IS_LEADING] == 1.0


def test_simultaneous_entries_are_staggered(dyn):
    net, plan = free_lane()
    flow = rn.FlowSpec((rn.VehicleEntry(0, 0, (0,)), rn.VehicleEntry(1, 0, (0,))))
    env = sc.TrafficEnv(net, plan, flow, dyn)
    assert list(env.reset(0)) == [0]
    seen = []
    for _ in range(10):
        obs, _, _ = env.step({i: 11.0 for i in env.active_ids})
        seen.append(sorted(obs))
        if 1 in obs:
            assert obs[1][sc.GAP] >= 0.0
            break
    assert any(1 in s for s in seen)


def test_action_equal_to_speed_advances_exactly(dyn):
    net, plan = free_lane()
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0,), 1), dyn)
    env.reset(0)
    for a in (2.0, 4.0, 6.0):
        env.step({0: a})
    pos, v = env.vehicles[0].position, env.vehicles[0].speed
    env.step({0: v})
    assert env.vehicles[0].position == pytest.approx(pos + v)


def test_acceleration_clamp(dyn):
    net, plan = free_lane()
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0,), 1), dyn)
    env.reset(0)
    obs, _, _ = env.step({0: 11.0})
    assert obs[0][sc.VELOCITY] == 2.0


def test_red_halt_at_stop_line(dyn):
    net, plan = rn.gen_corridor(2, 100.0, 11.0, 10, 1000)
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0, 1), 1), dyn)
    obs = env.reset(0)
    for _ in range(60):
        obs, _, _ = env.step({0: sc.krauss_action(obs[0], dyn)})
    veh = env.vehicles[0]
    assert veh.lane_id == 0 and veh.position == pytest.approx(100.0, abs=1e-6) and veh.speed == 0.0
    obs, _, _ = env.step({0: 5.0})
    assert obs[0][sc.VELOCITY] == 0.0 and env.vehicles[0].position == pytest.approx(100.0, abs=1e-6)


def test_full_throttle_never_runs_a_stoppable_red(dyn):
    net, plan = rn.gen_corridor(2, 100.0, 11.0, 10, 1000)
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0, 1), 1), dyn)
    env.reset(0)
    for _ in range(40):
        env.step({0: 11.0})
    assert env.vehicles[0].lane_id == 0


def test_exit_marks_final_observation(dyn):
    net, plan = free_lane(30.0)
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0,), 1), dyn)
    env.reset(0)
    for _ in range(20):
        obs, done, _ = env.step({i: 11.0 for i in env.active_ids})
        if done.get(0):
            assert obs[0][sc.HAS_EXITED] == 1.0
            break
    assert env.finished


def test_missing_and_nonfinite_actions(dyn):
    net, plan = free_lane()
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0,), 1), dyn)
    env.reset(0)
    with pytest.raises(MissingAction):
        env.step({})
    with pytest.raises(NonFiniteAction):
        env.step({0: math.nan})


def test_observe_unknown_vehicle(dyn):
    net, plan = free_lane()
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0,), 1), dyn)
    env.reset(0)
    with pytest.raises(UnknownVehicle):
        env.observe(3)


# -- observations ------------------------------------------------------------------


def test_single_vehicle_mid_lane_observation(dyn):
    net, plan = free_lane()
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0,), 1), dyn)
    env.reset(0)
    for _ in range(5):
        env.step({0: 11.0})
    o = env.observe(0)
    assert o[sc.IS_LEADING] == 1.0
    assert o[sc.GAP] == pytest.approx(300.0 - o[sc.POSITION])
    assert o[sc.LEADER_POSITION] == 300.0 and o[sc.LEADER_VELOCITY] == 0.0


def test_follower_bumper_gap(dyn):
    net, plan = free_lane()
    env = sc.TrafficEnv(net, plan, rn.FlowSpec((rn.VehicleEntry(0, 0, (0,)), rn.VehicleEntry(1, 3, (0,)))), dyn)
    env.reset(0)
    while 1 not in env.active_ids:
        env.step({i: 2.0 * (env.t + 1) for i in env.active_ids})
    o0, o1 = env.observe(0), env.observe(1)
    assert o1[sc.IS_LEADING] == 0.0
    assert o1[sc.GAP] == pytest.approx(o0[sc.POSITION] - o1[sc.POSITION] - 5.0)


def test_observation_length():
    net, plan = rn.gen_corridor(4, 100.0, 11.0, 10, 10)
    env = sc.TrafficEnv(net, plan, rn.gen_flow(1, (0, 1, 2, 3), 1), sc.DynamicsConfig())
    assert env.reset(0)[0].shape == (15,)
    assert sc.obs_dim(4) == 15


def test_feature_scale_layout():
    s = sc.feature_scale(2, 11.0)
    assert s.shape == (13,)
    assert s[sc.LANE_LENGTH] == 1000.0 and s[sc.VELOCITY] == 11.0 and s[sc.GAP] == 100.0


# -- rollouts --------------------------------------------------------------------------


def test_free_lane_speed_profile(dyn):
    net, plan = free_lane()
    trajs = sc.simulate_policy(net, plan, rn.gen_flow(1, (0,), 1), dyn, sc.KraussPolicy(dyn), 40)
    speeds = [tr.next_obs[sc.VELOCITY] for tr in trajs.vehicles[0]]
    assert speeds[:7] == [2.0, 4.0, 6.0, 8.0, 10.0, 11.0, 11.0]


def test_simulate_empty_flow(dyn):
    net, plan = free_lane()
    assert len(sc.simulate_policy(net, plan, rn.FlowSpec(), dyn, sc.KraussPolicy(dyn), 10)) == 0


def test_simulate_is_deterministic(corridor2, dyn):
    net, plan, flow = corridor2
    a = sc.simulate_policy(net, plan, flow, dyn, sc.KraussPolicy(dyn), 150)
    b = sc.simulate_policy(net, plan, flow, dyn, sc.KraussPolicy(dyn), 150)
    assert a.to_jsonl() == b.to_jsonl()


def test_replay_reproduces_positions(corridor2, dyn):
    net, plan, flow = corridor2
    a = sc.simulate_policy(net, plan, flow, dyn, sc.KraussPolicy(dyn), 150)
    b = sc.replay(net, plan, flow, dyn, a)
    assert a.snapshots() == b.snapshots()


def test_realized_record_replays_too(corridor2, dyn):
    net, plan, flow = corridor2
    rng = np.random.default_rng(3)
    noisy = sc.simulate_policy(net, plan, flow, dyn, lambda o, r: rng.uniform(0, 11, len(o)), 150, record="realized")
    again = sc.replay(net, plan, flow, dyn, noisy).snapshots()
    # realized speeds are displacements over dt, so only round-off separates the two
    for t, snap in noisy.snapshots().items():
        assert again[t].keys() == snap.keys()
        for vid, (p, v) in snap.items():
            assert again[t][vid] == pytest.approx((p, v), abs=1e-9)


def test_jsonl_round_trip(corridor2, dyn):
    net, plan, flow = corridor2
    a = sc.simulate_policy(net, plan, flow, dyn, sc.KraussPolicy(dyn), 120)
    b = sc.TrajectorySet.from_jsonl(a.to_jsonl(), horizon=a.horizon)
    assert b.to_jsonl() == a.to_jsonl()
    assert b.snapshots() == a.snapshots()


def test_route_positions_are_continuous(corridor2, dyn):
    net, plan, flow = corridor2
    trajs = sc.simulate_policy(net, plan, flow, dyn, sc.KraussPolicy(dyn), 200)
    for recs in trajs.vehicles.values():
        rp = [tr.route_pos for tr in recs]
        assert all(b >= a - 1e-9 for a, b in zip(rp, rp[1:]))
        assert all(b - a <= 11.0 + 1e-9 for a, b in zip(rp, rp[1:]))


@settings(max_examples=15, deadline=None)
@given(
    n_lanes=st.integers(1, 3),
    n_veh=st.integers(1, 15),
    headway=st.integers(1, 8),
    green=st.integers(5, 40),
    red=st.integers(5, 40),
    seed=st.integers(0, 10_000),
)
def test_random_policies_never_overlap(n_lanes, n_veh, headway, green, red, seed):
    # arbitrary requests may force a guarded halt harder than b_max, but never a collision
    dyn = sc.DynamicsConfig()
    net, plan = rn.gen_corridor(n_lanes, 120.0, 11.0, green, red)
    flow = rn.gen_flow(n_veh, tuple(range(n_lanes)), headway)
    rng = np.random.default_rng(seed)
    overlaps, _ = safety_violations(
        net, plan, flow, dyn, 150, lambda env, obs: {i: float(rng.uniform(0, 15)) for i in env.active_ids}
    )
    assert overlaps == 0


@settings(max_examples=15, deadline=None)
@given(
    n_lanes=st.integers(1, 3),
    n_veh=st.integers(1, 15),
    headway=st.integers(1, 8),
    green=st.integers(5, 40),
    red=st.integers(5, 40),
)
def test_krauss_is_safe_and_feasible(n_lanes, n_veh, headway, green, red):
    dyn = sc.DynamicsConfig()
    net, plan = rn.gen_corridor(n_lanes, 120.0, 11.0, green, red)
    flow = rn.gen_flow(n_veh, tuple(range(n_lanes)), headway)
    overlaps, jumps = safety_violations(
        net, plan, flow, dyn, 200, lambda env, obs: {i: sc.krauss_action(obs[i], dyn) for i in env.active_ids}
    )
    assert overlaps == 0 and jumps == 0
