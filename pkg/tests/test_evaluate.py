import numpy as np
import pytest
from helpers import make_obs

from psairl import evaluate as ev
from psairl.airl import discriminator_init
from psairl.errors import EmptySet, HorizonMismatch
from psairl.reward import RewardParams, handcrafted_reward
from psairl.simcore import GAP, LEADER_POSITION, VELOCITY, DynamicsConfig, Transition, TrajectorySet

RP, DYN = RewardParams(), DynamicsConfig()


def tset(tracks, horizon=None, obs=None):
    """``tracks[vid] = [(t, route_pos, speed), ...]``."""
    o = make_obs() if obs is None else obs
    vehicles = {vid: [Transition(t, 0, p, v, v, o, o, p) for t, p, v in recs] for vid, recs in tracks.items()}
    return TrajectorySet(1, vehicles, horizon)


def with_obs(obs_per_vehicle):
    vehicles = {vid: [Transition(t, 0, 0.0, 0.0, 0.0, o, o, 0.0) for t, o in enumerate(obs)]
                for vid, obs in obs_per_vehicle.items()}
    return TrajectorySet(1, vehicles)


def test_rmse_hand_example():
    e = tset({0: [(0, 10.0, 1.0), (1, 20.0, 2.0)]})
    s = tset({0: [(0, 13.0, 1.5), (1, 24.0, 1.0)]})
    assert ev.rmse_position(e, s) == pytest.approx(3.5)
    assert ev.rmse_speed(e, s) == pytest.approx(0.75)


def test_rmse_identity_and_offsets():
    rng = np.random.default_rng(0)
    tracks = {v: [(t, rng.uniform(0, 300), rng.uniform(0, 11)) for t in range(6)] for v in range(4)}
    e = tset(tracks)
    assert ev.rmse_position(e, e) == 0.0 and ev.rmse_speed(e, e) == 0.0
    shifted = tset({v: [(t, p + 2.5, s + 1.0) for t, p, s in r] for v, r in tracks.items()})
    assert ev.rmse_position(e, shifted) == pytest.approx(2.5)
    assert ev.rmse_speed(e, shifted) == pytest.approx(1.0)


def test_rmse_two_vehicles_per_step():
    e = tset({0: [(0, 0.0, 0.0)], 1: [(0, 0.0, 0.0)]})
    s = tset({0: [(0, 3.0, 0.0)], 1: [(0, 4.0, 0.0)]})
    assert ev.rmse_position(e, s) == pytest.approx(np.sqrt(12.5))


def test_unmatched_steps_are_excluded_and_coverage_reported():
    e = tset({0: [(0, 10.0, 0.0), (1, 20.0, 0.0), (2, 30.0, 0.0)]})
    s = tset({0: [(0, 12.0, 0.0)]})  # sim vehicle left after t = 0
    d = ev.rmse_position_detail(e, s)
    assert d.rmse == pytest.approx(2.0) and d.steps == 1 and d.coverage == pytest.approx(1 / 3)


def test_relabeling_invariance():
    e = tset({0: [(0, 1.0, 1.0)], 1: [(0, 5.0, 2.0)]})
    s = tset({0: [(0, 2.0, 1.0)], 1: [(0, 8.0, 2.0)]})
    e2 = tset({7: [(0, 1.0, 1.0)], 3: [(0, 5.0, 2.0)]})
    s2 = tset({7: [(0, 2.0, 1.0)], 3: [(0, 8.0, 2.0)]})
    assert ev.rmse_position(e, s) == ev.rmse_position(e2, s2)


def test_horizon_mismatch():
    with pytest.raises(HorizonMismatch):
        ev.rmse_position(tset({0: [(0, 0.0, 0.0)]}, horizon=10), tset({0: [(0, 0.0, 0.0)]}, horizon=20))


def open_road(v):
    return make_obs(lane_length=400.0, pos=100.0, v=v)


def test_mean_reward_examples():
    assert ev.mean_reward(with_obs({0: [open_road(0.0), open_road(11.0), open_road(0.0)]}), RP, DYN) == pytest.approx(-2 / 3)
    v1, v3 = 11 * (1 - np.sqrt(0.1)), 11 * (1 - np.sqrt(0.3))
    assert ev.mean_reward(with_obs({0: [open_road(v1)], 1: [open_road(v3)]}), RP, DYN) == pytest.approx(-0.2)
    assert ev.mean_reward(with_obs({0: [open_road(11.0)] * 4}), RP, DYN) == 0.0


def test_mean_reward_is_vehicle_level():
    # vehicle 0 has three records, vehicle 1 one; each vehicle weighs the same
    sets = with_obs({0: [open_road(11.0)] * 3, 1: [open_road(0.0)]})
    assert ev.mean_reward(sets, RP, DYN) == pytest.approx(-0.5)


def test_mean_reward_empty():
    with pytest.raises(EmptySet):
        ev.mean_reward(TrajectorySet(1), RP, DYN)


def test_metrics_report_keys():
    e = tset({0: [(0, 10.0, 1.0)]}, obs=open_road(0.0))
    assert set(ev.metrics_report(e, e, RP, DYN)) == {"rmse_pos", "rmse_speed", "coverage", "mean_reward"}


def test_surface_obs_is_consistent():
    o = ev.surface_obs(ev.surface_template(2), 7.0, 30.0)
    assert o[VELOCITY] == 7.0 and o[GAP] == 30.0
    assert o[LEADER_POSITION] == 100.0 + 30.0 + 5.0


def test_handcrafted_surface_ridge():
    speeds = np.linspace(0, 11, 12)
    gaps = np.array([25.0, 40.0, 60.0])
    s = ev.reward_surface(lambda b: handcrafted_reward(b, RP, DYN), speeds, gaps, ev.surface_template(2))
    assert s.shape == (12, 3)
    # a leader moving at the same speed far enough ahead leaves the speed limit as target
    np.testing.assert_array_equal(s[-1], 0.0)
    assert np.all(np.argmax(s, axis=0) == 11)


def test_constant_scorer_gives_constant_surface():
    s = ev.reward_surface(lambda b: np.full(len(b), 1.5), [0.0, 5.0], [1.0, 2.0, 3.0], ev.surface_template(1))
    np.testing.assert_array_equal(s, np.full((2, 3), 1.5))


def test_empty_grid_rejected():
    with pytest.raises(ValueError):
        ev.reward_surface(lambda b: b[:, 0], [], [1.0], ev.surface_template(1))


def test_surface_csv_layout():
    text = ev.surface_to_csv(np.array([[1.0, 2.0]]), [3.0], [4.0, 5.0])
    assert text == "speed\\gap,4.0,5.0\n3.0,1.0,2.0\n"


def test_transfer_null_change_and_zero_iterations(corridor2):
    from psairl.policy import policy_init
    from psairl.trpo import RlConfig
    net, plan, flow = corridor2
    d = discriminator_init(2, DYN, 0)
    p = policy_init(2, DYN, 5)
    rep = ev.run_transfer(d, p, DYN, net, plan, flow, RlConfig(iterations=0, seed=5), RP, horizon=100)
    # no retraining from the same seed gives back the same initial policy
    assert rep.retrained_reward == pytest.approx(rep.transferred_reward)
    assert rep.retrain_log == [] and set(rep.to_dict()) >= {"transferred_mean_reward", "retrained_mean_reward"}
