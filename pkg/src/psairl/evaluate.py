"""Trajectory metrics, reward surfaces and the dynamics-transfer experiment."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import EmptySet, HorizonMismatch
from .policy import BetaPolicy, PolicyParams
from .reward import RewardParams, handcrafted_reward
from .simcore import (
    DIST_TO_LIGHT,
    GAP,
    GREEN,
    IS_LEADING,
    LANE_LENGTH,
    LEADER_POSITION,
    LEADER_VELOCITY,
    POSITION,
    SPEED_LIMIT,
    VELOCITY,
    DynamicsConfig,
    TrajectorySet,
    simulate_policy,
)
from .airl import absorbing_next, state_reward
from .trpo import RlConfig, train_policy_rl


@dataclass(frozen=True)
class RmseResult:
    rmse: float
    coverage: float  # fraction of expert (vehicle, t) records matched in the other set
    steps: int  # timesteps with at least one matched vehicle


def _rmse(expert: TrajectorySet, sim: TrajectorySet, which: int) -> RmseResult:
    if expert.horizon is not None and sim.horizon is not None and expert.horizon != sim.horizon:
        raise HorizonMismatch(f"horizons differ: expert {expert.horizon} vs sim {sim.horizon}")
    e_snap, s_snap = expert.snapshots(), sim.snapshots()
    total = sum(len(v) for v in e_snap.values())
    per_step, matched = [], 0
    for t in sorted(e_snap):
        ev, sv = e_snap[t], s_snap.get(t, {})
        common = [j for j in ev if j in sv]
        if not common:
            continue
        matched += len(common)
        err = np.array([ev[j][which] - sv[j][which] for j in common])
        per_step.append(np.sqrt(np.mean(err**2)))
    rmse = float(np.mean(per_step)) if per_step else 0.0
    return RmseResult(rmse, matched / total if total else 0.0, len(per_step))


def rmse_position_detail(expert: TrajectorySet, sim: TrajectorySet) -> RmseResult:
    return _rmse(expert, sim, 0)


def rmse_speed_detail(expert: TrajectorySet, sim: TrajectorySet) -> RmseResult:
    return _rmse(expert, sim, 1)


def rmse_position(expert: TrajectorySet, sim: TrajectorySet) -> float:
    """Time-averaged per-step RMSE of route-cumulative positions (meters).

    Only vehicles present in both sets at a step are compared; steps with no
    such vehicle are left out of the average.
    """
    return rmse_position_detail(expert, sim).rmse


def rmse_speed(expert: TrajectorySet, sim: TrajectorySet) -> float:
    return rmse_speed_detail(expert, sim).rmse


def mean_reward(trajs: TrajectorySet, rp: RewardParams, dyn: DynamicsConfig) -> float:
    """Per-vehicle average of the hand-crafted reward, then averaged over vehicles."""
    means = []
    for recs in trajs.vehicles.values():
        if recs:
            obs = np.array([tr.obs for tr in recs])
            means.append(float(np.mean(handcrafted_reward(obs, rp, dyn))))
    if not means:
        raise EmptySet("mean_reward: no transitions")
    return float(np.mean(means))


def metrics_report(expert: TrajectorySet, sim: TrajectorySet, rp: RewardParams, dyn: DynamicsConfig) -> dict:
    pos = rmse_position_detail(expert, sim)
    return {
        "rmse_pos": pos.rmse,
        "rmse_speed": rmse_speed(expert, sim),
        "coverage": pos.coverage,
        "mean_reward": mean_reward(sim, rp, dyn),
    }


# -- reward surfaces ---------------------------------------------------------------


def surface_template(n_lanes: int, lane_length: float = 500.0, speed_limit: float = 11.0,
                     position: float = 100.0, green: bool = True) -> np.ndarray:
    """A mid-lane observation on lane 0 with a green light, used as the default state."""
    obs = np.zeros(11 + n_lanes)
    obs[0] = 1.0
    obs[LANE_LENGTH] = lane_length
    obs[SPEED_LIMIT] = speed_limit
    obs[GREEN] = 1.0 if green else 0.0
    obs[POSITION] = position
    obs[DIST_TO_LIGHT] = lane_length - position
    return obs


def surface_obs(template: np.ndarray, speed: float, gap: float, vehicle_length: float = 5.0) -> np.ndarray:
    """Template with the given speed and a leader ``gap`` meters ahead, moving at the same speed."""
    o = np.array(template, dtype=float)
    o[VELOCITY] = speed
    o[GAP] = gap
    o[LEADER_POSITION] = o[POSITION] + gap + vehicle_length
    o[LEADER_VELOCITY] = speed
    o[IS_LEADING] = 0.0
    return o


def reward_surface(score: Callable[[np.ndarray], np.ndarray], speeds: Sequence[float], gaps: Sequence[float],
                   template_obs: np.ndarray) -> np.ndarray:
    """``out[i, j] = score(state with speed speeds[i] and gap gaps[j])``; ``score`` takes a batch."""
    speeds, gaps = list(speeds), list(gaps)
    if not speeds or not gaps:
        raise ValueError("reward_surface: grids must be nonempty")
    batch = np.array([surface_obs(template_obs, v, g) for v in speeds for g in gaps])
    vals = np.asarray(score(batch), dtype=float).reshape(len(speeds), len(gaps))
    return vals


def surface_to_csv(surface: np.ndarray, speeds: Sequence[float], gaps: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["speed\\gap", *[repr(float(g)) for g in gaps]])
    for v, row in zip(speeds, surface):
        w.writerow([repr(float(v)), *[repr(float(x)) for x in row]])
    return buf.getvalue()


# -- dynamics transfer --------------------------------------------------------------


@dataclass
class TransferReport:
    transferred_reward: float
    retrained_reward: float
    new_dynamics: dict
    retrain_log: list[dict]

    def to_dict(self) -> dict:
        return {"transferred_mean_reward": self.transferred_reward, "retrained_mean_reward": self.retrained_reward,
                "new_dynamics": self.new_dynamics, "retrain_log": self.retrain_log}


def learned_reward_fn(disc):
    """Per-transition reward ``r(s')`` from a trained discriminator's state-only net.

    An exit is absorbing, so its transition is scored at the last on-road state.
    """
    return lambda buf: state_reward(disc, absorbing_next(buf.obs, buf.next_obs))


def run_transfer(disc, old_policy: PolicyParams, new_dyn: DynamicsConfig, network, plan, flow,
                 rl_config: RlConfig, rp: RewardParams | None = None, horizon: int = 200,
                 action_mode: str = "mode", warm_start: bool = False) -> TransferReport:
    """Score the old policy in ``new_dyn`` against one re-optimized on the frozen learned reward.

    Re-optimization uses no demonstrations: TRPO on ``r(s)`` alone, from a
    fresh initialization unless ``warm_start`` is set.
    """
    rp = rp if rp is not None else RewardParams()
    old_in_new = PolicyParams(old_policy.actor, old_policy.critic, old_policy.scale, new_dyn.v_cap)
    direct = simulate_policy(network, plan, flow, new_dyn, BetaPolicy(old_in_new, action_mode), horizon)
    fresh, log = train_policy_rl(network, plan, flow, new_dyn, learned_reward_fn(disc), rl_config,
                                 init=old_in_new if warm_start else None)
    retrained = simulate_policy(network, plan, flow, new_dyn, BetaPolicy(fresh, action_mode), horizon)
    return TransferReport(mean_reward(direct, rp, new_dyn), mean_reward(retrained, rp, new_dyn),
                          {"a_max": new_dyn.a_max, "b_max": new_dyn.b_max, "v_cap": new_dyn.v_cap}, log)
