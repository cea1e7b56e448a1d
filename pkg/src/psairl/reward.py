"""Hand-crafted ground-truth driving reward.

A vehicle is scored by how far its speed and gap are from a desired speed
and a desired gap::

    r = -[((v - v_des) / v_max)**2 + lam * ((g - g_des) / g_min)**2]

The desired speed is the speed cap while the vehicle is clear of both its
leader and a red light, and the Krauss safe speed otherwise. The desired gap
never asks for less room than the vehicle already has, so only a gap below
``g_min`` is penalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simcore import (
    DIST_TO_LIGHT,
    GAP,
    GREEN,
    HAS_EXITED,
    IS_LEADING,
    LEADER_VELOCITY,
    SPEED_LIMIT,
    VELOCITY,
    DynamicsConfig,
)


@dataclass(frozen=True)
class RewardParams:
    lam: float = 1.0
    v_max: float = 11.0
    g_min: float = 25.0

    def __post_init__(self) -> None:
        if not (self.lam > 0 and self.v_max > 0 and self.g_min > 0):
            raise ValueError("RewardParams fields must all be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RewardParams":
        return cls(lam=float(d.get("lambda", 1.0)), v_max=float(d.get("v_max", 11.0)), g_min=float(d.get("g_min", 25.0)))

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "v_max": self.v_max, "g_min": self.g_min}


def _safe_speed(v_leader, gap, b_max, tau, v_self):
    return np.maximum(0.0, v_leader + (gap - v_leader * tau) / ((v_self + v_leader) / (2.0 * b_max) + tau))


def desired_speed(obs: np.ndarray, dyn: DynamicsConfig, rp: RewardParams) -> np.ndarray | float:
    """Works on one observation or a batch ``(n, 11 + M)``."""
    obs = np.asarray(obs, dtype=float)
    v = obs[..., VELOCITY]
    g = obs[..., GAP]
    green = obs[..., GREEN] > 0.5
    top = np.minimum(rp.v_max, obs[..., SPEED_LIMIT])
    clear = (g > rp.g_min) & (green | (obs[..., DIST_TO_LIGHT] > rp.g_min))

    has_leader = obs[..., IS_LEADING] < 0.5
    vs_leader = np.where(has_leader, _safe_speed(obs[..., LEADER_VELOCITY], g, dyn.b_max, dyn.tau, v), np.inf)
    vs_light = np.where(~green, _safe_speed(0.0, obs[..., DIST_TO_LIGHT], dyn.b_max, dyn.tau, v), np.inf)
    constrained = np.minimum(vs_leader, vs_light)
    v_des = np.where(clear, top, np.clip(np.minimum(constrained, top), 0.0, rp.v_max))
    return v_des if v_des.ndim else float(v_des)


def desired_gap(obs: np.ndarray, rp: RewardParams) -> np.ndarray | float:
    g = np.asarray(obs, dtype=float)[..., GAP]
    g_des = np.maximum(g, rp.g_min)
    return g_des if g_des.ndim else float(g_des)


def handcrafted_reward(obs: np.ndarray, rp: RewardParams, dyn: DynamicsConfig) -> np.ndarray | float:
    """Reward of a state (or batch of states); exited vehicles score 0."""
    obs = np.asarray(obs, dtype=float)
    v = obs[..., VELOCITY]
    g = obs[..., GAP]
    speed_err = (v - desired_speed(obs, dyn, rp)) / rp.v_max
    gap_err = (g - desired_gap(obs, rp)) / rp.g_min
    r = -(speed_err**2 + rp.lam * gap_err**2)
    r = np.where(obs[..., HAS_EXITED] > 0.5, 0.0, r)
    return r if r.ndim else float(r)
