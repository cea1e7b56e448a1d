"""Parameter-shared Beta actor and value critic.

The actor maps a normalized observation to two raw outputs ``z``; the Beta
shapes are ``softplus(z) + 1`` so the density stays bounded. Actions are
speeds ``a = hi * x`` with ``x ~ Beta(alpha, beta)`` and ``hi`` the lane's
speed cap. One :class:`PolicyParams` drives every vehicle.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import betaln, digamma, expit, polygamma

from .errors import OutOfSupport
from .nn import MlpParams, mlp_backward, mlp_forward, mlp_init, mlp_jvp
from .simcore import SPEED_LIMIT, DynamicsConfig, feature_scale, obs_dim

ENDPOINT_EPS = 1e-6


@dataclass(frozen=True)
class PolicyParams:
    actor: MlpParams
    critic: MlpParams
    scale: np.ndarray
    v_cap: float

    def with_actor(self, actor: MlpParams) -> "PolicyParams":
        return replace(self, actor=actor)

    def with_critic(self, critic: MlpParams) -> "PolicyParams":
        return replace(self, critic=critic)

    def inputs(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(obs, dtype=float) / self.scale

    def to_dict(self) -> dict:
        return {"actor": self.actor.to_dict(), "critic": self.critic.to_dict(),
                "feature_scale": self.scale.tolist(), "v_cap": self.v_cap}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        return cls(MlpParams.from_dict(d["actor"]), MlpParams.from_dict(d["critic"]),
                   np.array(d["feature_scale"], dtype=float), float(d["v_cap"]))


def policy_init(n_lanes: int, dyn: DynamicsConfig, seed: int) -> PolicyParams:
    d = obs_dim(n_lanes)
    return PolicyParams(
        actor=mlp_init(d, 2, seed),
        critic=mlp_init(d, 1, seed + 1),
        scale=feature_scale(n_lanes, dyn.v_cap),
        v_cap=dyn.v_cap,
    )


def softplus(z):
    return np.logaddexp(0.0, z)


def action_bound(p: PolicyParams, obs: np.ndarray) -> np.ndarray:
    return np.minimum(np.asarray(obs, dtype=float)[..., SPEED_LIMIT], p.v_cap)


def actor_dist(p: PolicyParams, obs: np.ndarray):
    """``(alpha, beta, hi)`` for one observation or a batch."""
    z, _ = mlp_forward(p.actor, p.inputs(obs))
    alpha = softplus(z[..., 0]) + 1.0
    beta = softplus(z[..., 1]) + 1.0
    return alpha, beta, action_bound(p, obs)


def sample_action(alpha, beta, hi, rng: np.random.Generator):
    return hi * rng.beta(alpha, beta)


def _unit(a, hi):
    a = np.asarray(a, dtype=float)
    hi = np.asarray(hi, dtype=float)
    tol = 1e-9 * np.maximum(hi, 1.0)
    if np.any(a < -tol) or np.any(a > hi + tol):
        raise OutOfSupport(f"action outside [0, hi]: {a!r} vs hi={hi!r}")
    eps = ENDPOINT_EPS * hi
    return np.clip(a, eps, hi - eps) / hi


def log_prob(alpha, beta, hi, a):
    """Log density of speed ``a``; endpoint actions are nudged inward by ``1e-6 * hi``."""
    x = _unit(a, hi)
    return (alpha - 1.0) * np.log(x) + (beta - 1.0) * np.log1p(-x) - betaln(alpha, beta) - np.log(hi)


def log_prob_shape_grad(alpha, beta, hi, a):
    """Partial derivatives of :func:`log_prob` in ``alpha`` and ``beta``."""
    x = _unit(a, hi)
    common = digamma(alpha + beta)
    return np.log(x) - digamma(alpha) + common, np.log1p(-x) - digamma(beta) + common


def kl_beta(a1, b1, a2, b2):
    """Closed-form KL(Beta(a1, b1) || Beta(a2, b2))."""
    return (
        betaln(a2, b2) - betaln(a1, b1)
        + (a1 - a2) * digamma(a1) + (b1 - b2) * digamma(b1)
        + (a2 - a1 + b2 - b1) * digamma(a1 + b1)
    )


def kl_policy(p_old: PolicyParams, p_new: PolicyParams, obs: np.ndarray) -> float:
    a1, b1, _ = actor_dist(p_old, obs)
    a2, b2, _ = actor_dist(p_new, obs)
    return float(np.mean(kl_beta(a1, b1, a2, b2)))


def entropy(alpha, beta, hi):
    """Differential entropy of the scaled Beta (includes ``log hi``)."""
    return (
        betaln(alpha, beta) - (alpha - 1) * digamma(alpha) - (beta - 1) * digamma(beta)
        + (alpha + beta - 2) * digamma(alpha + beta) + np.log(hi)
    )


def critic_value(p: PolicyParams, obs: np.ndarray):
    v, _ = mlp_forward(p.critic, p.inputs(obs))
    return v[..., 0]


# -- gradients ---------------------------------------------------------------


def logp_and_grad(p: PolicyParams, obs: np.ndarray, actions: np.ndarray, weights: np.ndarray):
    """Log-probabilities and the actor gradient of ``sum(weights * logp)``."""
    obs = np.atleast_2d(obs)
    z, cache = mlp_forward(p.actor, p.inputs(obs))
    alpha = softplus(z[:, 0]) + 1.0
    beta = softplus(z[:, 1]) + 1.0
    hi = action_bound(p, obs)
    lp = log_prob(alpha, beta, hi, actions)
    ga, gb = log_prob_shape_grad(alpha, beta, hi, actions)
    dz = np.stack([weights * ga * expit(z[:, 0]), weights * gb * expit(z[:, 1])], axis=1)
    _, grad = mlp_backward(p.actor, cache, dz)
    return lp, grad


def fisher_vector_product(p: PolicyParams, obs: np.ndarray, v: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Hessian of mean KL(pi_p || pi_psi) at psi = p, applied to ``v``.

    At the expansion point the KL gradient vanishes, so the Hessian reduces
    to ``J^T F J`` with ``J`` the Jacobian of the raw actor outputs and ``F``
    the Beta Fisher information expressed in those outputs. ``Jv`` is a
    forward-mode pass and ``J^T u`` a backward pass through the actor.
    """
    obs = np.atleast_2d(obs)
    z, cache = mlp_forward(p.actor, p.inputs(obs))
    s1, s2 = expit(z[:, 0]), expit(z[:, 1])
    alpha = softplus(z[:, 0]) + 1.0
    beta = softplus(z[:, 1]) + 1.0
    t_ab = polygamma(1, alpha + beta)
    f11 = polygamma(1, alpha) - t_ab
    f22 = polygamma(1, beta) - t_ab
    f12 = -t_ab
    jv = mlp_jvp(p.actor, cache, v)
    u1 = s1 * jv[:, 0]
    u2 = s2 * jv[:, 1]
    n = obs.shape[0]
    dz = np.stack([s1 * (f11 * u1 + f12 * u2), s2 * (f12 * u1 + f22 * u2)], axis=1) / n
    _, hv = mlp_backward(p.actor, cache, dz)
    return hv + damping * v


def critic_loss_and_grad(p: PolicyParams, obs: np.ndarray, targets: np.ndarray):
    """Mean of ``0.5 * (V(s) - target)**2`` and its critic gradient."""
    obs = np.atleast_2d(obs)
    v, cache = mlp_forward(p.critic, p.inputs(obs))
    err = v[:, 0] - targets
    _, grad = mlp_backward(p.critic, cache, (err / len(err))[:, None])
    return float(0.5 * np.mean(err**2)), grad


# -- policies as batch samplers ------------------------------------------------


class BetaPolicy:
    """Shared actor as a batch policy for :func:`~psairl.simcore.simulate_policy`.

    ``mode`` is ``"sample"``, ``"mean"`` or ``"mode"`` (the density peak).
    """

    def __init__(self, params: PolicyParams, mode: str = "sample"):
        if mode not in ("sample", "mean", "mode"):
            raise ValueError(f"unknown action mode {mode!r}")
        self.params = params
        self.mode = mode

    def __call__(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        alpha, beta, hi = actor_dist(self.params, obs)
        if self.mode == "sample":
            return sample_action(alpha, beta, hi, rng)
        if self.mode == "mean":
            return hi * alpha / (alpha + beta)
        denom = alpha + beta - 2.0
        x = np.where(denom > 1e-12, (alpha - 1.0) / np.where(denom > 1e-12, denom, 1.0), 0.5)
        return hi * x
