"""Trust-region policy optimization over experience pooled from all vehicles.

One update maximizes the importance-weighted advantage surrogate subject to
a mean-KL trust region: the natural-gradient direction comes from conjugate
gradient on Fisher-vector products, is scaled to the KL radius and then
halved until the surrogate improves inside the region. The critic is fit to
the GAE returns afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import policy as pol
from .errors import DimensionMismatch, EmptyBuffer, NonFinite, NonFiniteLoss
from .nn import make_optimizer
from .policy import PolicyParams
from .simcore import TrafficEnv


@dataclass
class RolloutBuffer:
    """Flattened per-(vehicle, t) records, each vehicle's segment contiguous and time ordered.

    ``terminal`` marks transitions whose next state is an exit (no bootstrap);
    ``seg_end`` marks the last record of a segment (exit or truncation).
    """

    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    seg_end: np.ndarray
    values: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, mask: np.ndarray) -> "RolloutBuffer":
        """Records selected by ``mask``; callers keep segments whole."""
        kw = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            kw[name] = None if val is None else val[mask]
        return RolloutBuffer(**kw)

    @classmethod
    def concat(cls, parts: list["RolloutBuffer"]) -> "RolloutBuffer":
        kw = {}
        for name in cls.__dataclass_fields__:
            vals = [getattr(p, name) for p in parts]
            kw[name] = None if any(v is None for v in vals) else np.concatenate(vals)
        return cls(**kw)


def compute_advantages(buf: RolloutBuffer, params: PolicyParams, gamma: float = 0.99, lam: float = 0.95,
                       normalize: bool = True) -> RolloutBuffer:
    """GAE within each segment; returns ``A + V`` and (optionally) normalized advantages."""
    n = len(buf)
    if n == 0:
        raise EmptyBuffer("compute_advantages: empty buffer")
    values = np.asarray(pol.critic_value(params, buf.obs), dtype=float).reshape(n)
    next_values = np.asarray(pol.critic_value(params, buf.next_obs), dtype=float).reshape(n)
    next_values = np.where(buf.terminal, 0.0, next_values)
    deltas = buf.rewards + gamma * next_values - values
    adv = np.zeros(n)
    running = 0.0
    for i in range(n - 1, -1, -1):
        if buf.seg_end[i]:
            running = 0.0
        running = deltas[i] + gamma * lam * running
        adv[i] = running
    returns = adv + values
    if not np.all(np.isfinite(adv)):
        raise NonFiniteLoss("non-finite advantages")
    if normalize:
        std = adv.std()
        if std >= 1e-8:
            adv = (adv - adv.mean()) / std
    return replace(buf, values=values, advantages=adv, returns=returns)


def surrogate_and_grad(params: PolicyParams, buf: RolloutBuffer) -> tuple[float, np.ndarray]:
    """Mean ``exp(logp - logp_old) * A`` and its gradient in the actor parameters."""
    alpha, beta, hi = pol.actor_dist(params, buf.obs)
    lp = pol.log_prob(alpha, beta, hi, buf.actions)
    ratio = np.exp(lp - buf.logp_old)
    n = len(buf)
    L = float(np.mean(ratio * buf.advantages))
    _, g = pol.logp_and_grad(params, buf.obs, buf.actions, ratio * buf.advantages / n)
    return L, g


def surrogate(params: PolicyParams, buf: RolloutBuffer) -> float:
    alpha, beta, hi = pol.actor_dist(params, buf.obs)
    lp = pol.log_prob(alpha, beta, hi, buf.actions)
    return float(np.mean(np.exp(lp - buf.logp_old) * buf.advantages))


def fisher_vector_product(params: PolicyParams, buf: RolloutBuffer, v: np.ndarray, damping: float = 0.1) -> np.ndarray:
    if v.shape != params.actor.flat.shape:
        raise DimensionMismatch(f"vector shape {v.shape} vs actor params {params.actor.flat.shape}")
    return pol.fisher_vector_product(params, buf.obs, v, damping)


def conjugate_gradient(Avp: Callable[[np.ndarray], np.ndarray], b: np.ndarray, iters: int = 10,
                       tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b, dtype=float)
    r = np.array(b, dtype=float)
    p = r.copy()
    rr = float(r @ r)
    for _ in range(iters):
        if np.sqrt(rr) <= tol:
            break
        Ap = Avp(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise NonFinite(f"conjugate gradient breakdown (p^T A p = {pAp})")
        step = rr / pAp
        x += step * p
        r -= step * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class TrpoInfo:
    accepted: bool
    kl: float = 0.0
    surrogate_old: float = 0.0
    surrogate_new: float = 0.0
    step_frac: float = 0.0
    critic_loss: float = float("nan")
    extra: dict = field(default_factory=dict)


def trpo_step(params: PolicyParams, buf: RolloutBuffer, delta: float = 0.01, cg_iters: int = 10,
              damping: float = 0.1, backtracks: int = 10) -> tuple[PolicyParams, TrpoInfo]:
    """Actor update only; returns the old parameters when no scaled step is acceptable."""
    L_old, g = surrogate_and_grad(params, buf)
    if not np.isfinite(L_old) or not np.all(np.isfinite(g)):
        raise NonFiniteLoss("non-finite surrogate or gradient")
    if not np.any(g):
        return params, TrpoInfo(False, 0.0, L_old, L_old)
    x = conjugate_gradient(lambda v: fisher_vector_product(params, buf, v, damping), g, cg_iters)
    xHx = float(x @ fisher_vector_product(params, buf, x, damping))
    if not xHx > 0:
        return params, TrpoInfo(False, 0.0, L_old, L_old)
    full = np.sqrt(2.0 * delta / xHx) * x
    frac = 1.0
    for _ in range(backtracks):
        cand = params.with_actor(params.actor.with_flat(params.actor.flat + frac * full))
        L_new = surrogate(cand, buf)
        kl = pol.kl_policy(params, cand, buf.obs)
        if np.isfinite(L_new) and L_new > L_old and kl <= 1.5 * delta:
            return cand, TrpoInfo(True, kl, L_old, L_new, frac)
        frac *= 0.5
    return params, TrpoInfo(False, 0.0, L_old, L_old)


def fit_critic(params: PolicyParams, buf: RolloutBuffer, epochs: int = 10, batch_size: int = 64,
               rng: np.random.Generator | None = None, optimizer=None, lr: float = 1e-3) -> tuple[PolicyParams, float]:
    """Minibatch regression of V(s) onto the buffer's returns."""
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = optimizer if optimizer is not None else make_optimizer("adam", params.critic.size, lr)
    critic_params = params
    loss = float("nan")
    n = len(buf)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grad = pol.critic_loss_and_grad(critic_params, buf.obs[idx], buf.returns[idx])
            critic_params = critic_params.with_critic(opt.step(critic_params.critic, grad))
    return critic_params, loss


def trpo_update(params: PolicyParams, buf: RolloutBuffer, delta: float = 0.01, cg_iters: int = 10,
                damping: float = 0.1, backtracks: int = 10, critic_epochs: int = 10, batch_size: int = 64,
                rng: np.random.Generator | None = None, critic_optimizer=None) -> tuple[PolicyParams, TrpoInfo]:
    """One trust-region actor step followed by ``critic_epochs`` of critic regression."""
    if buf.advantages is None:
        raise ValueError("trpo_update: compute advantages first")
    new, info = trpo_step(params, buf, delta, cg_iters, damping, backtracks)
    if critic_epochs > 0:
        new, info.critic_loss = fit_critic(new, buf, critic_epochs, batch_size, rng, critic_optimizer)
    return new, info


# -- rollout collection ---------------------------------------------------------


class RolloutCollector:
    """Persistent environment that hands out fixed-length chunks of shared-policy experience.

    The episode continues across calls and restarts after ``horizon`` steps
    or once every scheduled vehicle has left. Segments cut by a chunk
    boundary or the horizon are truncations and get bootstrapped; exits are
    terminal.
    """

    def __init__(self, network, plan, flow, dyn, horizon: int, seed: int = 0):
        self.env = TrafficEnv(network, plan, flow, dyn)
        self.horizon = horizon
        self.seed = seed
        self.episodes = 0
        self.obs = self.env.reset(seed)

    def _restart(self) -> None:
        self.episodes += 1
        self.obs = self.env.reset(self.seed + self.episodes)

    def collect(self, params: PolicyParams, n_steps: int, rng: np.random.Generator) -> RolloutBuffer:
        segs: dict[tuple[int, int], dict[str, list]] = {}
        order: list[tuple[int, int]] = []
        closed: set[tuple[int, int]] = set()
        for _ in range(n_steps):
            if self.env.t >= self.horizon or self.env.finished:
                self._restart()
            ids = list(self.obs)
            if ids:
                ob = np.array([self.obs[i] for i in ids])
                alpha, beta, hi = pol.actor_dist(params, ob)
                acts = pol.sample_action(alpha, beta, hi, rng)
                lps = pol.log_prob(alpha, beta, hi, acts)
            else:
                ob, acts, lps = np.zeros((0, 0)), np.zeros(0), np.zeros(0)
            next_obs, done, _ = self.env.step(dict(zip(ids, acts.tolist())))
            for k, i in enumerate(ids):
                key = (self.episodes, i)
                if key not in segs:
                    segs[key] = {"obs": [], "act": [], "lp": [], "nobs": [], "term": []}
                    order.append(key)
                s = segs[key]
                s["obs"].append(ob[k])
                s["act"].append(acts[k])
                s["lp"].append(lps[k])
                s["nobs"].append(next_obs[i])
                s["term"].append(bool(done[i]))
                if done[i]:
                    closed.add(key)
            self.obs = {i: o for i, o in next_obs.items() if not done[i]}
        parts = []
        for key in order:
            s = segs[key]
            m = len(s["act"])
            seg_end = np.zeros(m, dtype=bool)
            seg_end[-1] = True
            parts.append(
                RolloutBuffer(
                    obs=np.array(s["obs"]), actions=np.array(s["act"]), logp_old=np.array(s["lp"]),
                    rewards=np.zeros(m), next_obs=np.array(s["nobs"]), terminal=np.array(s["term"]),
                    seg_end=seg_end,
                )
            )
        if not parts:
            raise EmptyBuffer("rollout produced no transitions (no active vehicles)")
        return RolloutBuffer.concat(parts)


@dataclass
class RlConfig:
    iterations: int = 200
    update_period: int = 50
    horizon: int = 200
    gamma: float = 0.99
    lam: float = 0.95
    delta: float = 0.01
    cg_iters: int = 10
    damping: float = 0.1
    backtracks: int = 10
    critic_epochs: int = 10
    batch_size: int = 64
    critic_lr: float = 1e-3
    seed: int = 0


def train_policy_rl(network, plan, flow, dyn, reward_fn: Callable[[RolloutBuffer], np.ndarray],
                    config: RlConfig, init: PolicyParams | None = None,
                    callback: Callable[[int, PolicyParams, dict], None] | None = None):
    """TRPO on a fixed reward ``reward_fn(buffer) -> rewards``; no demonstrations involved."""
    rng = np.random.default_rng(config.seed)
    params = init if init is not None else pol.policy_init(network.n_lanes, dyn, config.seed)
    collector = RolloutCollector(network, plan, flow, dyn, config.horizon, config.seed)
    critic_opt = make_optimizer("adam", params.critic.size, config.critic_lr)
    log = []
    for it in range(config.iterations):
        buf = collector.collect(params, config.update_period, rng)
        buf.rewards = np.asarray(reward_fn(buf), dtype=float)
        if not np.all(np.isfinite(buf.rewards)):
            raise NonFiniteLoss(f"non-finite reward at iteration {it}", it)
        buf = compute_advantages(buf, params, config.gamma, config.lam)
        params, info = trpo_update(params, buf, config.delta, config.cg_iters, config.damping, config.backtracks,
                                   config.critic_epochs, config.batch_size, rng, critic_opt)
        row = {"iter": it, "mean_reward": float(buf.rewards.mean()), "kl_step": info.kl,
               "accepted": info.accepted, "critic_loss": info.critic_loss}
        log.append(row)
        if callback is not None:
            callback(it, params, row)
    return params, log
