"""Adversarial inverse RL with a state-only reward and a potential-shaping term.

The discriminator logit is ``f(s, a, s') - log pi(a|s)`` with
``f = r(s) + gamma * h(s') - h(s)``. Because ``r`` sees only the state, it
can be pulled out after training and reused as a reward under different
vehicle dynamics.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from . import policy as pol
from .errors import EmptyClass, NonFiniteLoss
from .nn import MlpParams, make_optimizer, mlp_backward, mlp_forward, mlp_init
from .policy import PolicyParams
from .reward import RewardParams, handcrafted_reward
from .simcore import HAS_EXITED, DynamicsConfig, TrajectorySet, feature_scale, obs_dim
from .trpo import RolloutBuffer, RolloutCollector, compute_advantages, trpo_update

LOG_COLUMNS = ("iter", "disc_loss", "disc_acc", "mean_airl_reward", "mean_true_reward", "kl_step", "policy_entropy")


@dataclass(frozen=True)
class DiscriminatorParams:
    reward_net: MlpParams
    shaping_net: MlpParams
    gamma: float
    scale: np.ndarray

    def inputs(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(obs, dtype=float) / self.scale

    def to_dict(self) -> dict:
        return {"reward_net": self.reward_net.to_dict(), "shaping_net": self.shaping_net.to_dict(),
                "gamma": self.gamma, "feature_scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorParams":
        return cls(MlpParams.from_dict(d["reward_net"]), MlpParams.from_dict(d["shaping_net"]),
                   float(d["gamma"]), np.array(d["feature_scale"], dtype=float))


def discriminator_init(n_lanes: int, dyn: DynamicsConfig, seed: int, zero: bool = False) -> DiscriminatorParams:
    """Fresh ``r`` and ``h`` nets; ``zero=True`` gives identically-zero outputs."""
    d = obs_dim(n_lanes)
    r = mlp_init(d, 1, seed)
    h = mlp_init(d, 1, seed + 1)
    if zero:
        r, h = r.with_flat(np.zeros(r.size)), h.with_flat(np.zeros(h.size))
    return DiscriminatorParams(r, h, dyn.gamma, feature_scale(n_lanes, dyn.v_cap))


def state_reward(d: DiscriminatorParams, obs: np.ndarray) -> np.ndarray:
    """The learned state-only reward ``r(s)``."""
    out, _ = mlp_forward(d.reward_net, d.inputs(obs))
    return out[..., 0]


def absorbing_next(obs: np.ndarray, next_obs: np.ndarray) -> np.ndarray:
    """``next_obs`` with exit observations replaced by the pre-exit state (exits are absorbing)."""
    obs = np.asarray(obs, dtype=float)
    next_obs = np.asarray(next_obs, dtype=float)
    exited = next_obs[..., HAS_EXITED] > 0.5
    return np.where(exited[..., None], obs, next_obs)


def f_value(d: DiscriminatorParams, s: np.ndarray, a, s_next: np.ndarray) -> np.ndarray:
    """``r(s) + gamma * h(s') - h(s)``; ``a`` is accepted for interface uniformity only."""
    del a
    r, _ = mlp_forward(d.reward_net, d.inputs(s))
    h, _ = mlp_forward(d.shaping_net, d.inputs(s))
    h_next, _ = mlp_forward(d.shaping_net, d.inputs(s_next))
    return r[..., 0] + d.gamma * h_next[..., 0] - h[..., 0]


def discriminator_prob(f, logp):
    """``exp(f) / (exp(f) + pi)`` evaluated as ``sigmoid(f - logp)``."""
    return expit(np.asarray(f, dtype=float) - np.asarray(logp, dtype=float))


def discriminator_log_probs(f, logp):
    """``(log D, log(1 - D))`` without forming ``D``, exact where ``D`` itself would round to 0 or 1."""
    z = np.asarray(f, dtype=float) - np.asarray(logp, dtype=float)
    return log_expit(z), log_expit(-z)


def airl_reward(f, logp):
    """``log D - log(1 - D)``, which is exactly ``f - logp``."""
    return np.asarray(f, dtype=float) - np.asarray(logp, dtype=float)


@dataclass
class AirlBatch:
    """Transitions with ``log pi(a|s)`` under the current generator; ``labels`` is 1 for expert."""

    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    logp: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "AirlBatch":
        return AirlBatch(self.obs[idx], self.actions[idx], self.next_obs[idx], self.logp[idx], self.labels[idx])

    @classmethod
    def concat(cls, parts: list["AirlBatch"]) -> "AirlBatch":
        return cls(*(np.concatenate([getattr(p, k) for p in parts])
                     for k in ("obs", "actions", "next_obs", "logp", "labels")))


def make_batch(params: PolicyParams, obs, actions, next_obs, label: int) -> AirlBatch:
    """Label transitions and score them under the current policy."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    actions = np.asarray(actions, dtype=float)
    alpha, beta, hi = pol.actor_dist(params, obs)
    # recorded speeds can sit a hair above the cap after float round-off
    logp = pol.log_prob(alpha, beta, hi, np.minimum(actions, hi))
    return AirlBatch(obs, actions, absorbing_next(obs, next_obs), logp, np.full(len(actions), float(label)))


def discriminator_loss_and_grad(d: DiscriminatorParams, batch: AirlBatch):
    """Cross-entropy with expert as the ``D -> 1`` class: mean over each class, summed.

    Returns ``(loss, grad_reward_net, grad_shaping_net)``.
    """
    lab = np.asarray(batch.labels) > 0.5
    n_e, n_g = int(lab.sum()), int((~lab).sum())
    if n_e == 0 or n_g == 0:
        raise EmptyClass(f"discriminator batch needs both classes (expert={n_e}, generated={n_g})")
    x = d.inputs(batch.obs)
    xn = d.inputs(batch.next_obs)
    r, cr = mlp_forward(d.reward_net, x)
    h, ch = mlp_forward(d.shaping_net, x)
    hn, chn = mlp_forward(d.shaping_net, xn)
    logit = r[:, 0] + d.gamma * hn[:, 0] - h[:, 0] - batch.logp
    # -log D = -log_expit(z); -log(1-D) = -log_expit(-z)
    loss = float(-np.mean(log_expit(logit[lab])) - np.mean(log_expit(-logit[~lab])))
    dz = np.where(lab, (expit(logit) - 1.0) / n_e, expit(logit) / n_g)
    _, g_r = mlp_backward(d.reward_net, cr, dz[:, None])
    _, g_h = mlp_backward(d.shaping_net, ch, -dz[:, None])
    _, g_hn = mlp_backward(d.shaping_net, chn, d.gamma * dz[:, None])
    return loss, g_r, g_h + g_hn


def discriminator_accuracy(d: DiscriminatorParams, batch: AirlBatch) -> float:
    D = discriminator_prob(f_value(d, batch.obs, batch.actions, batch.next_obs), batch.logp)
    return float(np.mean((D > 0.5) == (batch.labels > 0.5)))


def train_discriminator(d: DiscriminatorParams, expert: AirlBatch, generated: AirlBatch, epochs: int = 5,
                        batch_size: int = 64, lr: float = 1e-3, seed: int = 0, optimizer: str = "sgd",
                        opt_state: tuple | None = None) -> tuple[DiscriminatorParams, float]:
    """Shuffled minibatch descent on the pooled, labelled batch.

    Each minibatch draws from both classes in proportion. ``opt_state`` lets
    a caller keep Adam moments alive across calls. Returns the new params and
    the last minibatch loss.
    """
    if len(expert) == 0 or len(generated) == 0:
        raise EmptyClass("train_discriminator: both batches must be nonempty")
    rng = np.random.default_rng(seed)
    opt_r, opt_h = opt_state if opt_state is not None else (
        make_optimizer(optimizer, d.reward_net.size, lr), make_optimizer(optimizer, d.shaping_net.size, lr))
    n_e, n_g = len(expert), len(generated)
    n_mb = max(1, int(np.ceil((n_e + n_g) / batch_size)))
    loss = float("nan")
    for _ in range(epochs):
        ie = np.array_split(rng.permutation(n_e), n_mb)
        ig = np.array_split(rng.permutation(n_g), n_mb)
        for a, b in zip(ie, ig):
            if len(a) == 0 or len(b) == 0:
                continue
            mb = AirlBatch.concat([expert.take(a), generated.take(b)])
            loss, g_r, g_h = discriminator_loss_and_grad(d, mb)
            d = DiscriminatorParams(opt_r.step(d.reward_net, g_r), opt_h.step(d.shaping_net, g_h), d.gamma, d.scale)
    return d, loss


# -- full training loop -----------------------------------------------------------


@dataclass
class AirlConfig:
    iterations: int = 300
    update_period: int = 50
    horizon: int = 200
    disc_epochs: int = 5
    disc_batch_size: int = 64
    disc_lr: float = 1e-3
    disc_optimizer: str = "sgd"
    gen_epochs: int = 10
    batch_size: int = 64
    critic_lr: float = 1e-3
    gamma: float = 0.99
    lam: float = 0.95
    delta: float = 0.01
    cg_iters: int = 10
    damping: float = 0.1
    backtracks: int = 10
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "AirlConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(float(v)) if k != "iter" else int(v)) for k, v in row.items() if k in LOG_COLUMNS})
        return buf.getvalue()


def _generated_batch(params: PolicyParams, buf: RolloutBuffer) -> AirlBatch:
    return AirlBatch(buf.obs, buf.actions, absorbing_next(buf.obs, buf.next_obs), buf.logp_old,
                     np.zeros(len(buf)))


def train_psairl(network, plan, flow, dyn: DynamicsConfig, expert: TrajectorySet, config: AirlConfig,
                 reward_params: RewardParams | None = None, init_policy: PolicyParams | None = None,
                 init_disc: DiscriminatorParams | None = None, callback=None):
    """Alternate discriminator and shared-policy updates for ``config.iterations`` rounds.

    Returns ``(policy, discriminator, TrainingLog)``.
    """
    if len(expert) == 0:
        raise EmptyClass("train_psairl: expert set is empty")
    e_obs, e_act, e_next = expert.arrays()
    rng = np.random.default_rng(config.seed)
    params = init_policy if init_policy is not None else pol.policy_init(network.n_lanes, dyn, config.seed)
    disc = init_disc if init_disc is not None else discriminator_init(network.n_lanes, dyn, config.seed + 100)
    disc = DiscriminatorParams(disc.reward_net, disc.shaping_net, config.gamma, disc.scale)
    collector = RolloutCollector(network, plan, flow, dyn, config.horizon, config.seed)
    critic_opt = make_optimizer("adam", params.critic.size, config.critic_lr)
    disc_opt = (make_optimizer(config.disc_optimizer, disc.reward_net.size, config.disc_lr),
                make_optimizer(config.disc_optimizer, disc.shaping_net.size, config.disc_lr))
    log = TrainingLog()
    for it in range(config.iterations):
        buf = collector.collect(params, config.update_period, rng)
        gen = _generated_batch(params, buf)
        n = len(gen)
        idx = rng.choice(len(e_act), size=n, replace=len(e_act) < n)
        exp_b = make_batch(params, e_obs[idx], e_act[idx], e_next[idx], 1)

        disc, _ = train_discriminator(disc, exp_b, gen, config.disc_epochs, config.disc_batch_size,
                                      config.disc_lr, int(rng.integers(2**31)), opt_state=disc_opt)
        loss, _, _ = discriminator_loss_and_grad(disc, AirlBatch.concat([exp_b, gen]))
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite discriminator loss at iteration {it}", it)
        acc = discriminator_accuracy(disc, AirlBatch.concat([exp_b, gen]))

        f = f_value(disc, gen.obs, gen.actions, gen.next_obs)
        buf.rewards = airl_reward(f, buf.logp_old)
        if not np.all(np.isfinite(buf.rewards)):
            raise NonFiniteLoss(f"non-finite surrogate reward at iteration {it}", it)
        buf = compute_advantages(buf, params, config.gamma, config.lam)
        params, info = trpo_update(params, buf, config.delta, config.cg_iters, config.damping, config.backtracks,
                                   config.gen_epochs, config.batch_size, rng, critic_opt)
        alpha, beta, hi = pol.actor_dist(params, buf.obs)
        true_r = (float(np.mean(handcrafted_reward(buf.obs, reward_params, dyn)))
                  if reward_params is not None else float("nan"))
        row = {"iter": it, "disc_loss": loss, "disc_acc": acc, "mean_airl_reward": float(buf.rewards.mean()),
               "mean_true_reward": true_r, "kl_step": info.kl,
               "policy_entropy": float(np.mean(pol.entropy(alpha, beta, hi)))}
        log.append(row)
        if callback is not None:
            callback(it, params, disc, row)
    return params, disc, log
