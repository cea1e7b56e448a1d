"""Comparison methods: behavioral cloning and Krauss parameter calibration.

Calibration treats ``(a_max, b_max, v_cap)`` of the Krauss rule as free
parameters and searches for the triple whose simulated trajectories best
match the demonstrations, scored by position RMSE. The environment keeps
the true vehicle dynamics; only the controller's beliefs change.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import policy as pol
from .errors import EmptySet
from .evaluate import rmse_position, rmse_speed
from .nn import make_optimizer
from .policy import PolicyParams
from .simcore import DynamicsConfig, KraussPolicy, TrajectorySet, simulate_policy

PARAM_NAMES = ("a_max", "b_max", "v_cap")


# -- behavioral cloning --------------------------------------------------------------


def bc_nll(params: PolicyParams, obs: np.ndarray, actions: np.ndarray) -> float:
    alpha, beta, hi = pol.actor_dist(params, obs)
    return float(-np.mean(pol.log_prob(alpha, beta, hi, np.minimum(actions, hi))))


def bc_train(expert: TrajectorySet, dyn: DynamicsConfig, epochs: int = 200, batch_size: int = 64,
             lr: float = 1e-3, seed: int = 0, init: PolicyParams | None = None,
             history: list | None = None) -> PolicyParams:
    """Fit the shared actor to expert ``(s, a)`` pairs by minibatch Beta maximum likelihood.

    The critic is left at its initial value. If ``history`` is a list, the
    full-data NLL after each epoch is appended to it.
    """
    obs, actions, _ = expert.arrays()
    if len(actions) == 0:
        raise EmptySet("bc_train: expert set is empty")
    params = init if init is not None else pol.policy_init(expert.n_lanes, dyn, seed)
    actions = np.minimum(actions, pol.action_bound(params, obs))
    rng = np.random.default_rng(seed)
    opt = make_optimizer("adam", params.actor.size, lr)
    n = len(actions)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, g = pol.logp_and_grad(params, obs[idx], actions[idx], np.full(len(idx), -1.0 / len(idx)))
            params = params.with_actor(opt.step(params.actor, g))
        if history is not None:
            history.append(bc_nll(params, obs, actions))
    return params


# -- Krauss calibration -----------------------------------------------------------------


@dataclass(frozen=True)
class CfmParams:
    a_max: float
    b_max: float
    v_cap: float

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))
            if not getattr(self, name) > 0:
                raise ValueError(f"CfmParams.{name} must be > 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.a_max, self.b_max, self.v_cap])

    def to_dict(self) -> dict:
        return asdict(self)

    def dynamics(self, base: DynamicsConfig) -> DynamicsConfig:
        return base.replace(a_max=self.a_max, b_max=self.b_max, v_cap=self.v_cap)


@dataclass(frozen=True)
class CfmBounds:
    a_max: tuple[float, float] = (0.5, 4.0)
    b_max: tuple[float, float] = (1.0, 8.0)
    v_cap: tuple[float, float] = (3.0, 11.0)

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"CfmBounds.{name}: need 0 < lo <= hi, got ({lo}, {hi})")

    @property
    def lo(self) -> np.ndarray:
        return np.array([getattr(self, k)[0] for k in PARAM_NAMES])

    @property
    def hi(self) -> np.ndarray:
        return np.array([getattr(self, k)[1] for k in PARAM_NAMES])

    def midpoint(self) -> CfmParams:
        return CfmParams(*((self.lo + self.hi) / 2.0))

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def contains(self, p: CfmParams, tol: float = 1e-12) -> bool:
        x = p.as_array()
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    @classmethod
    def from_dict(cls, d: dict) -> "CfmBounds":
        return cls(**{k: tuple(v) for k, v in d.items() if k in PARAM_NAMES})

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in PARAM_NAMES}


@dataclass
class CalibrationScenario:
    """Everything needed to score a candidate: the environment and the demonstrations."""

    network: object
    plan: object
    flow: object
    dyn: DynamicsConfig
    expert: TrajectorySet
    speed_weight: float = 0.0  # 0 scores position RMSE only

    def simulate(self, p: CfmParams) -> TrajectorySet:
        return simulate_policy(self.network, self.plan, self.flow, self.dyn, KraussPolicy(p.dynamics(self.dyn)),
                               self.expert.effective_horizon())

    def score(self, p: CfmParams) -> float:
        sim = self.simulate(p)
        loss = rmse_position(self.expert, sim)
        if self.speed_weight:
            loss += self.speed_weight * rmse_speed(self.expert, sim)
        return loss


@dataclass
class CalibrationResult:
    method: str
    best: CfmParams
    rmse: float
    evals: int
    history: list[dict] = field(default_factory=list)
    best_curve: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"method": self.method, "best": self.best.to_dict(), "rmse": self.rmse, "evals": self.evals,
                "history": self.history}


def calibrate_random_search(scenario: CalibrationScenario, trials: int, bounds: CfmBounds,
                            seed: int = 0) -> CalibrationResult:
    """Uniform samples inside ``bounds``; the first lowest-scoring sample wins."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    best, best_rmse = None, np.inf
    history, curve = [], []
    for _ in range(trials):
        p = CfmParams(*rng.uniform(bounds.lo, bounds.hi))
        r = scenario.score(p)
        history.append({**p.to_dict(), "rmse": r})
        if r < best_rmse:
            best, best_rmse = p, r
        curve.append(best_rmse)
    return CalibrationResult("rs", best, float(best_rmse), trials, history, curve)


def _same(x: np.ndarray, y: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(np.all(np.abs(x - y) <= tol))


def calibrate_tabu_search(scenario: CalibrationScenario, iters: int, bounds: CfmBounds,
                          step_sizes: tuple[float, float, float] = (0.35, 0.7, 0.4), tabu_len: int = 10,
                          seed: int = 0) -> CalibrationResult:
    """Axis-neighbor tabu search from the bounds midpoint, returning the best point ever seen.

    Each iteration scores the six ``+/- step`` neighbors (clamped to the
    bounds) of the current point, moves to the best one not on the tabu
    list, and pushes the point it left onto the FIFO tabu list. There is no
    aspiration rule, so tabu points are never revisited. ``seed`` is
    accepted for interface symmetry; the search itself is deterministic.
    """
    del seed
    if iters < 1:
        raise ValueError("iters must be >= 1")
    steps = np.asarray(step_sizes, dtype=float)
    cache: dict[tuple, float] = {}
    history: list[dict] = []

    def score(x: np.ndarray) -> float:
        key = tuple(np.round(x, 9))
        if key not in cache:
            p = CfmParams(*x)
            cache[key] = scenario.score(p)
            history.append({**p.to_dict(), "rmse": cache[key]})
        return cache[key]

    current = bounds.midpoint().as_array()
    best_x, best_r = current.copy(), score(current)
    tabu: list[np.ndarray] = []
    curve = []
    for _ in range(iters):
        cands = []
        for k in range(3):
            for sign in (1.0, -1.0):
                x = current.copy()
                x[k] += sign * steps[k]
                x = bounds.clamp(x)
                if _same(x, current) or any(_same(x, t) for t in tabu):
                    continue
                cands.append((score(x), len(cands), x))
        if cands:
            r, _, nxt = min(cands, key=lambda c: (c[0], c[1]))
            if r < best_r:
                best_x, best_r = nxt.copy(), r
            tabu.append(current)
            if len(tabu) > tabu_len:
                tabu.pop(0)
            current = nxt
        curve.append(best_r)
    return CalibrationResult("ts", CfmParams(*best_x), float(best_r), len(cache), history, curve)
