"""Observation builders and simulator checks shared by the test modules."""
import numpy as np

from psairl.simcore import TrafficEnv, obs_dim


def make_obs(n_lanes=1, lane=0, lane_length=300.0, speed_limit=11.0, green=1.0, v=0.0, pos=0.0,
             leader_v=None, leader_pos=None, vehicle_length=5.0, exited=0.0):
    """Hand-built observation; no leader unless ``leader_pos`` is given."""
    o = np.zeros(obs_dim(n_lanes))
    o[lane] = 1.0
    o[-11] = lane_length
    o[-10] = speed_limit
    o[-9] = green
    o[-8] = v
    o[-7] = pos
    o[-6] = max(0.0, lane_length - pos)
    if leader_pos is None:
        o[-5], o[-4], o[-3], o[-2] = 0.0, lane_length, max(0.0, lane_length - pos), 1.0
    else:
        o[-5], o[-4], o[-3], o[-2] = leader_v or 0.0, leader_pos, max(0.0, leader_pos - pos - vehicle_length), 0.0
    o[-1] = exited
    return o


def random_obs(rng, n, n_lanes=2, lane_length=200.0, v_cap=11.0):
    """Batch of plausible random observations for gradient checks."""
    out = []
    for _ in range(n):
        pos = rng.uniform(0, lane_length)
        has_leader = rng.random() < 0.6
        lp = min(lane_length + 50, pos + 5 + rng.uniform(0, 80)) if has_leader else None
        out.append(make_obs(n_lanes, int(rng.integers(n_lanes)), lane_length, v_cap, float(rng.random() < 0.5),
                            rng.uniform(0, v_cap), pos, rng.uniform(0, v_cap) if has_leader else None, lp))
    return np.array(out)


def safety_violations(net, plan, flow, dyn, T, choose):
    """Step an environment and count (overlap, speed-feasibility) violations.

    ``choose(env, obs) -> {vid: action}``.
    """
    env = TrafficEnv(net, plan, flow, dyn)
    obs = env.reset(0)
    overlaps = jumps = 0
    for _ in range(T):
        before = {vid: env.vehicles[vid].speed for vid in env.active_ids}
        obs, done, _ = env.step(choose(env, obs))
        for vid, v0 in before.items():
            dv = env.vehicles[vid].speed - v0
            if dv > dyn.a_max * dyn.dt + 1e-9 or -dv > dyn.b_max * dyn.dt + 1e-9:
                jumps += 1
        by_lane = {}
        for vid in env.active_ids:
            veh = env.vehicles[vid]
            by_lane.setdefault(veh.lane_id, []).append(veh.position)
        for positions in by_lane.values():
            positions.sort()
            for a, b in zip(positions, positions[1:]):
                if a + dyn.vehicle_length > b + 1e-9:
                    overlaps += 1
        obs = {i: o for i, o in obs.items() if not done[i]}
        if env.finished:
            break
    return overlaps, jumps


def bandit_buffer(params, obs, rng, target_frac=0.7):
    """One-step episodes with reward -(a - target_frac * hi)**2 and normalized advantages."""
    from psairl import policy as pol
    from psairl.trpo import RolloutBuffer, compute_advantages

    alpha, beta, hi = pol.actor_dist(params, obs)
    acts = pol.sample_action(alpha, beta, hi, rng)
    n = len(acts)
    buf = RolloutBuffer(obs=obs, actions=acts, logp_old=pol.log_prob(alpha, beta, hi, acts),
                        rewards=-((acts - target_frac * hi) ** 2), next_obs=obs,
                        terminal=np.ones(n, bool), seg_end=np.ones(n, bool))
    return compute_advantages(buf, params, gamma=0.99, lam=0.95)


def run_bandit(updates=100, n=1000, seed=0, delta=0.01):
    """TRPO actor steps on the bandit; returns (params, infos, mean-action fractions per update)."""
    from psairl import policy as pol
    from psairl.simcore import DynamicsConfig
    from psairl.trpo import trpo_step

    rng = np.random.default_rng(seed)
    params = pol.policy_init(1, DynamicsConfig(), seed)
    obs = np.tile(make_obs(lane_length=300.0, pos=100.0, v=5.0), (n, 1))
    infos, means = [], []
    for _ in range(updates):
        buf = bandit_buffer(params, obs, rng)
        params, info = trpo_step(params, buf, delta=delta)
        infos.append(info)
        a, b, _ = pol.actor_dist(params, obs[:1])
        means.append(float(a[0] / (a[0] + b[0])))
    return params, infos, means


def tabular_mdp(seed=0, n_states=6, n_actions=2):
    """Random transition tensor P[s, a, s'] and state reward; state 5 has two identical actions."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P[5, 1] = P[5, 0]
    return P, rng.normal(size=n_states)


def optimal_action_sets(P, R, gamma, tol=1e-7):
    """Value iteration on ``R[s, a, s']``; returns the argmax action set of every state."""
    n_s, n_a, _ = P.shape
    V = np.zeros(n_s)
    for _ in range(100_000):
        Q = np.einsum("ijk,ijk->ij", P, R + gamma * V[None, None, :])
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < 1e-13:
            break
        V = V_new
    return [frozenset(np.flatnonzero(Q[s] >= Q[s].max() - tol).tolist()) for s in range(n_s)]


def shaped_reward(r, h, gamma, n_actions=2):
    """``f[s, a, s'] = r(s) + gamma * h(s') - h(s)``."""
    n = len(r)
    f = r[:, None] + gamma * h[None, :] - h[:, None]
    return np.broadcast_to(f[:, None, :], (n, n_actions, n)).copy()
