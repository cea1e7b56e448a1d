"""Command-line front end: ``psairl [--config FILE] [--run-dir DIR] <command> ...``.

Every command writes into ``<root>/<command>``, or ``<root>/<command>-<variant>``
for ``gen-expert``, ``train`` and ``calibrate``, where ``<root>`` is ``--run-dir``, else
``$RUN_DIR``, else ``./runs``. Each run directory holds ``config.json``, the
fully resolved configuration including the seed, so a run can be repeated
from its own directory. Outputs depend only on the config and the seed.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import roadnet as rn
from .airl import AirlConfig, DiscriminatorParams, state_reward, train_psairl
from .baselines import (
    CalibrationScenario,
    CfmBounds,
    CfmParams,
    bc_train,
    calibrate_random_search,
    calibrate_tabu_search,
)
from .errors import BadConfig, PsairlError, UnknownCommand
from .evaluate import metrics_report, reward_surface, run_transfer, surface_template, surface_to_csv
from .nn import load_checkpoint, save_checkpoint
from .policy import BetaPolicy, PolicyParams
from .reward import RewardParams, handcrafted_reward
from .simcore import DynamicsConfig, KraussPolicy, TrajectorySet, simulate_policy
from .trpo import RlConfig, train_policy_rl

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "network": {"n_lanes": 2, "lane_length": 200.0, "speed_limit": 11.0, "green": 30, "red": 30,
                "network_file": None, "signal_file": None},
    "flow": {"n_vehicles": 10, "route": [0, 1], "headway": 6, "start": 0, "file": None},
    "dynamics": asdict(DynamicsConfig()),
    "reward": RewardParams().to_dict(),
    "train": {
        **{k: v for k, v in asdict(AirlConfig()).items() if k != "seed"},
        "action_mode": "mode",
        "bc_epochs": 200,
        "bc_batch_size": 64,
        "bc_lr": 1e-3,
        "expert_iterations": 500,
        "retrain_iterations": 500,
    },
    "calibrate": {"trials": 100, "iters": 40, "bounds": CfmBounds().to_dict(),
                  "step_sizes": [0.35, 0.7, 0.4], "tabu_len": 10},
    "surface": {"speeds": [0.0, 11.0, 20], "gaps": [0.0, 60.0, 20], "position": 100.0},
}


# -- config -----------------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise BadConfig(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key not in ("bounds",):
            if not isinstance(val, dict):
                raise BadConfig(f"config section {path!r} must be an object")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path) as fh:
            user = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise BadConfig(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise BadConfig("config must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


class Scenario:
    """Environment inputs and hyperparameters resolved from a config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        try:
            self.seed = int(cfg["seed"])
            self.dyn = DynamicsConfig(**cfg["dynamics"])
            self.rp = RewardParams.from_dict(cfg["reward"])
            self.network, self.plan = self._network(cfg["network"])
            self.flow = self._flow(cfg["flow"])
            t = cfg["train"]
            self.airl = AirlConfig.from_dict({**t, "seed": self.seed})
            self.horizon = int(t["horizon"])
            self.action_mode = t["action_mode"]
            if self.action_mode not in ("mode", "mean", "sample"):
                raise ValueError(f"train.action_mode must be mode, mean or sample, got {self.action_mode!r}")
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, PsairlError):
                raise
            raise BadConfig(f"invalid config: {exc}") from exc

    @staticmethod
    def _network(c: dict):
        if c.get("network_file"):
            if not c.get("signal_file"):
                raise BadConfig("network.network_file needs network.signal_file")
            net = rn.load_network(Path(c["network_file"]).read_text())
            return net, rn.load_signal_plan(Path(c["signal_file"]).read_text())
        return rn.gen_corridor(int(c["n_lanes"]), float(c["lane_length"]), float(c["speed_limit"]),
                               float(c["green"]), float(c["red"]))

    def _flow(self, c: dict):
        if c.get("file"):
            flow = rn.load_flow(Path(c["file"]).read_text())
        else:
            flow = rn.gen_flow(int(c["n_vehicles"]), tuple(c["route"]), int(c["headway"]), int(c["start"]))
        rn.validate_flow(flow, self.network)
        return flow

    def rl_config(self, iterations: int, seed: int) -> RlConfig:
        a = self.airl
        return RlConfig(iterations=iterations, update_period=a.update_period, horizon=a.horizon, gamma=a.gamma,
                        lam=a.lam, delta=a.delta, cg_iters=a.cg_iters, damping=a.damping, backtracks=a.backtracks,
                        critic_epochs=a.gen_epochs, batch_size=a.batch_size, critic_lr=a.critic_lr, seed=seed)

    def simulate(self, policy, record: str = "requested", dyn: DynamicsConfig | None = None) -> TrajectorySet:
        return simulate_policy(self.network, self.plan, self.flow, dyn or self.dyn, policy, self.horizon,
                               seed=self.seed, record=record)


# -- io helpers -------------------------------------------------------------------


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_trajs(path: str, scen: Scenario) -> TrajectorySet:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise BadConfig(f"cannot read trajectories {path}: {exc}") from exc
    return TrajectorySet.from_jsonl(text, horizon=scen.horizon)


def _save_policy(path: Path, params: PolicyParams, kind: str, disc: DiscriminatorParams | None = None) -> None:
    nets = {"actor": params.actor, "critic": params.critic}
    extra = {"kind": kind, "v_cap": params.v_cap}
    if disc is not None:
        nets.update(reward_net=disc.reward_net, shaping_net=disc.shaping_net)
        extra["gamma"] = disc.gamma
    save_checkpoint(path, nets, params.scale, extra)


def _load_model(path: str) -> tuple[PolicyParams, DiscriminatorParams | None]:
    try:
        nets, scale, extra = load_checkpoint(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise BadConfig(f"cannot read checkpoint {path}: {exc}") from exc
    policy = PolicyParams(nets["actor"], nets["critic"], scale, float(extra["v_cap"]))
    disc = None
    if "reward_net" in nets:
        disc = DiscriminatorParams(nets["reward_net"], nets["shaping_net"], float(extra["gamma"]), scale)
    return policy, disc


def _parse_assignments(text: str, allowed: tuple[str, ...]) -> dict[str, float]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = part.partition("=")
        if not sep or key not in allowed:
            raise BadConfig(f"bad assignment {part!r}; expected one of {', '.join(allowed)} as key=value")
        try:
            out[key] = float(val)
        except ValueError as exc:
            raise BadConfig(f"bad value in {part!r}") from exc
    return out


def _grid(grid) -> np.ndarray:
    if isinstance(grid, dict) or not isinstance(grid, list):
        raise BadConfig(f"grid must be [lo, hi, n] or an explicit list, got {grid!r}")
    if len(grid) == 3 and isinstance(grid[2], int) and not isinstance(grid[2], bool):
        return np.linspace(float(grid[0]), float(grid[1]), grid[2])
    return np.array(grid, dtype=float)


# -- commands ---------------------------------------------------------------------


def cmd_gen_net(args, scen: Scenario, out: Path) -> None:
    _dump_json(out / "network.json", rn.network_to_dict(scen.network))
    _dump_json(out / "signal.json", rn.signal_plan_to_dict(scen.plan))
    _dump_json(out / "flow.json", rn.flow_to_dict(scen.flow))


def train_reward_expert(scen: Scenario, seed: int | None = None):
    """TRPO policy on the hand-crafted reward; the demonstrator for reward-recovery runs."""
    seed = scen.seed if seed is None else seed
    rp, dyn = scen.rp, scen.dyn
    return train_policy_rl(scen.network, scen.plan, scen.flow, dyn,
                           lambda buf: handcrafted_reward(buf.next_obs, rp, dyn),
                           scen.rl_config(int(scen.cfg["train"]["expert_iterations"]), seed))


def cmd_gen_expert(args, scen: Scenario, out: Path) -> None:
    if args.source == "krauss":
        policy = KraussPolicy(scen.dyn)
    else:
        params, log = train_reward_expert(scen)
        _save_policy(out / "expert_policy.json", params, "reward-policy")
        _write_rows(out / "expert_train.csv", log)
        policy = BetaPolicy(params, scen.action_mode)
    expert = scen.simulate(policy, record="realized")
    (out / "expert.jsonl").write_text(expert.to_jsonl())
    _dump_json(out / "metrics.json", metrics_report(expert, expert, scen.rp, scen.dyn))


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join(_fmt(r[c]) for c in cols) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def cmd_train(args, scen: Scenario, out: Path) -> None:
    expert = _read_trajs(args.expert, scen)
    if args.method == "psairl":
        policy, disc, log = train_psairl(scen.network, scen.plan, scen.flow, scen.dyn, expert, scen.airl, scen.rp)
        _save_policy(out / "model.json", policy, "psairl", disc)
        (out / "train.csv").write_text(log.to_csv())
    else:
        t = scen.cfg["train"]
        hist: list[float] = []
        policy = bc_train(expert, scen.dyn, epochs=int(t["bc_epochs"]), batch_size=int(t["bc_batch_size"]),
                          lr=float(t["bc_lr"]), seed=scen.seed, history=hist)
        _save_policy(out / "model.json", policy, "bc")
        _write_rows(out / "train.csv", [{"epoch": i, "nll": v} for i, v in enumerate(hist)])


def cmd_calibrate(args, scen: Scenario, out: Path) -> None:
    c = scen.cfg["calibrate"]
    try:
        bounds = CfmBounds.from_dict(c["bounds"])
    except (TypeError, ValueError) as exc:
        raise BadConfig(f"invalid calibrate.bounds: {exc}") from exc
    scenario = CalibrationScenario(scen.network, scen.plan, scen.flow, scen.dyn, _read_trajs(args.expert, scen))
    if args.method == "rs":
        res = calibrate_random_search(scenario, int(c["trials"]), bounds, scen.seed)
    else:
        res = calibrate_tabu_search(scenario, int(c["iters"]), bounds, tuple(c["step_sizes"]), int(c["tabu_len"]),
                                    scen.seed)
    _dump_json(out / "calibration.json", {**res.to_dict(), "best_curve": res.best_curve})


def cmd_simulate(args, scen: Scenario, out: Path) -> None:
    if args.policy == "krauss":
        policy = KraussPolicy(scen.dyn)
    elif args.policy == "cfm":
        vals = _parse_assignments(args.params or "", ("a_max", "b_max", "v_cap"))
        base = asdict(CfmParams(scen.dyn.a_max, scen.dyn.b_max, scen.dyn.v_cap))
        policy = KraussPolicy(CfmParams(**{**base, **vals}).dynamics(scen.dyn))
    else:
        params, _ = _load_model(args.policy)
        policy = BetaPolicy(params, args.mode or scen.action_mode)
    (out / "trajectories.jsonl").write_text(scen.simulate(policy).to_jsonl())


def cmd_eval(args, scen: Scenario, out: Path) -> None:
    report = metrics_report(_read_trajs(args.expert, scen), _read_trajs(args.sim, scen), scen.rp, scen.dyn)
    _dump_json(out / "metrics.json", report)


def cmd_surface(args, scen: Scenario, out: Path) -> None:
    s = scen.cfg["surface"]
    speeds, gaps = _grid(s["speeds"]), _grid(s["gaps"])
    lane = scen.network.lanes[0]
    template = surface_template(scen.network.n_lanes, lane.length, lane.speed_limit, float(s["position"]))
    if args.model == "handcrafted":
        score = lambda obs: handcrafted_reward(obs, scen.rp, scen.dyn)
    else:
        _, disc = _load_model(args.model)
        if disc is None:
            raise BadConfig(f"{args.model} has no learned reward")
        score = lambda obs: state_reward(disc, obs)
    (out / "surface.csv").write_text(surface_to_csv(reward_surface(score, speeds, gaps, template), speeds, gaps))


def cmd_transfer(args, scen: Scenario, out: Path) -> None:
    policy, disc = _load_model(args.model)
    if disc is None:
        raise BadConfig(f"{args.model} has no learned reward to transfer")
    changes = _parse_assignments(args.dyn, tuple(f.name for f in fields(DynamicsConfig)))
    try:
        new_dyn = scen.dyn.replace(**changes)
    except ValueError as exc:
        raise BadConfig(str(exc)) from exc
    rl = scen.rl_config(int(scen.cfg["train"]["retrain_iterations"]), scen.seed)
    rep = run_transfer(disc, policy, new_dyn, scen.network, scen.plan, scen.flow, rl, scen.rp, scen.horizon,
                       scen.action_mode)
    _dump_json(out / "transfer.json", rep.to_dict())


COMMANDS = {
    "gen-net": cmd_gen_net,
    "gen-expert": cmd_gen_expert,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "surface": cmd_surface,
    "transfer": cmd_transfer,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        if "invalid choice" in message and "command" in message:
            raise UnknownCommand(message)
        raise BadConfig(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="psairl", description="Parameter-sharing AIRL traffic simulation pipeline.")
    p.add_argument("--config", help="JSON config (defaults are used for missing keys)")
    p.add_argument("--run-dir", help="output root (overrides $RUN_DIR; default ./runs)")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-net", help="write the corridor network, signal plan and flow")
    g = sub.add_parser("gen-expert", help="roll out demonstrations")
    g.add_argument("--source", choices=("krauss", "reward-policy"), default="krauss")
    t = sub.add_parser("train", help="fit PS-AIRL or behavioral cloning to demonstrations")
    t.add_argument("method", choices=("psairl", "bc"))
    t.add_argument("--expert", help="expert JSONL (default: <root>/gen-expert-krauss/expert.jsonl)")
    c = sub.add_parser("calibrate", help="fit Krauss parameters by random or tabu search")
    c.add_argument("method", choices=("rs", "ts"))
    c.add_argument("--expert", help="expert JSONL (default: <root>/gen-expert-krauss/expert.jsonl)")
    s = sub.add_parser("simulate", help="roll out a checkpoint, Krauss, or a calibrated Krauss rule")
    s.add_argument("--policy", required=True, help="checkpoint path, 'krauss' or 'cfm'")
    s.add_argument("--params", help="for cfm: a_max=..,b_max=..,v_cap=..")
    s.add_argument("--mode", choices=("mode", "mean", "sample"), help="action selection for checkpoints")
    e = sub.add_parser("eval", help="compare two trajectory files")
    e.add_argument("--expert", required=True)
    e.add_argument("--sim", required=True)
    f = sub.add_parser("surface", help="reward over a (speed, gap) grid")
    f.add_argument("--model", required=True, help="PS-AIRL checkpoint or 'handcrafted'")
    x = sub.add_parser("transfer", help="direct transfer vs retraining on the learned reward")
    x.add_argument("--dyn", required=True, help="dynamics overrides, e.g. a_max=5,b_max=5")
    x.add_argument("--model", help="PS-AIRL checkpoint (default: <root>/train-psairl/model.json)")
    return p


def _run_name(args) -> str:
    if args.command in ("train", "calibrate"):
        return f"{args.command}-{args.method}"
    if args.command == "gen-expert":
        return f"gen-expert-{args.source}"
    return args.command


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    root = Path(args.run_dir or os.environ.get("RUN_DIR") or "runs")
    if getattr(args, "expert", None) is None and args.command in ("train", "calibrate"):
        args.expert = str(root / "gen-expert-krauss" / "expert.jsonl")
    if args.command == "transfer" and args.model is None:
        args.model = str(root / "train-psairl" / "model.json")
    scen = Scenario(cfg)
    out = root / _run_name(args)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", cfg)
    COMMANDS[args.command](args, scen, out)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except PsairlError as exc:
        print(f"psairl: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
