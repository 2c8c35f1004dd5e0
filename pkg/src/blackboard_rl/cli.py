"""Command-line entry point.

Exit status: 0 on success, 2 for bad flags or configuration, 1 when the run
itself fails.
"""

from __future__ import annotations

import argparse
import sys
import time
from typing import Optional, Sequence

import numpy as np

from .agent import Agents, TemporalAgent
from .algos import (
    CartPoleExpert,
    ConfigError,
    GridExpert,
    RandomPolicy,
    TrainConfig,
    action_agreement,
    train,
    train_bc,
)
from .envs import EnvAgent, make_env
from .parallel import create_remote
from .tensor import no_grad
from .workspace import TrajectoryDataset, Workspace, WorkspaceError, load_any, save_dataset


class UsageError(Exception):
    pass


def _config(path: Optional[str], **overrides) -> TrainConfig:
    from .config import Config, load_config

    cfg = load_config(path) if path else Config()
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        return cfg.train_config(**overrides).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _expert(env: str):
    if env == "gridworld":
        return GridExpert()
    if env == "cartpole":
        return CartPoleExpert()
    raise UsageError(f"no expert policy for environment {env!r}")


def record_episodes(env: str, policy: str, episodes: int, seed: int = 0, **env_kwargs) -> list[Workspace]:
    """One single-item workspace per episode, cut right after the terminal step."""
    core = make_env(env, **env_kwargs)
    agent_policy = _expert(env) if policy == "expert" else RandomPolicy(core.n_actions)
    out = []
    for k in range(episodes):
        runner = TemporalAgent(Agents(EnvAgent(env, n_envs=1, **env_kwargs), agent_policy))
        runner.seed(seed + k)
        ws = Workspace()
        with no_grad():
            runner(ws, t=0, n_steps=core.max_steps + 1, stop_variable="env/done")
        out.append(ws)
    return out


def measure_throughput(cfg: TrainConfig, processes: int, n_steps: int = 50, repeats: int = 2) -> float:
    """Environment steps per second of remote random-policy acquisition.

    Each worker owns ``cfg.n_envs`` environments, so the total batch grows
    with the number of processes.
    """
    env = EnvAgent(cfg.env, n_envs=cfg.n_envs, auto_reset=True, **cfg.env_kwargs())
    agent = TemporalAgent(Agents(env, RandomPolicy(env.n_actions)))
    remote, shared = create_remote(agent, processes, seed=cfg.seed, t=0, n_steps=2, t_max=n_steps)
    try:
        remote(shared, t=0, n_steps=2)
        best = 0.0
        for _ in range(repeats):
            shared.clear()
            start = time.perf_counter()
            remote(shared, t=0, n_steps=n_steps)
            elapsed = time.perf_counter() - start
            best = max(best, processes * cfg.n_envs * n_steps / elapsed)
        return best
    finally:
        remote.close()


def _cmd_train(args) -> int:
    cfg = _config(args.config, seed=args.seed, num_processes=args.processes, log_path=args.log)
    log = train(args.algo, cfg)
    last = log.recent_mean(20)
    print(f"algo={args.algo} steps={log.records[-1]['global_step'] if log.records else 0} "
          f"episodes={len(log.episode_returns)} last20_mean={last:.2f}")
    if log.eval_returns:
        print(f"eval_mean={np.mean(log.eval_returns):.2f} over {len(log.eval_returns)} episodes")
    return 0


def _cmd_record(args) -> int:
    kw = {"max_steps": args.max_steps} if args.max_steps else {}
    if args.random_start:
        if args.env != "gridworld":
            raise UsageError("--random-start only applies to gridworld")
        kw["random_start"] = True
    try:
        make_env(args.env, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    episodes = record_episodes(args.env, args.policy, args.episodes, seed=args.seed, **kw)
    save_dataset(args.out, episodes)
    returns = [float(ws.get("env/cumulated_reward", ws.time_extent - 1).data[0]) for ws in episodes]
    print(f"wrote {len(episodes)} episodes to {args.out} (mean return {np.mean(returns):.2f})")
    return 0


def _cmd_bc(args) -> int:
    cfg = _config(args.config, seed=args.seed, log_path=args.log)
    log = train_bc(cfg, args.dataset)
    agreement = action_agreement(log.policy, TrajectoryDataset.load(args.dataset))
    print(f"iterations={len(log.records)} final_loss={log.records[-1]['losses']['cross_entropy']:.4f} "
          f"agreement={agreement:.3f}")
    return 0


def _cmd_inspect(args) -> int:
    workspaces = load_any(args.file)
    kind = "dataset" if len(workspaces) > 1 else "workspace"
    print(f"{args.file}: {kind} with {len(workspaces)} workspace(s)")
    for i, ws in enumerate(workspaces):
        print(f"[{i}] T={ws.time_extent} B={ws.batch_size}")
        for name in ws.keys():
            shape = "x".join(str(d) for d in ws.item_shape(name)) or "scalar"
            print(f"  {name:<24} T={ws.time_size(name)} B={ws.batch_size} item={shape}")
    return 0


def _cmd_bench(args) -> int:
    try:
        counts = [int(x) for x in args.processes.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--processes expects a comma-separated list of integers, got {args.processes!r}") from None
    if not counts or min(counts) < 1:
        raise UsageError("--processes needs positive worker counts")
    cfg = _config(args.config)
    for n in counts:
        rate = measure_throughput(cfg, n, n_steps=args.steps)
        print(f"processes={n} steps_per_sec={rate:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blackboard-rl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a trainer from a config file")
    t.add_argument("--algo", required=True, choices=["reinforce", "a2c", "ddqn"])
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--processes", type=int)
    t.add_argument("--log", help="metric log path (overrides log.path)")
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("record", help="record episodes into a dataset file")
    r.add_argument("--env", required=True)
    r.add_argument("--policy", required=True, choices=["random", "expert"])
    r.add_argument("--episodes", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--max-steps", type=int, default=0)
    r.add_argument("--random-start", action="store_true")
    r.set_defaults(func=_cmd_record)

    b = sub.add_parser("bc", help="behavioral cloning from a dataset file")
    b.add_argument("--config")
    b.add_argument("--dataset", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--log")
    b.set_defaults(func=_cmd_bc)

    i = sub.add_parser("inspect", help="describe a workspace or dataset file")
    i.add_argument("file")
    i.set_defaults(func=_cmd_inspect)

    s = sub.add_parser("bench-parallel", help="measure acquisition throughput per worker count")
    s.add_argument("--processes", default="1,2,4")
    s.add_argument("--config")
    s.add_argument("--steps", type=int, default=50)
    s.set_defaults(func=_cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, WorkspaceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
