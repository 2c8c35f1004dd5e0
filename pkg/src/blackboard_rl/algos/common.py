"""Training configuration, metric logging and rollout collection."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..agent import Agents, TemporalAgent
from ..envs import EnvAgent
from ..parallel import create_remote
from ..tensor import no_grad
from ..workspace import Workspace


class ConfigError(ValueError):
    pass


def _key(name: str, default, help: str = ""):
    return field(default=default, metadata={"key": name, "help": help})


@dataclass
class TrainConfig:
    env: str = _key("env.name", "cartpole", "cartpole | gridworld | sleep")
    n_envs: int = _key("env.n_envs", 8, "environments per rollout, split across processes")
    env_max_steps: int = _key("env.max_steps", 0, "episode cap; 0 keeps the environment default")
    random_start: bool = _key("env.random_start", False, "gridworld: start in a random non-goal cell")
    gamma: float = _key("algo.gamma", 0.99)
    lr: float = _key("algo.lr", 0.01)
    optimizer: str = _key("algo.optimizer", "adam", "adam | sgd")
    n_steps: int = _key("algo.n_steps", 20, "timesteps per acquisition")
    entropy_coef: float = _key("algo.entropy_coef", 0.01)
    critic_coef: float = _key("algo.critic_coef", 0.5)
    critic_lr: float = _key("algo.critic_lr", 0.0, "A2C critic learning rate; 0 reuses algo.lr")
    max_grad_norm: float = _key("algo.max_grad_norm", 0.0, "0 disables clipping")
    eps_start: float = _key("algo.eps_start", 1.0)
    eps_end: float = _key("algo.eps_end", 0.05)
    eps_decay_steps: int = _key("algo.eps_decay_steps", 10000)
    target_update: int = _key("algo.target_update", 500, "env steps between target network copies")
    batch_size: int = _key("algo.batch_size", 64)
    buffer_capacity: int = _key("algo.buffer_capacity", 20000)
    learning_starts: int = _key("algo.learning_starts", 500)
    updates_per_iter: int = _key("algo.updates_per_iter", 1)
    arch: str = _key("policy.arch", "mlp", "mlp | rnn")
    hidden: int = _key("policy.hidden", 64)
    total_steps: int = _key("train.total_steps", 150000)
    seed: int = _key("train.seed", 0)
    num_processes: int = _key("train.num_processes", 1)
    eval_episodes: int = _key("train.eval_episodes", 20)
    stop_return: float = _key("train.stop_return", 0.0, "stop once the last 20 episodes average this; 0 disables")
    bc_iterations: int = _key("bc.iterations", 500)
    log_path: str = _key("log.path", "", "JSON-lines metric file; empty keeps metrics in memory only")
    log_wallclock: bool = _key("log.wallclock", False, "record elapsed seconds instead of 0.0")

    @classmethod
    def keys(cls) -> dict[str, dataclasses.Field]:
        return {f.metadata["key"]: f for f in dataclasses.fields(cls)}

    def to_text(self) -> str:
        lines = []
        for key, f in self.keys().items():
            v = getattr(self, f.name)
            lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def env_kwargs(self) -> dict:
        kw = {}
        if self.env_max_steps > 0:
            kw["max_steps"] = self.env_max_steps
        if self.env == "gridworld" and self.random_start:
            kw["random_start"] = True
        return kw

    def validate(self) -> "TrainConfig":
        problems = []
        if not 0.0 <= self.gamma <= 1.0:
            problems.append(f"algo.gamma must lie in [0, 1], got {self.gamma}")
        for key in ("n_steps", "n_envs", "num_processes", "batch_size", "buffer_capacity", "hidden", "updates_per_iter"):
            if getattr(self, key) < 1:
                problems.append(f"{self.keys_by_field()[key]} must be >= 1, got {getattr(self, key)}")
        if self.lr <= 0:
            problems.append(f"algo.lr must be positive, got {self.lr}")
        if self.critic_lr < 0:
            problems.append(f"algo.critic_lr must be >= 0, got {self.critic_lr}")
        if self.arch not in ("mlp", "rnn"):
            problems.append(f"policy.arch must be mlp or rnn, got {self.arch!r}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"algo.optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.n_envs % self.num_processes:
            problems.append(f"env.n_envs={self.n_envs} is not divisible by train.num_processes={self.num_processes}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @classmethod
    def keys_by_field(cls) -> dict[str, str]:
        return {f.name: f.metadata["key"] for f in dataclasses.fields(cls)}


class MetricLog:
    """Append-only training metrics, optionally mirrored to a JSON-lines file.

    Wallclock is written as 0.0 unless requested, so two seeded runs produce
    byte-identical files.
    """

    FIELDS = ("global_step", "episode_return_mean", "episode_return_max", "losses", "wallclock")

    def __init__(self, path: Optional[str] = None, wallclock: bool = False):
        self.path = path or None
        self.records: list[dict] = []
        self.episode_returns: list[float] = []
        self.eval_returns: list[float] = []
        self.wallclock = wallclock
        self._t0 = time.perf_counter()
        self._fh = open(self.path, "w", encoding="utf-8") if self.path else None

    def append(self, global_step: int, returns, losses: dict) -> dict:
        if self.records and global_step < self.records[-1]["global_step"]:
            raise ValueError(f"global_step went backwards: {global_step} < {self.records[-1]['global_step']}")
        returns = [float(r) for r in returns]
        self.episode_returns.extend(returns)
        record = {
            "global_step": int(global_step),
            "episode_return_mean": float(np.mean(returns)) if returns else None,
            "episode_return_max": float(np.max(returns)) if returns else None,
            "losses": {k: float(v) for k, v in losses.items()},
            "wallclock": round(time.perf_counter() - self._t0, 3) if self.wallclock else 0.0,
        }
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()
        return record

    def recent_mean(self, n: int = 20) -> float:
        if len(self.episode_returns) < n:
            return math.nan
        return float(np.mean(self.episode_returns[-n:]))

    def best_recent_mean(self, n: int = 20) -> float:
        """Highest mean over any n consecutive completed episodes."""
        r = np.asarray(self.episode_returns, dtype=np.float64)
        if len(r) < n:
            return math.nan
        c = np.concatenate([[0.0], np.cumsum(r)])
        return float(((c[n:] - c[:-n]) / n).max())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


def should_stop(cfg: TrainConfig, log: MetricLog) -> bool:
    return cfg.stop_return > 0 and log.recent_mean(20) >= cfg.stop_return


def completed_returns(ws: Workspace, t0: int = 0) -> list[float]:
    """Returns of episodes whose terminal step lies at t >= t0, time-major."""
    done = ws.get_full("env/done").data[t0:]
    cum = ws.get_full("env/cumulated_reward").data[t0:]
    first = ws.get_full("env/initial_state").data[t0:]
    if t0 > 0:
        prev = ws.get_full("env/done").data[t0 - 1 : -1]
    else:
        prev = np.vstack([np.zeros_like(done[:1]), done[:-1]])
    # a frozen terminal repeats done=1; count only the step where it first appears
    ended = (done > 0.5) & ((prev < 0.5) | (first > 0.5))
    ts, bs = np.nonzero(ended)
    return [float(cum[t, b]) for t, b in zip(ts, bs)]


class Rollout:
    """Collects fixed-length rollouts, continuing episodes across calls.

    The first call executes timesteps 0..n_steps-1.  Later calls keep the
    last timestep of the previous rollout as t=0 and execute 1..n_steps-1, so
    no environment step is lost between iterations.  With several processes
    the acquisition runs remotely and the result is a snapshot.
    """

    def __init__(self, env_agent: EnvAgent, policy, n_steps: int, num_processes: int = 1, seed: int = 0):
        if n_steps < 2:
            raise ConfigError("rollouts need at least 2 timesteps")
        self.agent = TemporalAgent(Agents(env_agent, policy))
        self.agent.seed(seed)
        self.n_steps = n_steps
        self.n_envs = env_agent.n_envs * num_processes
        self.remote = self.shared = None
        if num_processes > 1:
            self.remote, self.shared = create_remote(self.agent, num_processes, seed=seed, t=0, n_steps=n_steps)
        self.ws: Optional[Workspace] = None
        self.env_steps = 0

    def collect(self, **kwargs) -> tuple[Workspace, list[float]]:
        first = self.ws is None
        if self.remote is not None:
            self.remote.load_parameters(self.agent)
            if first:
                self.shared.clear()
                self.remote(self.shared, t=0, n_steps=self.n_steps, **kwargs)
            else:
                self.shared.keep_last_steps(1)
                self.remote(self.shared, t=1, n_steps=self.n_steps - 1, **kwargs)
            ws = self.shared.snapshot()
        else:
            with no_grad():
                ws = Workspace() if first else self.ws.tail(1)
                if first:
                    self.agent(ws, t=0, n_steps=self.n_steps, **kwargs)
                else:
                    self.agent(ws, t=1, n_steps=self.n_steps - 1, **kwargs)
        self.ws = ws
        self.env_steps += self.n_envs * (self.n_steps if first else self.n_steps - 1)
        return ws, completed_returns(ws, 0 if first else 1)

    def close(self) -> None:
        if self.remote is not None:
            self.remote.close()
            self.remote = self.shared = None


def make_env_agent(cfg: TrainConfig, n_envs: Optional[int] = None, auto_reset: bool = True) -> EnvAgent:
    n = n_envs if n_envs is not None else cfg.n_envs // cfg.num_processes
    return EnvAgent(cfg.env, n_envs=n, auto_reset=auto_reset, **cfg.env_kwargs())


def evaluate(cfg: TrainConfig, policy, n_episodes: int, seed: int = 10_000, **kwargs) -> list[float]:
    """Run ``n_episodes`` complete episodes with a clone of ``policy``."""
    env = make_env_agent(cfg, n_envs=n_episodes, auto_reset=False)
    agent = TemporalAgent(Agents(env, policy.clone()))
    agent.seed(seed)
    horizon = env.envs[0].max_steps + 1
    ws = Workspace()
    with no_grad():
        agent(ws, t=0, n_steps=horizon, stop_variable="env/done", **kwargs)
    return [float(x) for x in ws.get("env/cumulated_reward", ws.time_extent - 1).data]


def epsilon_at(step: int, start: float, end: float, decay_steps: int) -> float:
    if decay_steps <= 0 or step >= decay_steps:
        return end
    frac = min(1.0, step / decay_steps)
    return start + frac * (end - start)
