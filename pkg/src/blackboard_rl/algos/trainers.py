"""REINFORCE, A2C, Double DQN and behavioral cloning on top of workspaces.

Every trainer follows the same pattern: acquire a rollout without gradients
(locally or in worker processes), replay the learning agents over the
acquired workspace with gradients on, build the loss from workspace
variables and take an optimizer step.  None of them looks inside the policy,
so a recurrent composition can be swapped in for a feedforward one.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .. import tensor as T
from ..agent import Agents, TemporalAgent
from ..envs import make_env
from ..optim import clip_grad_norm, make_optimizer
from ..replay import ReplayBuffer
from ..tensor import DTYPE, Tensor, no_grad
from ..workspace import TrajectoryDataset, Workspace
from .common import MetricLog, Rollout, TrainConfig, epsilon_at, evaluate, make_env_agent, should_stop
from .policies import CriticAgent, make_policy, make_q_agent
from .returns import double_dqn_target, return_to_go, transition_views


def _env_dims(cfg: TrainConfig) -> tuple[int, int]:
    env = make_env(cfg.env, **cfg.env_kwargs())
    if env.n_actions is None:
        raise ValueError(f"environment {cfg.env!r} has continuous actions; these trainers need discrete ones")
    return env.obs_dim, env.n_actions


def _step(opt, loss: Tensor, max_grad_norm: float) -> None:
    opts = opt if isinstance(opt, (list, tuple)) else [opt]
    for o in opts:
        o.zero_grad()
    T.backward(loss)
    if max_grad_norm > 0:
        clip_grad_norm([p for o in opts for p in o.params], max_grad_norm)
    for o in opts:
        o.step()


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    count = max(float(mask.sum()), 1.0)
    return T.sum(x * Tensor(mask.astype(DTYPE))) * (1.0 / count)


def reinforce_loss(ws: Workspace, gamma: float) -> Tensor:
    """-mean_t log pi(a_t|s_t) * G_t over live steps, returns cut at episode ends."""
    r_next, done_next, valid = transition_views(ws.get_full("env/reward").data, ws.get_full("env/done").data)
    returns = return_to_go(r_next, gamma, continues=1.0 - done_next)
    logp = ws.get_full("action_logp")[:-1]
    return -masked_mean(logp * Tensor(returns.astype(DTYPE)), valid)


def a2c_losses(ws: Workspace, gamma: float) -> dict[str, Tensor]:
    r_next, done_next, valid = transition_views(ws.get_full("env/reward").data, ws.get_full("env/done").data)
    values = ws.get_full("critic")
    bootstrap = (gamma * (1.0 - done_next) * values.data[1:]).astype(DTYPE)
    target = Tensor((r_next + bootstrap).astype(DTYPE))
    advantage = target - values[:-1]
    logp = ws.get_full("action_logp")[:-1]
    return {
        "policy": -masked_mean(logp * advantage.detach(), valid),
        "critic": masked_mean(T.square(advantage), valid),
        "entropy": masked_mean(ws.get_full("action_entropy")[:-1], valid),
    }


def _finish(cfg, log: MetricLog, rollout: Rollout, policy, **eval_kwargs) -> MetricLog:
    rollout.close()
    if cfg.eval_episodes > 0:
        log.eval_returns = evaluate(cfg, policy, cfg.eval_episodes, seed=cfg.seed + 10_000, **eval_kwargs)
    log.close()
    return log


def train_reinforce(cfg: TrainConfig, policy=None) -> MetricLog:
    cfg.validate()
    obs_dim, n_actions = _env_dims(cfg)
    policy = policy or make_policy(cfg.arch, obs_dim, n_actions, cfg.hidden, rng=cfg.seed)
    learner = TemporalAgent(policy)
    opt = make_optimizer(cfg.optimizer, policy.parameters(), cfg.lr)
    rollout = Rollout(make_env_agent(cfg), policy, cfg.n_steps, cfg.num_processes, cfg.seed)
    log = MetricLog(cfg.log_path, cfg.log_wallclock)
    try:
        while rollout.env_steps < cfg.total_steps:
            ws, returns = rollout.collect()
            learner(ws, t=0, n_steps=ws.time_extent, replay=True)
            loss = reinforce_loss(ws, cfg.gamma)
            _step(opt, loss, cfg.max_grad_norm)
            log.append(rollout.env_steps, returns, {"policy": loss.item()})
            if should_stop(cfg, log):
                break
    except BaseException:
        rollout.close()
        log.close()
        raise
    return _finish(cfg, log, rollout, policy, stochastic=False)


def train_a2c(cfg: TrainConfig, policy=None, critic=None) -> MetricLog:
    cfg.validate()
    obs_dim, n_actions = _env_dims(cfg)
    policy = policy or make_policy(cfg.arch, obs_dim, n_actions, cfg.hidden, rng=cfg.seed)
    critic = critic or CriticAgent(obs_dim, cfg.hidden, rng=cfg.seed + 1)
    learner = TemporalAgent(Agents(policy, critic))
    opt = [
        make_optimizer(cfg.optimizer, policy.parameters(), cfg.lr),
        make_optimizer(cfg.optimizer, critic.parameters(), cfg.critic_lr or cfg.lr),
    ]
    rollout = Rollout(make_env_agent(cfg), policy, cfg.n_steps, cfg.num_processes, cfg.seed)
    log = MetricLog(cfg.log_path, cfg.log_wallclock)
    try:
        while rollout.env_steps < cfg.total_steps:
            ws, returns = rollout.collect()
            learner(ws, t=0, n_steps=ws.time_extent, replay=True)
            parts = a2c_losses(ws, cfg.gamma)
            loss = parts["policy"] + parts["critic"] * cfg.critic_coef - parts["entropy"] * cfg.entropy_coef
            _step(opt, loss, cfg.max_grad_norm)
            log.append(rollout.env_steps, returns, {k: v.item() for k, v in parts.items()})
            if should_stop(cfg, log):
                break
    except BaseException:
        rollout.close()
        log.close()
        raise
    return _finish(cfg, log, rollout, policy, stochastic=False)


def dqn_loss(q_agent, target_agent, batch: Workspace, gamma: float) -> Tensor:
    """Squared TD error on a batch of length-2 windows, masked where s_0 is terminal."""
    online = TemporalAgent(q_agent)
    frozen = TemporalAgent(target_agent)
    target_ws = batch.copy()
    online(batch, t=0, n_steps=2, replay=True)
    with no_grad():
        frozen(target_ws, t=0, n_steps=2, replay=True)
    y = double_dqn_target(
        batch.get("env/reward", 1).data,
        batch.get("env/done", 1).data,
        batch.get("q", 1).data,
        target_ws.get("q", 1).data,
        gamma,
    )
    pred = T.gather(batch.get("q", 0), batch.get("action", 0))
    valid = 1.0 - batch.get("env/done", 0).data
    return masked_mean(T.square(pred - Tensor(y.astype(DTYPE))), valid)


def train_double_dqn(cfg: TrainConfig, q_agent=None) -> MetricLog:
    cfg.validate()
    obs_dim, n_actions = _env_dims(cfg)
    q_agent = q_agent or make_q_agent(cfg.arch, obs_dim, n_actions, cfg.hidden, rng=cfg.seed)
    target = q_agent.clone()
    opt = make_optimizer(cfg.optimizer, q_agent.parameters(), cfg.lr)
    rollout = Rollout(make_env_agent(cfg), q_agent, cfg.n_steps, cfg.num_processes, cfg.seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, 2)
    rng = np.random.default_rng(cfg.seed + 2)
    log = MetricLog(cfg.log_path, cfg.log_wallclock)
    next_sync = cfg.target_update
    try:
        while rollout.env_steps < cfg.total_steps:
            eps = epsilon_at(rollout.env_steps, cfg.eps_start, cfg.eps_end, cfg.eps_decay_steps)
            ws, returns = rollout.collect(epsilon=eps)
            buffer.put(ws, stride=1)
            losses = {}
            if rollout.env_steps >= cfg.learning_starts:
                total = 0.0
                for _ in range(cfg.updates_per_iter):
                    loss = dqn_loss(q_agent, target, buffer.sample(cfg.batch_size, rng), cfg.gamma)
                    _step(opt, loss, cfg.max_grad_norm)
                    total += loss.item()
                losses["td"] = total / cfg.updates_per_iter
            while rollout.env_steps >= next_sync:
                target.copy_from(q_agent)
                next_sync += cfg.target_update
            log.append(rollout.env_steps, returns, losses)
            if should_stop(cfg, log):
                break
    except BaseException:
        rollout.close()
        log.close()
        raise
    return _finish(cfg, log, rollout, q_agent, epsilon=0.0)


def bc_loss(ws: Workspace) -> Tensor:
    """Cross-entropy of replayed logits against stored actions on non-terminal steps."""
    logits = ws.get_full("action_logits")
    n_t, b, n_a = logits.shape
    actions = ws.get_full("action").data.reshape(n_t * b)
    ce = T.cross_entropy(logits.reshape(n_t * b, n_a), actions, reduction="none")
    mask = 1.0 - ws.get_full("env/done").data.reshape(n_t * b)
    return masked_mean(ce, mask)


def train_bc(cfg: TrainConfig, dataset_path, policy=None) -> MetricLog:
    cfg.validate()
    dataset = TrajectoryDataset.load(dataset_path)
    obs_dim = dataset[0].item_shape("env/env_obs")[0]
    _, n_actions = _env_dims(cfg)
    policy = policy or make_policy(cfg.arch, obs_dim, n_actions, cfg.hidden, rng=cfg.seed)
    learner = TemporalAgent(policy)
    opt = make_optimizer(cfg.optimizer, policy.parameters(), cfg.lr)
    log = MetricLog(cfg.log_path, cfg.log_wallclock)
    log.policy = policy
    try:
        for it in range(cfg.bc_iterations):
            ws = dataset.read_workspace()
            learner(ws, t=0, n_steps=ws.time_extent, replay=True)
            loss = bc_loss(ws)
            _step(opt, loss, cfg.max_grad_norm)
            log.append(it + 1, [], {"cross_entropy": loss.item()})
    finally:
        log.close()
    return log


def action_agreement(policy, dataset: TrajectoryDataset) -> float:
    """Fraction of non-terminal dataset states where the greedy action matches the stored one."""
    agent = TemporalAgent(policy.clone())
    hits = total = 0.0
    for ws in dataset.workspaces:
        ws = ws.detach()
        with no_grad():
            agent(ws, t=0, n_steps=ws.time_extent, replay=True)
        greedy = ws.get_full("action_logits").data.argmax(axis=-1)
        stored = ws.get_full("action").data
        live = ws.get_full("env/done").data < 0.5
        hits += float(((greedy == stored) & live).sum())
        total += float(live.sum())
    return hits / max(total, 1.0)


TRAINERS = {"reinforce": train_reinforce, "a2c": train_a2c, "ddqn": train_double_dqn}


def train(algo: str, cfg: TrainConfig, **kwargs) -> MetricLog:
    try:
        fn = TRAINERS[algo]
    except KeyError:
        raise ValueError(f"unknown algorithm {algo!r}; choose from {sorted(TRAINERS)}") from None
    return fn(cfg, **kwargs)


def run_policy(cfg: TrainConfig, policy, n_episodes: int, seed: Optional[int] = None) -> Workspace:
    """Record ``n_episodes`` full episodes (frozen after termination) into one workspace."""
    env = make_env_agent(cfg, n_envs=n_episodes, auto_reset=False)
    agent = TemporalAgent(Agents(env, policy))
    agent.seed(cfg.seed if seed is None else seed)
    ws = Workspace()
    with no_grad():
        agent(ws, t=0, n_steps=env.envs[0].max_steps + 1, stop_variable="env/done")
    return ws
