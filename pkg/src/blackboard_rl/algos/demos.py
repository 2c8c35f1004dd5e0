"""Gradient-through-environment compositions: model-based control and two cooperating policies."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..agent import Agents, TemporalAgent
from ..envs import DiffEnvAgent
from ..optim import SGD, make_optimizer
from ..tensor import Tensor
from ..workspace import Workspace
from .common import MetricLog, TrainConfig
from .policies import LinearPolicy


def rollout_loss(agent: TemporalAgent, horizon: int, seed: int) -> tuple[Tensor, Workspace]:
    """-mean over the batch of the summed reward of one differentiable rollout."""
    agent.seed(seed)
    ws = Workspace()
    agent(ws, t=0, n_steps=horizon)
    reward = ws.get_full("env/reward")
    return -T.sum(reward) * (1.0 / reward.shape[1]), ws


def demo_model_based(cfg: TrainConfig, iterations: int = 50, train_model: bool = False,
                     state_dim: int = 2, action_dim: int = 2) -> MetricLog:
    """Descend -sum(reward) directly through a differentiable linear world model."""
    env = DiffEnvAgent(state_dim, action_dim, n_envs=cfg.n_envs, rng=cfg.seed)
    policy = LinearPolicy(state_dim, action_dim, rng=cfg.seed + 1)
    agent = TemporalAgent(Agents(env, policy))
    params = policy.parameters() + (env.parameters() if train_model else [])
    opt = SGD(params, lr=cfg.lr)
    log = MetricLog(cfg.log_path, cfg.log_wallclock)
    log.agents = (env, policy)
    try:
        for it in range(iterations):
            loss, _ = rollout_loss(agent, cfg.n_steps, cfg.seed)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            log.append(it + 1, [], {"neg_reward": loss.item()})
    finally:
        log.close()
    return log


def demo_multi_agent(cfg: TrainConfig, iterations: int = 50, freeze_second: bool = False,
                     state_dim: int = 2, action_dim: int = 2) -> MetricLog:
    """Two policies each drive half of the controls; one joint loss trains both."""
    env = DiffEnvAgent(state_dim, action_dim, n_envs=cfg.n_envs, action_names=("action/1", "action/2"), rng=cfg.seed)
    first = LinearPolicy(state_dim, action_dim, output_name="action/1", rng=cfg.seed + 1)
    second = LinearPolicy(state_dim, action_dim, output_name="action/2", rng=cfg.seed + 2)
    agent = TemporalAgent(Agents(env, first, second))
    params = first.parameters() + ([] if freeze_second else second.parameters())
    opt = make_optimizer("sgd", params, cfg.lr)
    log = MetricLog(cfg.log_path, cfg.log_wallclock)
    log.agents = (env, first, second)
    try:
        for it in range(iterations):
            loss, _ = rollout_loss(agent, cfg.n_steps, cfg.seed)
            T.zero_grad(env.parameters() + first.parameters() + second.parameters())
            T.backward(loss)
            log.grad_norms = {
                "first": float(np.abs(first.weight.grad.data).sum()) if first.weight.grad is not None else 0.0,
                "second": float(np.abs(second.weight.grad.data).sum()) if second.weight.grad is not None else 0.0,
            }
            opt.step()
            log.append(it + 1, [], {"neg_reward": loss.item()})
    finally:
        log.close()
    return log
