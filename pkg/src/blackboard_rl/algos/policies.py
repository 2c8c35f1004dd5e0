"""Policy, critic and value agents shared by the trainers.

Every discrete policy writes ``action``, ``action_logp``, ``action_logits``
and ``action_entropy`` at its timestep.  Executed with ``replay=True`` it
keeps the ``action`` already in the workspace and only recomputes the
other three, which is how trainers get differentiable log-probabilities for
actions collected earlier (possibly in other processes).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .. import tensor as T
from ..agent import Agents, TAgent
from ..nn import MLP, Linear
from ..tensor import DTYPE, Tensor


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs.astype(np.float64), axis=-1)
    return np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=-1), probs.shape[-1] - 1)


class CategoricalPolicy(TAgent):
    def __init__(self, n_in: int, n_actions: int, hidden: int = 64, input_name: str = "env/env_obs",
                 rng=None, name: Optional[str] = None):
        super().__init__(name=name)
        self.model = MLP([n_in, hidden, n_actions], rng=rng, out_scale=0.1)
        self.input_name = input_name
        self.n_actions = n_actions

    def forward(self, t, stochastic: bool = True, replay: bool = False, **kwargs):
        x = self.get((self.input_name, t))
        logits = self.model(x)
        logp_all = T.log_softmax(logits)
        if replay:
            action = self.get(("action", t))
        else:
            probs = np.exp(logp_all.data)
            if stochastic:
                idx = sample_categorical(probs, self.rng)
            else:
                idx = probs.argmax(axis=-1)
            action = Tensor(idx.astype(DTYPE))
            self.set(("action", t), action)
        self.set(("action_logits", t), logits)
        self.set(("action_logp", t), T.gather(logp_all, action))
        entropy = -T.sum(T.exp(logp_all) * logp_all, axis=-1)
        self.set(("action_entropy", t), entropy)


class RecurrentAgent(TAgent):
    """z_t = tanh(W [obs_t, z_{t-1}] + b), with z reset to zero at episode starts.

    A state already present at t=0 (carried over from a previous rollout or
    stored in a replayed window) is kept rather than recomputed.
    """

    def __init__(self, n_in: int, n_hidden: int = 32, input_name: str = "env/env_obs", output_name: str = "z",
                 reset_name: str = "env/initial_state", rng=None, name: Optional[str] = None):
        super().__init__(name=name)
        self.cell = Linear(n_in + n_hidden, n_hidden, rng)
        self.n_hidden = n_hidden
        self.input_name = input_name
        self.output_name = output_name
        self.reset_name = reset_name

    def forward(self, t, **kwargs):
        obs = self.get((self.input_name, t))
        if t == 0:
            if self.workspace.is_written(self.output_name, 0):
                return
            prev = Tensor(np.zeros((obs.shape[0], self.n_hidden), dtype=DTYPE))
        else:
            prev = self.get((self.output_name, t - 1))
            if self.workspace.is_written(self.reset_name, t):
                keep = 1.0 - self.get((self.reset_name, t)).data
                prev = prev * Tensor(keep[:, None].astype(DTYPE))
        z = T.tanh(self.cell(T.concat([obs, prev], axis=-1)))
        self.set((self.output_name, t), z)


class CriticAgent(TAgent):
    def __init__(self, n_in: int, hidden: int = 64, input_name: str = "env/env_obs", output_name: str = "critic",
                 rng=None, name: Optional[str] = None):
        super().__init__(name=name)
        self.model = MLP([n_in, hidden, 1], rng=rng)
        self.input_name = input_name
        self.output_name = output_name

    def forward(self, t, **kwargs):
        v = self.model(self.get((self.input_name, t)))
        self.set((self.output_name, t), v.reshape(v.shape[0]))


class QAgent(TAgent):
    """Writes Q-values ``q`` [B, A] and an epsilon-greedy ``action``."""

    def __init__(self, n_in: int, n_actions: int, hidden: int = 64, input_name: str = "env/env_obs",
                 rng=None, name: Optional[str] = None):
        super().__init__(name=name)
        self.model = MLP([n_in, hidden, n_actions], activation="relu", rng=rng)
        self.input_name = input_name
        self.n_actions = n_actions

    def forward(self, t, epsilon: float = 0.0, replay: bool = False, **kwargs):
        q = self.model(self.get((self.input_name, t)))
        self.set(("q", t), q)
        if replay:
            return
        greedy = q.data.argmax(axis=-1)
        b = greedy.shape[0]
        explore = self.rng.random(b) < epsilon
        random_actions = self.rng.integers(0, self.n_actions, size=b)
        self.set(("action", t), Tensor(np.where(explore, random_actions, greedy).astype(DTYPE)))


class RandomPolicy(TAgent):
    def __init__(self, n_actions: int, batch_from: str = "env/env_obs", name: Optional[str] = None):
        super().__init__(name=name)
        self.n_actions = n_actions
        self.batch_from = batch_from

    def forward(self, t, **kwargs):
        b = self.get((self.batch_from, t)).shape[0]
        self.set(("action", t), Tensor(self.rng.integers(0, self.n_actions, size=b).astype(DTYPE)))


class GridExpert(TAgent):
    """Shortest-path expert for GridWorld: go right until the goal column, then down."""

    def __init__(self, size: int = 3, goal=None, name: Optional[str] = None):
        super().__init__(name=name)
        self.size = size
        self.goal = tuple(goal) if goal is not None else (size - 1, size - 1)

    def act(self, obs: np.ndarray) -> np.ndarray:
        cell = obs.argmax(axis=-1)
        row, col = cell // self.size, cell % self.size
        gr, gc = self.goal
        return np.select(
            [col < gc, col > gc, row < gr, row > gr],
            [3, 2, 1, 0],
            default=1,
        ).astype(DTYPE)

    def forward(self, t, **kwargs):
        self.set(("action", t), Tensor(self.act(self.get(("env/env_obs", t)).data)))


class CartPoleExpert(TAgent):
    """Push toward the side the pole is falling to."""

    def forward(self, t, **kwargs):
        obs = self.get(("env/env_obs", t)).data
        score = obs[:, 2] + 0.5 * obs[:, 3] + 0.01 * obs[:, 0] + 0.1 * obs[:, 1]
        self.set(("action", t), Tensor((score > 0).astype(DTYPE)))


class LinearPolicy(TAgent):
    """Deterministic continuous policy ``a = tanh(s @ W)``."""

    def __init__(self, state_dim: int, action_dim: int, input_name: str = "env/env_obs",
                 output_name: str = "action", rng=None, scale: float = 0.1, name: Optional[str] = None):
        super().__init__(name=name)
        init = np.random.default_rng(rng)
        self.weight = Tensor(init.normal(0, scale, (state_dim, action_dim)).astype(DTYPE), requires_grad=True)
        self.input_name = input_name
        self.output_name = output_name

    def forward(self, t, **kwargs):
        s = self.get((self.input_name, t))
        self.set((self.output_name, t), T.tanh(T.matmul(s, self.weight)))


def make_policy(arch: str, obs_dim: int, n_actions: int, hidden: int = 64, rng=None):
    """A discrete policy; ``rnn`` composes a RecurrentAgent in front of the same head."""
    rng = np.random.default_rng(rng)
    if arch == "mlp":
        return CategoricalPolicy(obs_dim, n_actions, hidden, rng=rng)
    if arch == "rnn":
        return Agents(
            RecurrentAgent(obs_dim, hidden, rng=rng),
            CategoricalPolicy(hidden, n_actions, hidden, input_name="z", rng=rng),
        )
    raise ValueError(f"unknown policy architecture {arch!r}")


def make_q_agent(arch: str, obs_dim: int, n_actions: int, hidden: int = 64, rng=None):
    rng = np.random.default_rng(rng)
    if arch == "mlp":
        return QAgent(obs_dim, n_actions, hidden, rng=rng)
    if arch == "rnn":
        return Agents(RecurrentAgent(obs_dim, hidden, rng=rng), QAgent(hidden, n_actions, hidden, input_name="z", rng=rng))
    raise ValueError(f"unknown policy architecture {arch!r}")
