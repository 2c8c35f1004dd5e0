"""Agents: units of computation that communicate only through a workspace.

An agent is executed with ``agent(workspace, **kwargs)``.  While it runs it
is bound to that workspace and reads/writes through ``self.get`` and
``self.set``; the workspace never appears in ``forward``'s signature.
"""

from __future__ import annotations

import copy
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


class ReentrancyError(RuntimeError):
    pass


class Agent(Module):
    def __init__(self, name: Optional[str] = None):
        self.name = name
        self.workspace = None
        self.rng = np.random.default_rng()

    def __call__(self, workspace, **kwargs):
        if self.workspace is not None:
            raise ReentrancyError(
                f"agent {self._label()} is already executing; clone it to run on another workspace"
            )
        self.workspace = workspace
        try:
            return self.forward(**kwargs)
        finally:
            self.workspace = None

    def forward(self, **kwargs):
        raise NotImplementedError

    def _label(self) -> str:
        return self.name or type(self).__name__

    # tuple access: get(("x", t)) for one step, get("x") for the full series
    def get(self, key) -> Tensor:
        if isinstance(key, tuple):
            name, t = key
            return self.workspace.get(name, t)
        return self.workspace.get_full(key)

    def set(self, key, value) -> None:
        if isinstance(key, tuple):
            name, t = key
            self.workspace.set(name, t, value)
        else:
            self.workspace.set_full(key, value)

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def sub_agents(self) -> list["Agent"]:
        return []

    def __deepcopy__(self, memo):
        if self.workspace is not None:
            raise ReentrancyError(f"cannot copy agent {self._label()} while it is executing")
        cls = type(self)
        new = cls.__new__(cls)
        memo[id(self)] = new
        for k, v in vars(self).items():
            setattr(new, k, copy.deepcopy(v, memo))
        return new


class TAgent(Agent):
    """An agent whose forward is anchored at one timestep ``t``."""

    def __call__(self, workspace, **kwargs):
        if "t" not in kwargs:
            raise TypeError(f"{self._label()} is a TAgent and must be executed with t=...")
        return super().__call__(workspace, **kwargs)

    def forward(self, t: int, **kwargs):
        raise NotImplementedError


class Agents(Agent):
    """Executes its members one after the other on the same workspace."""

    def __init__(self, *agents: Agent, name: Optional[str] = None):
        super().__init__(name=name)
        if not agents:
            raise ValueError("Agents needs at least one agent")
        for a in agents:
            if not isinstance(a, Agent):
                raise TypeError(f"{a!r} is not an Agent")
        self.agents = list(agents)

    def forward(self, **kwargs):
        for a in self.agents:
            a(self.workspace, **kwargs)

    def seed(self, seed: int) -> None:
        super().seed(seed)
        for k, a in enumerate(self.agents):
            a.seed(seed + k)

    def sub_agents(self):
        return list(self.agents)


def sequential(agents) -> Agents:
    return Agents(*agents)


class TemporalAgent(Agent):
    """Runs an agent at t, t+1, ... until n_steps is exhausted or stop_variable is all true."""

    def __init__(self, agent: Agent, name: Optional[str] = None):
        super().__init__(name=name)
        if not isinstance(agent, Agent):
            raise TypeError(f"{agent!r} is not an Agent")
        self.agent = agent

    def forward(self, t: int = 0, n_steps: Optional[int] = None, stop_variable: Optional[str] = None, **kwargs):
        if n_steps is None and stop_variable is None:
            raise ValueError("TemporalAgent needs n_steps, stop_variable, or both")
        _t = t
        while True:
            self.agent(self.workspace, t=_t, **kwargs)
            if stop_variable is not None:
                s = self.workspace.get(stop_variable, _t)
                if bool((s.data > 0.5).all()):
                    break
            _t += 1
            if n_steps is not None and _t >= t + n_steps:
                break

    def seed(self, seed: int) -> None:
        super().seed(seed)
        self.agent.seed(seed)

    def sub_agents(self):
        return [self.agent]


def temporal(agent: Agent) -> TemporalAgent:
    return TemporalAgent(agent)


def execute(agent: Agent, workspace, **kwargs):
    return agent(workspace, **kwargs)


def replay(agent: Agent, workspace, **kwargs):
    """Run an agent over a workspace that already holds a trace.

    This is plain execution: variables the agent writes are overwritten,
    everything else is left as it was.
    """
    return agent(workspace, **kwargs)


# --------------------------------------------------------------------------
# small agents used in examples and tests
# --------------------------------------------------------------------------


class FillAgent(Agent):
    """Writes a constant into a variable for n_steps timesteps."""

    def forward(self, var_name: str, value: float, n_steps: int, batch_size: int = 1, **kwargs):
        for t in range(n_steps):
            self.set((var_name, t), T.Tensor(np.full((batch_size,), value, dtype=np.float32)))


class LinearAgent(TAgent):
    def __init__(self, n_input: int, n_output: int, input_name="x", output_name="y", rng=None, name=None):
        super().__init__(name=name)
        self.model = Linear(n_input, n_output, rng)
        self.input_name = input_name
        self.output_name = output_name

    def forward(self, t, **kwargs):
        x = self.get((self.input_name, t))
        self.set((self.output_name, t), self.model(x))


class CrossEntropyAgent(Agent):
    """Cross entropy between full 'predicted_y' [T,B,C] logits and 'y' [T,B] labels.

    The workspace is batched, so the result is written as ``loss`` at t=0
    with one entry per batch item (the time-averaged loss of that item);
    its mean is the overall cross entropy.
    """

    def __init__(self, logits_name="predicted_y", target_name="y", output_name="loss", name=None):
        super().__init__(name=name)
        self.logits_name = logits_name
        self.target_name = target_name
        self.output_name = output_name

    def forward(self, **kwargs):
        logits = self.get(self.logits_name)
        y = self.get(self.target_name)
        n_t, b, c = logits.shape
        per = T.cross_entropy(logits.reshape(n_t * b, c), y.reshape(n_t * b), reduction="none")
        per_item = T.mean(per.reshape(n_t, b), axis=0)
        self.set(self.output_name, per_item.reshape(1, b))
