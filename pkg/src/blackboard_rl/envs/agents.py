"""Environments exposed as agents writing the env/* variables."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .. import tensor as T
from ..agent import TAgent
from ..tensor import DTYPE, Tensor
from .core import EnvCore, InvalidActionError, make_env

ENV_VARIABLES = ("env_obs", "reward", "done", "timestep", "initial_state", "cumulated_reward")


class EnvAgent(TAgent):
    """A batch of ``n_envs`` environments.

    At t=0 every environment is reset.  At t>0 the agent reads ``action`` at
    t-1 and steps each environment.  A finished environment is either reset on
    the following step (``auto_reset``) or frozen: it keeps repeating its
    terminal observation with reward 0 and done=1.
    """

    def __init__(
        self,
        env: Union[str, Callable[[], EnvCore]],
        n_envs: int = 1,
        auto_reset: bool = False,
        action_name: str = "action",
        prefix: str = "env/",
        name: Optional[str] = None,
        **env_kwargs,
    ):
        super().__init__(name=name)
        factory = (lambda: make_env(env, **env_kwargs)) if isinstance(env, str) else env
        self.envs = [factory() for _ in range(n_envs)]
        self.n_envs = n_envs
        self.auto_reset = auto_reset
        self.action_name = action_name
        self.prefix = prefix
        self._obs = None

    @property
    def obs_dim(self) -> int:
        return self.envs[0].obs_dim

    @property
    def n_actions(self) -> Optional[int]:
        return self.envs[0].n_actions

    def _reset_item(self, i):
        self._obs[i] = self.envs[i].reset(self.rng)
        self._reward[i] = 0.0
        self._done[i] = False
        self._timestep[i] = 0
        self._initial[i] = True
        self._cum[i] = 0.0

    def _actions(self, t) -> np.ndarray:
        a = self.get((self.action_name, t - 1)).data
        n_act = self.n_actions
        if n_act is not None:
            if a.shape != (self.n_envs,):
                raise InvalidActionError(f"discrete actions must have shape ({self.n_envs},), got {a.shape}")
            idx = np.rint(a)
            bad = (idx != a) | (idx < 0) | (idx >= n_act)
            if bad.any():
                raise InvalidActionError(f"action {a[bad][0]} outside {{0..{n_act - 1}}}")
            return idx.astype(np.int64)
        want = (self.n_envs, self.envs[0].action_dim)
        if a.shape != want:
            raise InvalidActionError(f"continuous actions must have shape {want}, got {a.shape}")
        return a

    def forward(self, t, **kwargs):
        b = self.n_envs
        if t == 0:
            self._obs = np.zeros((b, self.obs_dim), dtype=DTYPE)
            self._reward = np.zeros(b, dtype=DTYPE)
            self._done = np.zeros(b, dtype=bool)
            self._timestep = np.zeros(b, dtype=np.int64)
            self._initial = np.zeros(b, dtype=bool)
            self._cum = np.zeros(b, dtype=DTYPE)
            for i in range(b):
                self._reset_item(i)
        else:
            if self._obs is None:
                raise RuntimeError(f"{self._label()}: environments were never reset; execute at t=0 first")
            actions = self._actions(t)
            for i in range(b):
                if self._done[i]:
                    if self.auto_reset:
                        self._reset_item(i)
                    else:
                        self._reward[i] = 0.0
                        self._initial[i] = False
                    continue
                obs, r, d = self.envs[i].step(actions[i])
                self._obs[i] = obs
                self._reward[i] = r
                self._done[i] = d
                self._timestep[i] += 1
                self._initial[i] = False
                self._cum[i] += r
        p = self.prefix
        self.set((p + "env_obs", t), Tensor(self._obs.copy()))
        self.set((p + "reward", t), Tensor(self._reward.copy()))
        self.set((p + "done", t), Tensor(self._done.astype(DTYPE)))
        self.set((p + "timestep", t), Tensor(self._timestep.astype(DTYPE)))
        self.set((p + "initial_state", t), Tensor(self._initial.astype(DTYPE)))
        self.set((p + "cumulated_reward", t), Tensor(self._cum.copy()))


class DiffEnvAgent(TAgent):
    """Differentiable linear world model.

    With row-vector states, ``s' = s @ A + sum_i a_i @ B_i`` and the reward
    is ``-|s'|^2``.  Every write stays on the tape, so a loss on env/reward
    backpropagates into the policies that produced the actions and into the
    dynamics parameters themselves.
    """

    def __init__(
        self,
        state_dim: int = 2,
        action_dim: int = 2,
        n_envs: int = 4,
        action_names: Sequence[str] = ("action",),
        A=None,
        B=None,
        init_scale: float = 1.0,
        prefix: str = "env/",
        rng=None,
        name: Optional[str] = None,
    ):
        super().__init__(name=name)
        init = np.random.default_rng(rng)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_envs = n_envs
        self.action_names = list(action_names)
        a = np.eye(state_dim) if A is None else np.asarray(A)
        self.A = Tensor(np.asarray(a, dtype=DTYPE), requires_grad=True)
        if B is None:
            B = [init.normal(0, 0.5, (action_dim, state_dim)) for _ in self.action_names]
        elif len(self.action_names) == 1 and np.ndim(B) == 2:
            B = [B]
        self.B = [Tensor(np.asarray(b, dtype=DTYPE), requires_grad=True) for b in B]
        self.init_scale = init_scale
        self.prefix = prefix

    def forward(self, t, **kwargs):
        p, b = self.prefix, self.n_envs
        if t == 0:
            s = Tensor(self.rng.normal(0, self.init_scale, (b, self.state_dim)).astype(DTYPE))
            reward = Tensor(np.zeros(b, dtype=DTYPE))
            cum = reward
        else:
            prev = self.get((p + "env_obs", t - 1))
            s = T.matmul(prev, self.A)
            for name, bm in zip(self.action_names, self.B):
                a = self.get((name, t - 1))
                if a.shape != (b, self.action_dim):
                    raise InvalidActionError(f"{name!r} must have shape {(b, self.action_dim)}, got {a.shape}")
                s = s + T.matmul(a, bm)
            reward = -T.sum(T.square(s), axis=-1)
            cum = self.get((p + "cumulated_reward", t - 1)) + reward
        self.set((p + "env_obs", t), s)
        self.set((p + "reward", t), reward)
        self.set((p + "done", t), Tensor(np.zeros(b, dtype=DTYPE)))
        self.set((p + "timestep", t), Tensor(np.full(b, t, dtype=DTYPE)))
        self.set((p + "initial_state", t), Tensor(np.full(b, 1.0 if t == 0 else 0.0, dtype=DTYPE)))
        self.set((p + "cumulated_reward", t), cum)
