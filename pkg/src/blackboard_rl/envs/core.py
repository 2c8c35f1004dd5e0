"""Single-instance environment dynamics.  Batching is done by EnvAgent."""

from __future__ import annotations

import math
import time
from typing import Optional

import numpy as np


class InvalidActionError(ValueError):
    pass


class EnvCore:
    obs_dim: int
    n_actions: Optional[int] = None  # discrete action count; None for continuous
    action_dim: Optional[int] = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


class GridWorld(EnvCore):
    """size x size grid; actions 0=up 1=down 2=left 3=right.

    Each move costs -1, except the move that reaches the goal, which pays +10
    and ends the episode.  Bumping into a wall leaves the agent in place.
    """

    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
    n_actions = 4

    def __init__(self, size: int = 3, start=(0, 0), goal=None, max_steps: int = 50, random_start: bool = False):
        self.size = size
        self.start = tuple(start)
        self.goal = tuple(goal) if goal is not None else (size - 1, size - 1)
        self.max_steps = max_steps
        self.random_start = random_start
        self.obs_dim = size * size
        self.pos = self.start
        self.steps = 0

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.obs_dim, dtype=np.float32)
        obs[self.pos[0] * self.size + self.pos[1]] = 1.0
        return obs

    def reset(self, rng):
        if self.random_start:
            cells = [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) != self.goal]
            self.pos = cells[int(rng.integers(len(cells)))]
        else:
            self.pos = self.start
        self.steps = 0
        return self.observe()

    def step(self, action):
        dr, dc = self.MOVES[int(action)]
        r = min(max(self.pos[0] + dr, 0), self.size - 1)
        c = min(max(self.pos[1] + dc, 0), self.size - 1)
        self.pos = (r, c)
        self.steps += 1
        if self.pos == self.goal:
            return self.observe(), 10.0, True
        return self.observe(), -1.0, self.steps >= self.max_steps

    def optimal_return(self) -> float:
        dist = abs(self.goal[0] - self.start[0]) + abs(self.goal[1] - self.start[1])
        return -(dist - 1) + 10.0


class CartPole(EnvCore):
    """Classic cart-pole, explicit Euler with dt=0.02, reward 1 per step."""

    n_actions = 2
    obs_dim = 4
    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_threshold = 12 * 2 * math.pi / 360
    x_threshold = 2.4

    def __init__(self, max_steps: int = 200):
        self.max_steps = max_steps
        self.state = np.zeros(4)
        self.steps = 0

    def reset(self, rng):
        self.state = rng.uniform(-0.05, 0.05, size=4)
        self.steps = 0
        return self.state.astype(np.float32)

    def step(self, action):
        x, x_dot, theta, theta_dot = self.state
        force = self.force_mag if int(action) == 1 else -self.force_mag
        total_mass = self.masscart + self.masspole
        polemass_length = self.masspole * self.length
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos / total_mass
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * x_acc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * theta_acc
        self.state = np.array([x, x_dot, theta, theta_dot])
        self.steps += 1
        failed = abs(x) > self.x_threshold or abs(theta) > self.theta_threshold
        return self.state.astype(np.float32), 1.0, bool(failed or self.steps >= self.max_steps)


class SleepEnv(EnvCore):
    """Does nothing but sleep; used to measure parallel throughput."""

    n_actions = 2
    obs_dim = 1

    def __init__(self, delay: float = 1e-3, max_steps: int = 10**9):
        self.delay = delay
        self.max_steps = max_steps
        self.steps = 0

    def reset(self, rng):
        self.steps = 0
        return np.zeros(1, dtype=np.float32)

    def step(self, action):
        time.sleep(self.delay)
        self.steps += 1
        return np.zeros(1, dtype=np.float32), 0.0, self.steps >= self.max_steps


ENVS = {"gridworld": GridWorld, "cartpole": CartPole, "sleep": SleepEnv}


def make_env(name: str, **kwargs) -> EnvCore:
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**kwargs)
