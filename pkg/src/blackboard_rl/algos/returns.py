"""Return and target computations on plain arrays (time-major ``[T, B]``)."""

from __future__ import annotations

from typing import Optional

import numpy as np


def return_to_go(rewards, gamma: float, continues: Optional[np.ndarray] = None) -> np.ndarray:
    """G[t] = r[t] + gamma * continues[t] * G[t+1], with G past the last step = 0.

    ``continues[t]`` is 0 where step t+1 starts a new episode, so no return
    leaks across an episode boundary.
    """
    r = np.asarray(rewards, dtype=np.float64)
    c = np.ones_like(r) if continues is None else np.asarray(continues, dtype=np.float64)
    out = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        running = r[t] + gamma * c[t] * running
        out[t] = running
    return out


def transition_views(reward, done):
    """Align env outputs with the actions that caused them.

    Returns ``(r_next, done_next, valid)``, each ``[T-1, B]``: the reward and
    done flag that followed the action taken at t, and whether step t was a
    live state (not the frozen or just-finished terminal of an episode).
    """
    reward = np.asarray(reward, dtype=np.float64)
    done = np.asarray(done, dtype=np.float64)
    return reward[1:], done[1:], 1.0 - done[:-1]


def one_step_advantage(r_next, done_next, values, gamma: float) -> np.ndarray:
    """A[t] = r[t+1] + gamma * (1 - done[t+1]) * V[t+1] - V[t] for t < T-1."""
    v = np.asarray(values, dtype=np.float64)
    return np.asarray(r_next) + gamma * (1.0 - np.asarray(done_next)) * v[1:] - v[:-1]


def double_dqn_target(reward, done, q_online_next, q_target_next, gamma: float) -> np.ndarray:
    """y = r + gamma * (1 - done) * Q_target(s', argmax_a Q_online(s', a))."""
    q_online_next = np.asarray(q_online_next)
    q_target_next = np.asarray(q_target_next)
    best = q_online_next.argmax(axis=-1)
    bootstrap = np.take_along_axis(q_target_next, best[..., None], axis=-1)[..., 0]
    return np.asarray(reward, dtype=np.float64) + gamma * (1.0 - np.asarray(done, dtype=np.float64)) * bootstrap
