"""A replay buffer of fixed-length trajectory windows, built on workspaces."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import DTYPE, Tensor
from .workspace import Workspace, WorkspaceError, load_dataset, save_dataset


class ReplayBuffer:
    """Ring buffer of single-item windows of length ``window``.

    :meth:`put` cuts every batch item of a workspace into sliding windows;
    :meth:`sample` draws windows uniformly with replacement and stacks them
    back into a ``[window, m, ...]`` workspace.
    """

    def __init__(self, capacity: int, window: int):
        if capacity < 1 or window < 1:
            raise ValueError("capacity and window must be positive")
        self.capacity = capacity
        self.window = window
        self._store: Optional[dict[str, np.ndarray]] = None
        self._cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def _allocate(self, ws: Workspace):
        self._store = {
            name: np.zeros((self.capacity, self.window) + ws.item_shape(name), dtype=DTYPE) for name in ws.keys()
        }

    def put(self, ws: Workspace, stride: int = 1) -> int:
        if stride < 1:
            raise ValueError("stride must be positive")
        names = ws.keys()
        if not names:
            raise WorkspaceError("cannot put an empty workspace")
        full = {name: ws.get_full(name).data for name in names}
        lengths = {a.shape[0] for a in full.values()}
        if len(lengths) != 1:
            raise WorkspaceError(f"variables have different time extents {sorted(lengths)}")
        n_t = lengths.pop()
        if n_t < self.window:
            raise WorkspaceError(f"time extent {n_t} is shorter than the window length {self.window}")
        if self._store is None:
            self._allocate(ws)
        elif set(names) != set(self._store) or any(
            self._store[n].shape[2:] != ws.item_shape(n) for n in names
        ):
            raise WorkspaceError("workspace variables do not match the buffer contents")
        starts = range(0, n_t - self.window + 1, stride)
        count = 0
        for b in range(ws.batch_size):
            for o in starts:
                for name, arr in full.items():
                    self._store[name][self._cursor] = arr[o : o + self.window, b]
                self._cursor = (self._cursor + 1) % self.capacity
                self.size = min(self.size + 1, self.capacity)
                count += 1
        return count

    def _order(self) -> np.ndarray:
        """Storage slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._cursor) % self.capacity

    def _gather(self, slots: np.ndarray) -> Workspace:
        ws = Workspace()
        for name, arr in self._store.items():
            ws.set_full(name, Tensor(np.ascontiguousarray(np.swapaxes(arr[slots], 0, 1))))
        return ws

    def sample(self, m: int, rng=None) -> Workspace:
        if self.size == 0:
            raise WorkspaceError("cannot sample from an empty replay buffer")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        picks = rng.integers(0, self.size, size=m)
        return self._gather(self._order()[picks])

    def windows(self) -> Workspace:
        """Every stored window as one workspace, oldest first."""
        if self.size == 0:
            raise WorkspaceError("replay buffer is empty")
        return self._gather(self._order())

    def save(self, path) -> None:
        save_dataset(path, [self.windows()])

    @classmethod
    def load(cls, path, capacity: Optional[int] = None) -> "ReplayBuffer":
        workspaces = load_dataset(path)
        window = workspaces[0].time_extent
        total = sum(w.batch_size for w in workspaces)
        rb = cls(capacity or max(total, 1), window)
        for w in workspaces:
            rb.put(w, stride=window)
        return rb
