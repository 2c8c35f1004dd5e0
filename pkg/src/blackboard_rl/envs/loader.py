from __future__ import annotations

from typing import Optional

import numpy as np

from ..agent import TAgent
from ..tensor import DTYPE, Tensor


class ArrayDataset:
    def __init__(self, x, y):
        self.x = np.asarray(x, dtype=DTYPE)
        self.y = np.asarray(y, dtype=DTYPE)
        if len(self.x) != len(self.y):
            raise ValueError(f"x has {len(self.x)} items but y has {len(self.y)}")
        if len(self.x) == 0:
            raise ValueError("empty dataset")

    def __len__(self):
        return len(self.x)


class DataLoaderAgent(TAgent):
    """Writes one batch of ``data/x`` and ``data/y`` per execution.

    Items are visited in a fresh random order each epoch.  With ``wrap`` a
    batch may straddle two epochs, so batches are never short; without it a
    partial tail is dropped and a new epoch begins.
    """

    def __init__(self, dataset: ArrayDataset, batch_size: int, wrap: bool = True, shuffle: bool = True,
                 x_name: str = "data/x", y_name: str = "data/y", name: Optional[str] = None):
        super().__init__(name=name)
        if batch_size > len(dataset) and not wrap:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {len(dataset)} and wrap is off")
        self.dataset = dataset
        self.batch_size = batch_size
        self.wrap = wrap
        self.shuffle = shuffle
        self.x_name = x_name
        self.y_name = y_name
        self._perm = None
        self._cursor = 0
        self.epoch = 0

    def _new_epoch(self):
        n = len(self.dataset)
        self._perm = self.rng.permutation(n) if self.shuffle else np.arange(n)
        self._cursor = 0
        self.epoch += 1

    def next_indices(self) -> np.ndarray:
        n, b = len(self.dataset), self.batch_size
        if not self.wrap:
            if self._perm is None or self._cursor + b > n:
                self._new_epoch()
            idx = self._perm[self._cursor : self._cursor + b]
            self._cursor += b
            return idx
        parts, need = [], b
        while need:
            if self._perm is None or self._cursor >= n:
                self._new_epoch()
            take = min(need, n - self._cursor)
            parts.append(self._perm[self._cursor : self._cursor + take])
            self._cursor += take
            need -= take
        return np.concatenate(parts)

    def forward(self, t, **kwargs):
        idx = self.next_indices()
        self.set((self.x_name, t), Tensor(self.dataset.x[idx]))
        self.set((self.y_name, t), Tensor(self.dataset.y[idx]))
