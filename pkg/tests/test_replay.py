from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blackboard_rl.replay import ReplayBuffer
from blackboard_rl.tensor import Tensor
from blackboard_rl.workspace import Workspace, WorkspaceError


def trace(t, b, offset=0):
    """x[t, b] = offset + 100*b + t so every window is recognisable by value."""
    ws = Workspace()
    x = offset + 100 * np.arange(b)[None, :] + np.arange(t)[:, None]
    ws.set_full("x", Tensor(x.astype(np.float32)))
    ws.set_full("obs", Tensor(np.stack([x, -x], axis=-1).astype(np.float32)))
    return ws


def stored(rb):
    return [tuple(col) for col in rb.windows().get_full("x").data.T.tolist()]


def test_full_length_windows():
    rb = ReplayBuffer(10, 5)
    assert rb.put(trace(5, 2), stride=1) == 2
    assert sorted(stored(rb)) == [(0, 1, 2, 3, 4), (100, 101, 102, 103, 104)]


def test_strided_windows():
    rb = ReplayBuffer(10, 4)
    assert rb.put(trace(6, 1), stride=2) == 2
    assert stored(rb) == [(0, 1, 2, 3), (2, 3, 4, 5)]


def test_fifo_eviction():
    rb = ReplayBuffer(3, 1)
    rb.put(trace(5, 1))
    assert len(rb) == 3
    assert stored(rb) == [(2,), (3,), (4,)]


def test_sample_shape_and_single_window():
    rb = ReplayBuffer(4, 2)
    rb.put(trace(2, 1))
    batch = rb.sample(6, rng=0)
    assert batch.get_full("obs").shape == (2, 6, 2)
    assert set(map(tuple, batch.get_full("x").data.T.tolist())) == {(0, 1)}


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 3), st.integers(1, 12), st.integers(0, 2**31))
def test_samples_are_stored_windows(window, b, stride, capacity, seed):
    rb = ReplayBuffer(capacity, window)
    rb.put(trace(window + 5, b), stride=stride)
    rb.put(trace(window + 2, b, offset=1000), stride=stride)
    members = set(stored(rb))
    batch = rb.sample(16, rng=seed)
    x = batch.get_full("x").data
    np.testing.assert_array_equal(batch.get_full("obs").data[..., 1], -x)
    assert set(map(tuple, x.T.tolist())) <= members


def test_window_multiset_reconstructs_input():
    t, b, w, s = 9, 3, 3, 2
    rb = ReplayBuffer(100, w)
    rb.put(trace(t, b), stride=s)
    # oracle: enumerate windows directly from the generating formula
    expected = Counter(
        tuple(100 * j + o + k for k in range(w)) for j in range(b) for o in range(0, t - w + 1, s)
    )
    assert Counter(stored(rb)) == expected


def test_seeded_sampling_is_deterministic():
    rb = ReplayBuffer(50, 3)
    rb.put(trace(10, 4))
    assert rb.sample(8, rng=7) == rb.sample(8, rng=7)


def test_errors():
    with pytest.raises(ValueError):
        ReplayBuffer(0, 2)
    rb = ReplayBuffer(5, 4)
    with pytest.raises(WorkspaceError):
        rb.sample(1)
    with pytest.raises(WorkspaceError):
        rb.put(trace(3, 1))
    with pytest.raises(ValueError):
        rb.put(trace(5, 1), stride=0)
    rb.put(trace(5, 1))
    other = Workspace()
    other.set_full("y", Tensor(np.zeros((4, 1))))
    with pytest.raises(WorkspaceError):
        rb.put(other)
    ragged = trace(5, 1)
    ragged.set_full("z", Tensor(np.zeros((6, 1))))
    with pytest.raises(WorkspaceError):
        ReplayBuffer(5, 2).put(ragged)


def test_save_and_load(tmp_path):
    rb = ReplayBuffer(6, 2)
    rb.put(trace(5, 2), stride=1)
    rb.save(tmp_path / "buf.wsds")
    back = ReplayBuffer.load(tmp_path / "buf.wsds")
    assert back.windows() == rb.windows()
