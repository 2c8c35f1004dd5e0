import io
import struct
import zlib

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from blackboard_rl import tensor as T
from blackboard_rl.tensor import DetachedError, Tensor
from blackboard_rl.workspace import (
    BadMagicError,
    BatchMismatchError,
    ChecksumError,
    GapError,
    ItemShapeError,
    TrajectoryDataset,
    TruncatedError,
    UnknownVariableError,
    UnwrittenTimestepError,
    VersionMismatchError,
    Workspace,
    WorkspaceError,
    dataset_from_bytes,
    dataset_to_bytes,
    load_any,
)

names = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12
)


@st.composite
def workspaces(draw, max_vars=4):
    b = draw(st.integers(1, 8))
    ws = Workspace()
    for name in draw(st.lists(names, min_size=0, max_size=max_vars, unique=True)):
        t = draw(st.integers(1, 16))
        item = tuple(draw(st.lists(st.integers(1, 3), min_size=0, max_size=3)))
        data = draw(hnp.arrays(np.float32, (t, b) + item, elements=st.floats(width=32, allow_nan=True)))
        ws.set_full(name, Tensor(data))
    return ws


def _oracle_sub(w: Workspace, idx, t0, t1):
    """Element-by-element extraction, independent of subworkspace."""
    out = {}
    for name in w.keys():
        full = w.get_full(name).data
        block = np.empty((t1 - t0, len(idx)) + full.shape[2:], dtype=np.float32)
        for i, t in enumerate(range(t0, t1)):
            for j, b in enumerate(idx):
                block[i, j] = full[t, b]
        out[name] = block
    return out


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(workspaces())
def test_roundtrip_bit_exact(ws):
    blob = ws.to_bytes()
    back = Workspace.from_bytes(blob)
    assert back == ws
    for name in ws.keys():
        assert back.get_full(name).data.tobytes() == ws.get_full(name).data.tobytes()
    assert back.to_bytes() == blob


@settings(max_examples=100, deadline=None)
@given(workspaces())
def test_full_matches_get(ws):
    for name in ws.keys():
        full = ws.get_full(name).data
        for t in range(ws.time_size(name)):
            assert full[t].tobytes() == ws.get(name, t).data.tobytes()


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_subworkspace_composition_law(data):
    b = data.draw(st.integers(1, 6))
    t = data.draw(st.integers(2, 10))
    ws = Workspace()
    ws.set_full("x", Tensor(np.arange(t * b * 2, dtype=np.float32).reshape(t, b, 2)))
    ws.set_full("y", Tensor(np.random.default_rng(t).normal(size=(t, b)).astype(np.float32)))
    a = data.draw(st.integers(0, t - 1))
    e = data.draw(st.integers(a + 1, t))
    idx_i = data.draw(st.lists(st.integers(0, b - 1), min_size=1, max_size=5))
    c = data.draw(st.integers(0, e - a - 1))
    d = data.draw(st.integers(c + 1, e - a))
    idx_j = data.draw(st.lists(st.integers(0, len(idx_i) - 1), min_size=1, max_size=5))
    nested = ws.subworkspace(idx_i, a, e).subworkspace(idx_j, c, d)
    direct = ws.subworkspace([idx_i[j] for j in idx_j], a + c, a + d)
    assert nested == direct
    oracle = _oracle_sub(ws, [idx_i[j] for j in idx_j], a + c, a + d)
    for name, block in oracle.items():
        np.testing.assert_array_equal(direct.get_full(name).data, block)


def test_six_steps_of_four_by_three():
    ws = Workspace()
    for t in range(6):
        ws.set("x", t, Tensor(np.full((4, 3), t, dtype=np.float32)))
    assert ws.get_full("x").shape == (6, 4, 3)
    ws2 = Workspace()
    ws2.set("x", 5, Tensor(np.ones((4, 3))))
    assert ws2.time_size("x") == 6
    with pytest.raises(GapError):
        ws2.get_full("x")


def test_set_full_then_get_slice():
    ws = Workspace()
    loss = np.random.default_rng(0).normal(size=(12, 4, 6)).astype(np.float32)
    ws.set_full("loss", Tensor(loss))
    np.testing.assert_array_equal(ws.get("loss", 3).data, loss[3])
    assert ws.time_size("loss") == 12


def test_last_write_wins():
    ws = Workspace()
    ws.set("x", 0, Tensor(np.zeros((4, 3))))
    ws.set("x", 0, Tensor(np.ones((4, 3))))
    np.testing.assert_array_equal(ws.get("x", 0).data, np.ones((4, 3)))


def test_write_errors():
    ws = Workspace()
    ws.set("x", 0, Tensor(np.zeros((4, 3))))
    with pytest.raises(BatchMismatchError, match="5"):
        ws.set("y", 0, Tensor(np.zeros((5, 2))))
    with pytest.raises(ItemShapeError):
        ws.set("x", 1, Tensor(np.zeros((4, 2))))
    with pytest.raises(BatchMismatchError):
        ws.set_full("z", Tensor(np.zeros((3, 2, 5))))


def test_read_errors_are_distinct():
    ws = Workspace()
    ws.set("x", 0, Tensor(np.zeros((2,))))
    ws.set("x", 1, Tensor(np.zeros((2,))))
    with pytest.raises(UnwrittenTimestepError):
        ws.get("x", 2)
    with pytest.raises(UnknownVariableError):
        ws.get("nope", 0)
    with pytest.raises(UnknownVariableError):
        ws.get_full("nope")
    ws.set("g", 0, Tensor(np.zeros((2,))))
    ws.set("g", 2, Tensor(np.zeros((2,))))
    with pytest.raises(GapError, match="1"):
        ws.get_full("g")


def test_single_step_full_shape():
    ws = Workspace()
    ws.set("x", 0, Tensor(np.zeros((3, 2))))
    assert ws.get_full("x").shape == (1, 3, 2)


def test_set_full_time_extent():
    ws = Workspace()
    ws.set_full("z", Tensor(np.zeros((3, 2, 5))))
    assert ws.time_size("z") == 3


def test_get_aliases_store_and_gradients_flow():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    ws = Workspace()
    ws.set("h", 0, T.matmul(Tensor(np.eye(2)), w))
    ws.set("h", 1, T.tanh(ws.get("h", 0)))
    T.backward(T.sum(ws.get_full("h")))
    assert w.grad is not None and np.abs(w.grad.data).sum() > 0


def test_detach():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    ws = Workspace()
    ws.set("h", 0, w * 2.0)
    d = ws.detach()
    assert d == ws
    assert not d.get("h", 0).requires_grad
    with pytest.raises(DetachedError):
        T.backward(T.sum(d.get("h", 0)))
    assert Workspace().detach() == Workspace()


def test_subworkspace_examples():
    ws = Workspace()
    ws.set_full("x", Tensor(np.random.default_rng(1).normal(size=(10, 4, 3))))
    assert ws.subworkspace(range(4), 0, 10) == ws.detach()
    assert ws.subworkspace([1], 2, 4).get_full("x").shape == (2, 1, 3)
    with pytest.raises(WorkspaceError):
        ws.subworkspace([4], 0, 2)
    with pytest.raises(WorkspaceError):
        ws.subworkspace([0], 5, 11)


def test_tail():
    ws = Workspace()
    ws.set_full("x", Tensor(np.arange(12, dtype=np.float32).reshape(6, 2)))
    tail = ws.tail(2)
    np.testing.assert_array_equal(tail.get_full("x").data, [[8, 9], [10, 11]])


def test_device_is_metadata_only():
    ws = Workspace()
    ws.set("x", 0, Tensor(np.ones((2,))))
    moved = ws.to("cuda:0")
    assert moved.device == "cuda:0" and ws.device == "cpu"
    assert moved == ws


def test_empty_roundtrip():
    assert Workspace.from_bytes(Workspace().to_bytes()) == Workspace()


def _sample_blob():
    ws = Workspace()
    ws.set_full("env/env_obs", Tensor(np.arange(12, dtype=np.float32).reshape(2, 3, 2)))
    return ws, ws.to_bytes()


def test_exact_layout():
    ws, blob = _sample_blob()
    name = b"env/env_obs"
    payload = np.arange(12, dtype="<f4").tobytes()
    region = struct.pack("<H", len(name)) + name + struct.pack("<IIBI", 2, 3, 1, 2) + payload
    expected = b"WSPC" + struct.pack("<HI", 1, 1) + region + struct.pack("<I", zlib.crc32(region))
    assert blob == expected


def test_corruption_errors():
    _, blob = _sample_blob()
    with pytest.raises(BadMagicError):
        Workspace.from_bytes(b"X" + blob[1:])
    with pytest.raises(VersionMismatchError):
        Workspace.from_bytes(blob[:4] + struct.pack("<H", 2) + blob[6:])
    with pytest.raises(TruncatedError):
        Workspace.from_bytes(blob[:-7])
    flipped = bytearray(blob)
    flipped[-8] ^= 0xFF
    with pytest.raises(ChecksumError):
        Workspace.from_bytes(bytes(flipped))


def test_serialize_to_stream_and_files(tmp_path):
    ws, blob = _sample_blob()
    sink = io.BytesIO()
    ws.serialize(sink)
    assert Workspace.deserialize(io.BytesIO(sink.getvalue())) == ws
    path = tmp_path / "w.wspc"
    ws.save(path)
    assert Workspace.load(path) == ws
    assert load_any(path) == [ws]


def test_serialize_rejects_gaps():
    ws = Workspace()
    ws.set("x", 1, Tensor(np.zeros(2)))
    with pytest.raises(GapError):
        ws.to_bytes()


def test_dataset_roundtrip(tmp_path):
    a, _ = _sample_blob()
    b = Workspace()
    b.set_full("y", Tensor(np.ones((4, 1))))
    blob = dataset_to_bytes([a, b])
    assert blob[:4] == b"WSDS"
    assert dataset_from_bytes(blob) == [a, b]
    ds = TrajectoryDataset([a, b])
    ds.save(tmp_path / "d.wsds")
    loaded = TrajectoryDataset.load(tmp_path / "d.wsds")
    assert [loaded.read_workspace() for _ in range(3)] == [a, b, a]
    with pytest.raises(BadMagicError):
        dataset_from_bytes(b"WSPC" + blob[4:])
