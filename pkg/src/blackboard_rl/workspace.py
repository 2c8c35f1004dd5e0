"""The shared blackboard that agents read from and write to.

A :class:`Workspace` maps variable names to time-indexed series of batched
tensors.  All variables share one batch size, fixed by the first write.
Reading a slot that was never written raises; there are no implicit zeros.
"""

from __future__ import annotations

import io
import struct
import zlib
from typing import BinaryIO, Iterable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor

MAGIC = b"WSPC"
DATASET_MAGIC = b"WSDS"
VERSION = 1


class WorkspaceError(Exception):
    pass


class UnknownVariableError(WorkspaceError, LookupError):
    pass


class UnwrittenTimestepError(WorkspaceError, LookupError):
    pass


class BatchMismatchError(WorkspaceError, ValueError):
    pass


class ItemShapeError(WorkspaceError, ValueError):
    pass


class GapError(WorkspaceError):
    pass


class WorkspaceFormatError(WorkspaceError):
    pass


class BadMagicError(WorkspaceFormatError):
    pass


class VersionMismatchError(WorkspaceFormatError):
    pass


class TruncatedError(WorkspaceFormatError):
    pass


class ChecksumError(WorkspaceFormatError):
    pass


class _Series:
    __slots__ = ("item_shape", "steps")

    def __init__(self, item_shape: tuple):
        self.item_shape = item_shape
        self.steps: list[Optional[Tensor]] = []

    def put(self, t: int, value: Tensor) -> None:
        if t >= len(self.steps):
            self.steps.extend([None] * (t + 1 - len(self.steps)))
        self.steps[t] = value

    def first_gap(self) -> Optional[int]:
        for t, v in enumerate(self.steps):
            if v is None:
                return t
        return None


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name:
        raise WorkspaceError(f"variable names must be nonempty strings, got {name!r}")


def _check_t(t) -> int:
    if isinstance(t, (bool, np.bool_)) or not isinstance(t, (int, np.integer)) or t < 0:
        raise WorkspaceError(f"timestep must be a nonnegative integer, got {t!r}")
    return int(t)


class Workspace:
    def __init__(self, source=None, device: str = "cpu"):
        self._vars: dict[str, _Series] = {}
        self._batch_size: Optional[int] = None
        self.device = device
        if source is not None:
            # e.g. Workspace(shared_workspace): quiescent copy into plain storage
            other = source.snapshot() if hasattr(source, "snapshot") else source
            for name in other.keys():
                self.set_full(name, Tensor(other.get_full(name).data.copy()))

    # -- introspection -----------------------------------------------------
    @property
    def batch_size(self) -> Optional[int]:
        return self._batch_size

    def keys(self) -> list[str]:
        return list(self._vars)

    def __contains__(self, name) -> bool:
        return name in self._vars

    def __iter__(self) -> Iterator[str]:
        return iter(self.keys())

    def __len__(self) -> int:
        return len(self._vars)

    def time_size(self, name: str) -> int:
        return len(self._series(name).steps)

    @property
    def time_extent(self) -> int:
        return max((len(s.steps) for s in self._vars.values()), default=0)

    def item_shape(self, name: str) -> tuple:
        return self._series(name).item_shape

    def is_written(self, name: str, t: int) -> bool:
        s = self._vars.get(name)
        return s is not None and 0 <= t < len(s.steps) and s.steps[t] is not None

    def _series(self, name: str) -> _Series:
        try:
            return self._vars[name]
        except KeyError:
            raise UnknownVariableError(f"unknown variable {name!r}") from None

    # -- writes ------------------------------------------------------------
    def _validate(self, name: str, value: Tensor, batch_axis: int) -> tuple:
        _check_name(name)
        if value.ndim <= batch_axis:
            raise ItemShapeError(f"{name!r}: value of shape {value.shape} has no batch dimension")
        b = value.shape[batch_axis]
        if self._batch_size is not None and b != self._batch_size:
            raise BatchMismatchError(f"{name!r}: batch size {b} does not match workspace batch size {self._batch_size}")
        item = tuple(value.shape[batch_axis + 1 :])
        s = self._vars.get(name)
        if s is not None and s.item_shape != item:
            raise ItemShapeError(f"{name!r}: per-item shape {item} differs from earlier {s.item_shape}")
        return item

    def set(self, name: str, t: int, value) -> None:
        t = _check_t(t)
        value = T.as_tensor(value)
        item = self._validate(name, value, 0)
        if self._batch_size is None:
            self._batch_size = value.shape[0]
        self._vars.setdefault(name, _Series(item)).put(t, value)

    def set_full(self, name: str, value) -> None:
        value = T.as_tensor(value)
        item = self._validate(name, value, 1)
        if self._batch_size is None:
            self._batch_size = value.shape[1]
        s = self._vars.setdefault(name, _Series(item))
        if value.requires_grad:
            for t in range(value.shape[0]):
                s.put(t, value[t])
        else:
            for t in range(value.shape[0]):
                s.put(t, Tensor(value.data[t]))

    # -- reads -------------------------------------------------------------
    def get(self, name: str, t: int) -> Tensor:
        t = _check_t(t)
        s = self._series(name)
        if t >= len(s.steps) or s.steps[t] is None:
            raise UnwrittenTimestepError(f"variable {name!r} was never written at t={t}")
        return s.steps[t]

    def get_full(self, name: str) -> Tensor:
        s = self._series(name)
        gap = s.first_gap()
        if gap is not None:
            raise GapError(f"variable {name!r} has no value at t={gap}")
        if not s.steps:
            raise GapError(f"variable {name!r} is empty")
        if any(v.requires_grad for v in s.steps):
            return T.stack(s.steps)
        return Tensor(np.stack([v.data for v in s.steps]))

    __getitem__ = get_full

    # -- whole-workspace transforms -------------------------------------------
    def clear(self) -> None:
        self._vars.clear()
        self._batch_size = None

    def detach(self) -> "Workspace":
        out = Workspace(device=self.device)
        out._batch_size = self._batch_size
        for name, s in self._vars.items():
            ns = _Series(s.item_shape)
            ns.steps = [None if v is None else Tensor(v.data.copy()) for v in s.steps]
            out._vars[name] = ns
        return out

    copy = detach

    def to(self, device: str) -> "Workspace":
        out = Workspace(device=device)
        out._batch_size = self._batch_size
        for name, s in self._vars.items():
            ns = _Series(s.item_shape)
            ns.steps = list(s.steps)
            out._vars[name] = ns
        return out

    def subworkspace(self, batch_indices: Sequence[int], t0: int, t1: int) -> "Workspace":
        idx = np.asarray(list(batch_indices), dtype=np.int64)
        b = self._batch_size or 0
        if idx.ndim != 1 or len(idx) == 0:
            raise WorkspaceError("batch_indices must be a nonempty list")
        if (idx < 0).any() or (idx >= b).any():
            raise WorkspaceError(f"batch index out of range for batch size {b}: {idx.tolist()}")
        if not (0 <= t0 < t1 <= self.time_extent):
            raise WorkspaceError(f"window [{t0}, {t1}) outside time extent {self.time_extent}")
        out = Workspace(device=self.device)
        for name, s in self._vars.items():
            if t1 > len(s.steps) or any(v is None for v in s.steps[t0:t1]):
                raise GapError(f"variable {name!r} is not written on [{t0}, {t1})")
            block = np.stack([v.data[idx] for v in s.steps[t0:t1]])
            out.set_full(name, Tensor(block))
        return out

    def tail(self, n: int) -> "Workspace":
        """Detached copy of the last n timesteps, re-indexed from t=0."""
        ext = self.time_extent
        return self.subworkspace(range(self._batch_size or 0), ext - n, ext)

    # -- equality ----------------------------------------------------------
    def __eq__(self, other) -> bool:
        if not isinstance(other, Workspace):
            return NotImplemented
        if set(self.keys()) != set(other.keys()):
            return False
        for name in self.keys():
            a, b = self._vars[name], other._vars[name]
            if a.item_shape != b.item_shape or len(a.steps) != len(b.steps):
                return False
            for x, y in zip(a.steps, b.steps):
                if (x is None) != (y is None):
                    return False
                if x is not None and x.data.tobytes() != y.data.tobytes():
                    return False
        return True

    def __repr__(self):
        parts = ", ".join(f"{n}{(len(s.steps), self._batch_size) + s.item_shape}" for n, s in self._vars.items())
        return f"Workspace({parts})"

    # -- serialization -----------------------------------------------------
    def to_bytes(self) -> bytes:
        body = io.BytesIO()
        for name, s in self._vars.items():
            gap = s.first_gap()
            if gap is not None:
                raise GapError(f"cannot serialize {name!r}: no value at t={gap}")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF or len(s.item_shape) > 0xFF:
                raise WorkspaceError(f"variable {name!r} cannot be encoded")
            body.write(struct.pack("<H", len(raw)))
            body.write(raw)
            body.write(struct.pack("<IIB", len(s.steps), self._batch_size, len(s.item_shape)))
            body.write(struct.pack(f"<{len(s.item_shape)}I", *s.item_shape))
            payload = np.stack([v.data for v in s.steps]).astype("<f4", copy=False)
            body.write(payload.tobytes(order="C"))
        region = body.getvalue()
        head = MAGIC + struct.pack("<HI", VERSION, len(self._vars))
        return head + region + struct.pack("<I", zlib.crc32(region))

    def serialize(self, sink: Optional[BinaryIO] = None):
        blob = self.to_bytes()
        if sink is None:
            return blob
        sink.write(blob)
        return None

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Workspace":
        ws, end = _parse_workspace(memoryview(blob), 0)
        if end != len(blob):
            raise WorkspaceFormatError(f"{len(blob) - end} trailing bytes after workspace record")
        return ws

    @classmethod
    def deserialize(cls, source) -> "Workspace":
        blob = source if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
        return cls.from_bytes(bytes(blob))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Workspace":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _need(buf: memoryview, pos: int, n: int, what: str) -> None:
    if pos + n > len(buf):
        raise TruncatedError(f"truncated {what}: need {n} bytes at offset {pos}, have {len(buf) - pos}")


def _parse_workspace(buf: memoryview, pos: int) -> tuple[Workspace, int]:
    _need(buf, pos, 4, "magic")
    if bytes(buf[pos : pos + 4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[pos:pos + 4])!r}, expected {MAGIC!r}")
    _need(buf, pos + 4, 6, "header")
    version, count = struct.unpack_from("<HI", buf, pos + 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported workspace format version {version}")
    start = p = pos + 10
    records = []
    for _ in range(count):
        _need(buf, p, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, p)
        p += 2
        _need(buf, p, nlen, "name")
        try:
            name = bytes(buf[p : p + nlen]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WorkspaceFormatError(f"variable name is not UTF-8 at offset {p}") from exc
        p += nlen
        _need(buf, p, 9, "extents")
        t_len, b, rank = struct.unpack_from("<IIB", buf, p)
        p += 9
        _need(buf, p, 4 * rank, "item shape")
        item = struct.unpack_from(f"<{rank}I", buf, p)
        p += 4 * rank
        count_f = t_len * b * int(np.prod(item, dtype=np.int64))
        _need(buf, p, 4 * count_f, f"payload of {name!r}")
        data = np.frombuffer(buf, dtype="<f4", count=count_f, offset=p).astype(DTYPE)
        p += 4 * count_f
        records.append((name, data.reshape((t_len, b) + tuple(item))))
    _need(buf, p, 4, "checksum trailer")
    (crc,) = struct.unpack_from("<I", buf, p)
    if zlib.crc32(buf[start:p]) != crc:
        raise ChecksumError("workspace checksum mismatch")
    ws = Workspace()
    for name, arr in records:
        ws.set_full(name, Tensor(arr))
    return ws, p + 4


# --------------------------------------------------------------------------
# trajectory datasets: a sequence of workspace records
# --------------------------------------------------------------------------


def dataset_to_bytes(workspaces: Iterable[Workspace]) -> bytes:
    blobs = [w.to_bytes() for w in workspaces]
    return DATASET_MAGIC + struct.pack("<HI", VERSION, len(blobs)) + b"".join(blobs)


def dataset_from_bytes(blob: bytes) -> list[Workspace]:
    buf = memoryview(blob)
    _need(buf, 0, 4, "dataset magic")
    if bytes(buf[:4]) != DATASET_MAGIC:
        raise BadMagicError(f"bad dataset magic {bytes(buf[:4])!r}, expected {DATASET_MAGIC!r}")
    _need(buf, 4, 6, "dataset header")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported dataset format version {version}")
    pos, out = 10, []
    for _ in range(count):
        ws, pos = _parse_workspace(buf, pos)
        out.append(ws)
    if pos != len(buf):
        raise WorkspaceFormatError(f"{len(buf) - pos} trailing bytes after dataset")
    return out


def save_dataset(path, workspaces: Iterable[Workspace]) -> None:
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(workspaces))


def load_dataset(path) -> list[Workspace]:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())


def load_any(path) -> list[Workspace]:
    """Read either a single workspace file or a dataset file."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] == DATASET_MAGIC:
        return dataset_from_bytes(blob)
    return [Workspace.from_bytes(blob)]


class TrajectoryDataset:
    """Workspaces held in memory, read back one at a time for batch training."""

    def __init__(self, workspaces: Sequence[Workspace]):
        if not workspaces:
            raise WorkspaceError("empty trajectory dataset")
        self.workspaces = list(workspaces)
        self._cursor = 0

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        return cls(load_dataset(path))

    def save(self, path) -> None:
        save_dataset(path, self.workspaces)

    def __len__(self):
        return len(self.workspaces)

    def __getitem__(self, i) -> Workspace:
        return self.workspaces[i]

    def read_workspace(self) -> Workspace:
        """Next workspace in round-robin order, as a fresh detached copy."""
        ws = self.workspaces[self._cursor % len(self.workspaces)]
        self._cursor += 1
        return ws.detach()
