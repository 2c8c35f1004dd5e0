"""Run copies of one agent in worker processes over a shared-memory workspace.

:func:`create_remote` probes the agent on a private workspace to learn every
variable's per-item shape and the batch size B, allocates a shared arena of
shape ``[T_max, B*n, ...]`` per variable, and starts ``n`` workers.  Worker k
owns batch rows ``[k*B, (k+1)*B)`` and executes gradient-free.

Coordinator and workers talk over a pipe using small length-prefixed frames:
``u32 length | u8 opcode | payload`` (length counts opcode + payload).
"""

from __future__ import annotations

import multiprocessing as mp
import struct
import traceback
import uuid
import weakref
from multiprocessing import resource_tracker
from multiprocessing.connection import wait
from multiprocessing.shared_memory import SharedMemory
from typing import Optional

import numpy as np

from .tensor import DTYPE, Tensor, no_grad
from .workspace import (
    GapError,
    ItemShapeError,
    UnknownVariableError,
    UnwrittenTimestepError,
    Workspace,
    WorkspaceError,
)

# --------------------------------------------------------------------------
# control channel
# --------------------------------------------------------------------------

RUN, STOP, ACK, DONE, ERR = 1, 2, 3, 4, 5
_OPNAMES = {RUN: "RUN", STOP: "STOP", ACK: "ACK", DONE: "DONE", ERR: "ERR"}

_T_NONE, _T_BOOL, _T_INT, _T_FLOAT, _T_STR = range(5)


class ProtocolError(ValueError):
    pass


class RemoteExecutionError(RuntimeError):
    def __init__(self, worker: int, message: str):
        super().__init__(f"worker {worker} failed: {message}")
        self.worker = worker


class AlreadyRunningError(RuntimeError):
    pass


class ProbeError(RuntimeError):
    pass


def encode_message(op: int, payload: bytes = b"") -> bytes:
    if op not in _OPNAMES:
        raise ProtocolError(f"unknown opcode {op}")
    return struct.pack("<IB", 1 + len(payload), op) + payload


def decode_message(frame: bytes) -> tuple[int, bytes]:
    if len(frame) < 5:
        raise ProtocolError(f"frame of {len(frame)} bytes is too short")
    n, op = struct.unpack_from("<IB", frame)
    if n != len(frame) - 4:
        raise ProtocolError(f"frame length field says {n}, frame carries {len(frame) - 4}")
    if op not in _OPNAMES:
        raise ProtocolError(f"unknown opcode {op}")
    return op, bytes(frame[5:])


def encode_kwargs(kwargs: dict) -> bytes:
    out = [struct.pack("<H", len(kwargs))]
    for key, value in kwargs.items():
        raw = key.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        if value is None:
            out.append(struct.pack("<B", _T_NONE))
        elif isinstance(value, (bool, np.bool_)):
            out.append(struct.pack("<BB", _T_BOOL, int(value)))
        elif isinstance(value, (int, np.integer)):
            out.append(struct.pack("<Bq", _T_INT, int(value)))
        elif isinstance(value, (float, np.floating)):
            out.append(struct.pack("<Bd", _T_FLOAT, float(value)))
        elif isinstance(value, str):
            s = value.encode("utf-8")
            out.append(struct.pack("<BI", _T_STR, len(s)) + s)
        else:
            raise ProtocolError(f"kwarg {key!r} has unsupported type {type(value).__name__}")
    return b"".join(out)


def decode_kwargs(payload: bytes) -> dict:
    try:
        (count,) = struct.unpack_from("<H", payload)
        pos, out = 2, {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            key = payload[pos : pos + klen].decode("utf-8")
            pos += klen
            (tag,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            if tag == _T_NONE:
                value = None
            elif tag == _T_BOOL:
                value = bool(payload[pos])
                pos += 1
            elif tag == _T_INT:
                (value,) = struct.unpack_from("<q", payload, pos)
                pos += 8
            elif tag == _T_FLOAT:
                (value,) = struct.unpack_from("<d", payload, pos)
                pos += 8
            elif tag == _T_STR:
                (slen,) = struct.unpack_from("<I", payload, pos)
                pos += 4
                if pos + slen > len(payload):
                    raise ProtocolError("truncated string value")
                value = payload[pos : pos + slen].decode("utf-8")
                pos += slen
            else:
                raise ProtocolError(f"unknown value tag {tag}")
            out[key] = value
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed kwargs payload: {exc}") from exc
    if pos != len(payload):
        raise ProtocolError(f"{len(payload) - pos} trailing bytes in kwargs payload")
    return out


# --------------------------------------------------------------------------
# shared arena
# --------------------------------------------------------------------------


def _attach(name: str) -> SharedMemory:
    shm = SharedMemory(name=name)
    # attaching registers the segment again; only the creator may unlink it
    try:
        resource_tracker.unregister(shm._name, "shared_memory")
    except Exception:
        pass
    return shm


class SharedWorkspace:
    """Fixed-layout workspace living in shared memory, split along the batch axis."""

    def __init__(self, specs: dict, batch_size: int, n_workers: int, t_max: int, run_id: Optional[str] = None):
        if t_max < 1 or n_workers < 1 or batch_size < 1:
            raise WorkspaceError("t_max, n_workers and batch_size must all be positive")
        self.specs = {k: tuple(v) for k, v in specs.items()}
        self.batch_size = batch_size
        self.n_workers = n_workers
        self.t_max = t_max
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self._owner = True
        self._busy = False
        self._segments: list[SharedMemory] = []
        for i, (name, item) in enumerate(self.specs.items()):
            size = self._nbytes(item)
            self._segments.append(SharedMemory(name=self.segment_name(i), create=True, size=max(size, 1)))
        self._map()
        for m in self.masks.values():
            m[...] = 0
        self._finalizer = weakref.finalize(self, _release, self._segments, True)

    def segment_name(self, index: int) -> str:
        return f"wspc-{self.run_id}-{index}"

    def _nbytes(self, item) -> int:
        n = self.t_max * self.batch_size * self.n_workers * int(np.prod(item, dtype=np.int64))
        return 4 * n + self.t_max * self.n_workers

    def _map(self):
        self.arrays, self.masks = {}, {}
        for seg, (name, item) in zip(self._segments, self.specs.items()):
            shape = (self.t_max, self.batch_size * self.n_workers) + item
            count = int(np.prod(shape, dtype=np.int64))
            self.arrays[name] = np.ndarray(shape, dtype=DTYPE, buffer=seg.buf, offset=0)
            self.masks[name] = np.ndarray((self.t_max, self.n_workers), dtype=np.uint8, buffer=seg.buf, offset=4 * count)

    def __getstate__(self):
        return {
            "specs": self.specs,
            "batch_size": self.batch_size,
            "n_workers": self.n_workers,
            "t_max": self.t_max,
            "run_id": self.run_id,
        }

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._owner = False
        self._busy = False
        self._segments = [_attach(self.segment_name(i)) for i in range(len(self.specs))]
        self._map()
        self._finalizer = weakref.finalize(self, _release, self._segments, False)

    # -- coordinator-side access -------------------------------------------
    def keys(self) -> list[str]:
        return list(self.specs)

    def view(self, worker: int) -> "WorkerWorkspace":
        if not 0 <= worker < self.n_workers:
            raise WorkspaceError(f"worker index {worker} out of range for {self.n_workers} workers")
        return WorkerWorkspace(self, worker)

    def _check_quiescent(self, what: str):
        if self._busy:
            raise AlreadyRunningError(f"cannot {what} while a remote run is in progress")

    def snapshot(self) -> Workspace:
        """Copy into a plain workspace.

        Each variable covers the timesteps that every worker has written,
        starting at t=0.
        """
        self._check_quiescent("snapshot")
        ws = Workspace()
        for name in self.specs:
            written = self.masks[name].all(axis=1)
            extent = int(np.argmin(written)) if not written.all() else self.t_max
            if extent:
                ws.set_full(name, Tensor(self.arrays[name][:extent].copy()))
        return ws

    def clear(self) -> None:
        self._check_quiescent("clear")
        for m in self.masks.values():
            m[...] = 0

    def keep_last_steps(self, n: int, end: Optional[int] = None) -> None:
        """Move timesteps [end-n, end) to [0, n) and forget everything after."""
        self._check_quiescent("rewrite")
        for name in self.specs:
            written = self.masks[name].all(axis=1)
            stop = end if end is not None else (int(np.argmin(written)) if not written.all() else self.t_max)
            if stop < n:
                raise WorkspaceError(f"variable {name!r} has only {stop} timesteps, cannot keep {n}")
            self.arrays[name][:n] = self.arrays[name][stop - n : stop].copy()
            self.masks[name][:n] = self.masks[name][stop - n : stop].copy()
            self.masks[name][n:] = 0

    def close(self) -> None:
        self.arrays, self.masks = {}, {}
        self._finalizer()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _release(segments, unlink):
    for seg in segments:
        try:
            seg.close()
        except Exception:
            pass
        if unlink:
            try:
                seg.unlink()
            except FileNotFoundError:
                pass


class WorkerWorkspace:
    """The slice of a shared workspace one worker is allowed to touch."""

    def __init__(self, shared: SharedWorkspace, worker: int):
        self.shared = shared
        self.worker = worker
        b = shared.batch_size
        self.rows = slice(worker * b, (worker + 1) * b)

    @property
    def batch_size(self) -> int:
        return self.shared.batch_size

    def keys(self):
        return self.shared.keys()

    def __contains__(self, name):
        return name in self.shared.specs

    def _item(self, name) -> tuple:
        try:
            return self.shared.specs[name]
        except KeyError:
            raise UnknownVariableError(f"variable {name!r} was not written during the probe run") from None

    def set(self, name: str, t: int, value) -> None:
        item = self._item(name)
        if not 0 <= t < self.shared.t_max:
            raise WorkspaceError(f"timestep {t} beyond shared capacity {self.shared.t_max}")
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        want = (self.shared.batch_size,) + item
        if data.shape != want:
            raise ItemShapeError(f"{name!r}: expected shape {want}, got {data.shape}")
        self.shared.arrays[name][t, self.rows] = data
        self.shared.masks[name][t, self.worker] = 1

    def is_written(self, name: str, t: int) -> bool:
        return name in self.shared.specs and 0 <= t < self.shared.t_max and bool(self.shared.masks[name][t, self.worker])

    def get(self, name: str, t: int) -> Tensor:
        self._item(name)
        if not self.is_written(name, t):
            raise UnwrittenTimestepError(f"variable {name!r} was never written at t={t}")
        return Tensor(self.shared.arrays[name][t, self.rows].copy())

    def time_size(self, name: str) -> int:
        self._item(name)
        col = self.shared.masks[name][:, self.worker]
        nz = np.nonzero(col)[0]
        return int(nz[-1]) + 1 if len(nz) else 0

    def get_full(self, name: str) -> Tensor:
        n = self.time_size(name)
        col = self.shared.masks[name][:n, self.worker]
        if n == 0 or not col.all():
            raise GapError(f"variable {name!r} has a gap in worker {self.worker}'s slice")
        return Tensor(self.shared.arrays[name][:n, self.rows].copy())

    __getitem__ = get_full

    def set_full(self, name: str, value) -> None:
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        for t in range(data.shape[0]):
            self.set(name, t, data[t])


class _ParamArena:
    """One shared segment holding every trainable tensor of the agent."""

    def __init__(self, params, run_id: str):
        self.shapes = [p.shape for p in params]
        self.sizes = [int(np.prod(s, dtype=np.int64)) for s in self.shapes]
        self.name = f"wspc-{run_id}-params"
        self.owner = True
        self.seg = SharedMemory(name=self.name, create=True, size=max(4 * sum(self.sizes), 1))
        self.load(params)
        self._finalizer = weakref.finalize(self, _release, [self.seg], True)

    def views(self):
        out, off = [], 0
        for shape, size in zip(self.shapes, self.sizes):
            out.append(np.ndarray(shape, dtype=DTYPE, buffer=self.seg.buf, offset=4 * off))
            off += size
        return out

    def load(self, params) -> None:
        params = list(params)
        if [p.shape for p in params] != self.shapes:
            raise ValueError("parameter layout differs from the one the workers were built with")
        for v, p in zip(self.views(), params):
            v[...] = p.data

    def __getstate__(self):
        return {"shapes": self.shapes, "sizes": self.sizes, "name": self.name}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.owner = False
        self.seg = _attach(self.name)
        self._finalizer = weakref.finalize(self, _release, [self.seg], False)

    def close(self):
        self._finalizer()


# --------------------------------------------------------------------------
# workers and coordinator
# --------------------------------------------------------------------------


def _worker_main(worker: int, conn, agent, shared: SharedWorkspace, arena: Optional[_ParamArena], seed: int):
    agent.seed(seed + worker)
    if arena is not None:
        for p, view in zip(agent.parameters(), arena.views()):
            p.data = view
    ws = shared.view(worker)
    while True:
        try:
            frame = conn.recv_bytes()
        except (EOFError, OSError):
            break
        op, payload = decode_message(frame)
        if op == STOP:
            conn.send_bytes(encode_message(ACK))
            break
        if op != RUN:
            conn.send_bytes(encode_message(ERR, f"unexpected opcode {_OPNAMES[op]}".encode()))
            continue
        try:
            kwargs = decode_kwargs(payload)
            conn.send_bytes(encode_message(ACK))
            with no_grad():
                agent(ws, **kwargs)
        except Exception:
            conn.send_bytes(encode_message(ERR, traceback.format_exc().encode("utf-8", "replace")))
        else:
            conn.send_bytes(encode_message(DONE))
    conn.close()


def _default_context():
    methods = mp.get_all_start_methods()
    return mp.get_context("fork" if "fork" in methods else "spawn")


class RemoteAgent:
    """n clones of an agent, each bound to one batch slice of a SharedWorkspace."""

    def __init__(self, agent, shared: SharedWorkspace, seed: int = 0, context=None):
        self.shared = shared
        self.n = shared.n_workers
        self.seed = seed
        self._ctx = context or _default_context()
        params = agent.parameters()
        self._arena = _ParamArena(params, shared.run_id) if params else None
        self._conns, self._procs = [], []
        self._pending: set[int] = set()
        self._errors: dict[int, str] = {}
        self._closed = False
        for k in range(self.n):
            parent, child = self._ctx.Pipe()
            proc = self._ctx.Process(
                target=_worker_main,
                args=(k, child, agent.clone(), shared, self._arena, seed),
                daemon=True,
                name=f"remote-agent-{k}",
            )
            proc.start()
            child.close()
            self._conns.append(parent)
            self._procs.append(proc)

    @classmethod
    def create(cls, agent, num_processes: int, **kwargs):
        return create_remote(agent, num_processes, **kwargs)

    # -- parameters ----------------------------------------------------------
    def load_parameters(self, agent) -> None:
        """Publish the current parameter values of ``agent`` to every worker."""
        if self._arena is not None:
            self._check_idle()
            self._arena.load(agent.parameters())

    # -- execution -------------------------------------------------------------
    def _check_idle(self):
        if self._closed:
            raise RuntimeError("remote agent is closed")
        if self._pending:
            raise AlreadyRunningError("remote agent is already running")

    def __call__(self, workspace: SharedWorkspace, **kwargs):
        self.execute(workspace, **kwargs)

    def execute(self, workspace: SharedWorkspace, **kwargs) -> None:
        self.execute_async(workspace, **kwargs)
        self.join()

    def execute_async(self, workspace: SharedWorkspace, **kwargs) -> None:
        self._check_idle()
        if workspace is not self.shared:
            raise ValueError("remote agent can only run on the shared workspace it was created with")
        frame = encode_message(RUN, encode_kwargs(kwargs))
        self._errors = {}
        self.shared._busy = True
        self._pending = set(range(self.n))
        for conn in self._conns:
            conn.send_bytes(frame)

    _asynchronous_call = execute_async

    def _drain(self, timeout) -> None:
        by_conn = {id(self._conns[k]): k for k in self._pending}
        ready = wait([self._conns[k] for k in self._pending], timeout=timeout)
        for conn in ready:
            k = by_conn[id(conn)]
            try:
                op, payload = decode_message(conn.recv_bytes())
            except (EOFError, OSError):
                self._errors[k] = "worker process exited unexpectedly"
                self._pending.discard(k)
                continue
            if op == DONE:
                self._pending.discard(k)
            elif op == ERR:
                self._errors[k] = payload.decode("utf-8", "replace")
                self._pending.discard(k)
        for k in list(self._pending):
            if not self._procs[k].is_alive() and not self._conns[k].poll():
                self._errors[k] = f"worker process died with exit code {self._procs[k].exitcode}"
                self._pending.discard(k)

    def is_running(self) -> bool:
        if self._pending:
            self._drain(0)
        if not self._pending:
            self.shared._busy = False
        return bool(self._pending)

    def join(self) -> None:
        while self._pending:
            self._drain(0.5)
        self.shared._busy = False
        if self._errors:
            k = min(self._errors)
            message = self._errors[k]
            self.close()
            raise RemoteExecutionError(k, message)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for k, conn in enumerate(self._conns):
            if self._procs[k].is_alive() and k not in self._pending:
                try:
                    conn.send_bytes(encode_message(STOP))
                except (BrokenPipeError, OSError):
                    pass
        for proc in self._procs:
            proc.join(timeout=2.0)
            if proc.is_alive():
                proc.terminate()
                proc.join(timeout=2.0)
        for conn in self._conns:
            conn.close()
        self._pending.clear()
        self.shared._busy = False
        if self._arena is not None:
            self._arena.close()
        self.shared.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def create_remote(agent, num_processes: int, t_max: Optional[int] = None, seed: int = 0, context=None,
                  **probe_kwargs) -> tuple[RemoteAgent, SharedWorkspace]:
    """Probe ``agent`` once, then build the shared arena and n workers."""
    if num_processes < 1:
        raise ValueError("num_processes must be >= 1")
    probe = agent.clone()
    probe.seed(seed)
    private = Workspace()
    with no_grad():
        try:
            probe(private, **probe_kwargs)
        except ItemShapeError as exc:
            raise ProbeError(f"variable shapes change during the probe run: {exc}") from exc
    if not private.keys():
        raise ProbeError("probe run wrote no variables")
    specs = {name: private.item_shape(name) for name in private.keys()}
    shared = SharedWorkspace(specs, private.batch_size, num_processes, t_max or private.time_extent)
    try:
        remote = RemoteAgent(agent, shared, seed=seed, context=context)
    except Exception:
        shared.close()
        raise
    return remote, shared


def remote_execute(ra: RemoteAgent, sw: SharedWorkspace, **kwargs) -> None:
    ra.execute(sw, **kwargs)


def remote_execute_async(ra: RemoteAgent, sw: SharedWorkspace, **kwargs) -> None:
    ra.execute_async(sw, **kwargs)


def snapshot(sw: SharedWorkspace) -> Workspace:
    return sw.snapshot()
