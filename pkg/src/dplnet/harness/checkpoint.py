"""Binary checkpoints.

Layout (all integers little-endian)::

    b"DPLC"  u32 version
    config       u32 length + UTF-8 canonical config text
    parameters   u32 count, then per parameter:
                 name, u8 dtype code, u8 frozen, u32 ndim, u32 dims..., u64 nbytes, raw data
    optimizer    u64 step, u32 count, then per parameter:
                 name, u32 nbuf, then per buffer: name, array (as above, without frozen)
    runtime      u32 length + UTF-8 JSON (RNG state, partial-epoch accumulators)
    step         u64

Names are u32-length-prefixed UTF-8.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tensor_core import OptState

MAGIC = b"DPLC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class TrainState:
    config_text: str
    params: dict[str, tuple[np.ndarray, bool]]
    opt: OptState = field(default_factory=OptState)
    runtime: dict = field(default_factory=dict)
    step: int = 0


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.pack("I", len(raw))
        self.parts.append(raw)

    def array(self, a: np.ndarray, frozen: bool | None = None) -> None:
        a = np.ascontiguousarray(a)
        if a.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {a.dtype}")
        if frozen is None:
            self.pack("BI", _CODES[a.dtype], a.ndim)
        else:
            self.pack("BBI", _CODES[a.dtype], int(frozen), a.ndim)
        self.pack(f"{a.ndim}I", *a.shape)
        raw = a.astype(_DTYPES[_CODES[a.dtype]], copy=False).tobytes()
        self.pack("Q", len(raw))
        self.parts.append(raw)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("I", what)
        return self.take(n, what).decode("utf-8")

    def array(self, what: str, with_frozen: bool = False):
        if with_frozen:
            code, frozen, ndim = self.unpack("BBI", what)
        else:
            code, ndim = self.unpack("BI", what)
        if code not in _DTYPES:
            raise CheckpointError(f"{what}: unknown dtype code {code}")
        shape = self.unpack(f"{ndim}I", what)
        (nbytes,) = self.unpack("Q", what)
        dt = _DTYPES[code]
        if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{what}: byte count does not match shape {shape}")
        data = np.frombuffer(self.take(nbytes, what), dtype=dt).reshape(shape)
        data = data.astype(dt.newbyteorder("="), copy=True)
        return (data, bool(frozen)) if with_frozen else data


def dumps(state: TrainState) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.pack("I", VERSION)
    w.text(state.config_text)
    w.pack("I", len(state.params))
    for name, (arr, frozen) in state.params.items():
        w.text(name)
        w.array(arr, frozen)
    w.pack("QI", state.opt.step, len(state.opt.buffers))
    for name, bufs in state.opt.buffers.items():
        w.text(name)
        w.pack("I", len(bufs))
        for key, arr in bufs.items():
            w.text(key)
            w.array(arr)
    w.text(json.dumps(state.runtime, sort_keys=True))
    w.pack("Q", state.step)
    return b"".join(w.parts)


def loads(buf: bytes) -> TrainState:
    r = _Reader(buf)
    magic = r.take(4, "magic") if len(buf) >= 4 else buf
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    config_text = r.text("config")
    (count,) = r.unpack("I", "parameter count")
    params = {}
    for _ in range(count):
        name = r.text("parameter name")
        params[name] = r.array(name, with_frozen=True)
    step_opt, nbuf = r.unpack("QI", "optimizer header")
    opt = OptState(step=step_opt)
    for _ in range(nbuf):
        name = r.text("optimizer entry")
        (k,) = r.unpack("I", name)
        opt.buffers[name] = {}
        for _ in range(k):
            key = r.text(name)
            opt.buffers[name][key] = r.array(f"{name}.{key}")
    runtime = json.loads(r.text("runtime state"))
    (step,) = r.unpack("Q", "step")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after step counter")
    return TrainState(config_text, params, opt, runtime, step)


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(state))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    return loads(Path(path).read_bytes())


def capture_params(model) -> dict[str, tuple[np.ndarray, bool]]:
    return {name: (p.data.copy(), p.frozen) for name, p in model.named_parameters()}


def restore_params(model, params: dict[str, tuple[np.ndarray, bool]]) -> None:
    """Copy saved arrays and frozen flags into ``model``; names and shapes must agree."""
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))[:3]
        extra = sorted(set(params) - set(own))[:3]
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, (arr, frozen) in params.items():
        p = own[name]
        if p.shape != arr.shape:
            raise CheckpointError(f"{name}: saved shape {arr.shape} vs model {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
        p.frozen = frozen
