"""Binary checkpoint format.

Layout (little-endian)::

    b"M4CK" | version u32 | entry count u32
    per entry: name length u16 | name bytes | dtype code u8 | rank u8 | dims u32 * rank | raw values

Model parameters are stored under their module path. Shared parameters
appear once, under the first path that reaches them. Run configuration,
step counter and optimizer moments ride along as ``__``-prefixed entries.
"""
from __future__ import annotations

import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

MAGIC = b"M4CK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}
CODES = {v: k for k, v in DTYPES.items()}

CONFIG_KEY = "__config__"
STEP_KEY = "__step__"
OPT_T_KEY = "__optim__/t"
OPT_M = "__optim__/m/"
OPT_V = "__optim__/v/"


class CheckpointError(ValueError):
    pass


def encode_entries(entries: "OrderedDict[str, np.ndarray]") -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw = name.encode("utf-8")
        if len(raw) >= 1 << 16:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[CODES[dt]]).tobytes())
    return b"".join(out)


def decode_entries(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            if code not in DTYPES:
                raise CheckpointError(f"entry {name!r}: unknown dtype code {code}")
            dt = DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointError(f"entry {name!r}: truncated data")
            entries[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return entries


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    config_text: str = ""
    step: int = 0
    opt_t: int = 0
    opt_m: "OrderedDict[str, np.ndarray] | None" = None
    opt_v: "OrderedDict[str, np.ndarray] | None" = None

    def to_entries(self) -> "OrderedDict[str, np.ndarray]":
        e = OrderedDict(self.params)
        e[CONFIG_KEY] = np.frombuffer(self.config_text.encode("utf-8"), dtype=np.uint8)
        e[STEP_KEY] = np.array(self.step, dtype=np.int64)
        if self.opt_m is not None:
            e[OPT_T_KEY] = np.array(self.opt_t, dtype=np.int64)
            for k, v in self.opt_m.items():
                e[OPT_M + k] = v
            for k, v in self.opt_v.items():
                e[OPT_V + k] = v
        return e

    @classmethod
    def from_entries(cls, e) -> "Checkpoint":
        params = OrderedDict((k, v) for k, v in e.items() if not k.startswith("__"))
        m = OrderedDict((k[len(OPT_M):], v) for k, v in e.items() if k.startswith(OPT_M))
        v = OrderedDict((k[len(OPT_V):], x) for k, x in e.items() if k.startswith(OPT_V))
        has_opt = OPT_T_KEY in e
        return cls(params, bytes(e[CONFIG_KEY]).decode("utf-8") if CONFIG_KEY in e else "",
                   int(e[STEP_KEY]) if STEP_KEY in e else 0, int(e[OPT_T_KEY]) if has_opt else 0,
                   m if has_opt else None, v if has_opt else None)


def model_state(model) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((n, p.data.copy()) for n, p in model.named_parameters())


def load_model_state(model, params) -> None:
    """Copy ``params`` into ``model``; names and shapes must match exactly."""
    named = OrderedDict(model.named_parameters())
    missing = [n for n in named if n not in params]
    extra = [n for n in params if n not in named]
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]} unexpected {extra[:5]}"
                              f" ({len(missing)} missing, {len(extra)} unexpected)")
    for n, p in named.items():
        if params[n].shape != p.data.shape:
            raise CheckpointError(f"{n}: shape {params[n].shape} in checkpoint, model has {p.data.shape}")
    for n, p in named.items():
        p.data[...] = params[n]


def optimizer_state(model, opt):
    names = {id(p): n for n, p in model.named_parameters()}
    m = OrderedDict((names[id(p)], opt.m[id(p)].copy()) for p in opt.params)
    v = OrderedDict((names[id(p)], opt.v[id(p)].copy()) for p in opt.params)
    return opt.t, m, v


def load_optimizer_state(model, opt, t, m, v) -> None:
    names = {id(p): n for n, p in model.named_parameters()}
    for p in opt.params:
        n = names[id(p)]
        if n not in m or n not in v:
            raise CheckpointError(f"optimizer state missing for {n}")
        opt.m[id(p)][...] = m[n]
        opt.v[id(p)][...] = v[n]
    opt.t = t


def capture(model, config_text: str = "", step: int = 0, opt=None) -> Checkpoint:
    ck = Checkpoint(model_state(model), config_text, step)
    if opt is not None:
        ck.opt_t, ck.opt_m, ck.opt_v = optimizer_state(model, opt)
    return ck


def save(path, ck: Checkpoint) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_entries(ck.to_entries()))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return Checkpoint.from_entries(decode_entries(fh.read()))
