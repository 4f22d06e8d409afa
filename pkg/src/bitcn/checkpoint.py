"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"BITCNCKP"
    version    u32
    header     u32 length + UTF-8 text, one ``key=value`` per line
    n_tensors  u32
    tensor     u32 name length, name, u32 rank, rank x u64 dims, raw float64 LE
    ...
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import BiTCN, HyperParams, InputDims

MAGIC = b"BITCNCKP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: BiTCN
    epoch: int = 0
    rng_state: dict | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    extra: dict[str, str] = field(default_factory=dict)


def _header_text(ckpt: Checkpoint) -> str:
    lines = [f"hp.{k}={json.dumps(v)}" for k, v in ckpt.model.hp.to_dict().items()]
    lines += [f"dims.{k}={json.dumps(list(v) if isinstance(v, tuple) else v)}"
              for k, v in ckpt.model.dims.to_dict().items()]
    lines.append(f"epoch={ckpt.epoch}")
    lines.append(f"optimizer_step={ckpt.optimizer_step}")
    if ckpt.rng_state is not None:
        lines.append(f"rng={json.dumps(ckpt.rng_state, sort_keys=True)}")
    for k, v in sorted(ckpt.extra.items()):
        if "\n" in str(v):
            raise CheckpointError(f"header value for {k!r} spans lines")
        lines.append(f"extra.{k}={v}")
    return "\n".join(lines) + "\n"


def save_checkpoint(path, model: BiTCN, *, epoch: int = 0, rng: np.random.Generator | None = None,
                    optimizer=None, extra: dict | None = None) -> None:
    """Write ``model`` (and optionally rng and Adam state) to ``path``."""
    opt_tensors: dict[str, np.ndarray] = {}
    step = 0
    if optimizer is not None:
        step = optimizer.step
        for name, arr in optimizer.m.items():
            opt_tensors[f"adam.m.{name}"] = arr
        for name, arr in optimizer.v.items():
            opt_tensors[f"adam.v.{name}"] = arr
    ckpt = Checkpoint(model, epoch, rng.bit_generator.state if rng is not None else None,
                      opt_tensors, step, {k: str(v) for k, v in (extra or {}).items()})

    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    header = _header_text(ckpt).encode("utf-8")
    buf += struct.pack("<I", len(header)) + header
    tensors = list(model.state_dict().items()) + list(opt_tensors.items())
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf += struct.pack("<I", len(raw_name)) + raw_name
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _parse_header(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"header line {lineno} is not key=value")
        out[key] = value
    return out


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a BiTCN checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    header = _parse_header(r.take(r.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")

    try:
        hp = HyperParams.from_dict({k[3:]: json.loads(v) for k, v in header.items() if k.startswith("hp.")})
        dims = InputDims.from_dict({k[5:]: json.loads(v) for k, v in header.items() if k.startswith("dims.")})
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from exc
    model = BiTCN(hp, dims, np.random.default_rng(0))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    rng_state = json.loads(header["rng"]) if "rng" in header else None
    return Checkpoint(
        model=model,
        epoch=int(header.get("epoch", 0)),
        rng_state=rng_state,
        optimizer={k: v for k, v in tensors.items() if k.startswith("adam.")},
        optimizer_step=int(header.get("optimizer_step", 0)),
        extra={k[6:]: v for k, v in header.items() if k.startswith("extra.")},
    )


def load_checkpoint(path, expected: HyperParams | None = None) -> BiTCN:
    """Load the model stored at ``path``.

    With ``expected`` given, every hyperparameter in the file header must
    match it; the first mismatching field is named in the error.
    """
    ckpt = read_checkpoint(path)
    if expected is not None:
        check_compatible(ckpt.model.hp, expected)
    return ckpt.model


def check_compatible(found: HyperParams, expected: HyperParams) -> None:
    a, b = found.to_dict(), expected.to_dict()
    for key in a:
        if a[key] != b[key]:
            raise CheckpointError(f"hyperparameter mismatch on {key!r}: checkpoint has {a[key]!r}, expected {b[key]!r}")


def restore_rng(state: dict) -> np.random.Generator:
    name = state["bit_generator"]
    bitgen = getattr(np.random, name)()
    bitgen.state = state
    return np.random.Generator(bitgen)
