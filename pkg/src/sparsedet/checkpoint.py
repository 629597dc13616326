"""Binary checkpoint format: config echo, parameters, optimizer moments.

Layout (little-endian): magic "SSCK", u32 format version, the canonical
config text (length-prefixed UTF-8), u32 epoch, u64 optimizer step, three
named-tensor blocks (parameters, first moments, second moments), the
training RNG state as length-prefixed JSON, and a trailing CRC32 over
everything after the magic. Saving what ``load_checkpoint`` returns
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataError

MAGIC = b"SSCK"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    epoch: int = 0
    rng_state: dict | None = None


def _pack_str(buf: bytearray, text: str) -> None:
    raw = text.encode("utf-8")
    buf += struct.pack("<Q", len(raw))
    buf += raw


def _pack_tensors(buf: bytearray, tensors: dict[str, np.ndarray]) -> None:
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        raw_name = name.encode("utf-8")
        buf += struct.pack("<I", len(raw_name))
        buf += raw_name
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (n,) = self.unpack("<Q")
        return self.take(n).decode("utf-8")

    def read_tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = self.unpack("<I")
            name = self.take(name_len).decode("utf-8")
            (rank,) = self.unpack("<I")
            dims = self.unpack(f"<{rank}I") if rank else ()
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(self.take(8 * n), dtype="<f8").reshape(dims).copy()
            out[name] = data
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    import zlib

    body = bytearray()
    body += struct.pack("<I", VERSION)
    _pack_str(body, ckpt.config_text)
    body += struct.pack("<IQ", ckpt.epoch, ckpt.opt_step)
    _pack_tensors(body, ckpt.params)
    _pack_tensors(body, ckpt.opt_m)
    _pack_tensors(body, ckpt.opt_v)
    _pack_str(body, json.dumps(ckpt.rng_state, sort_keys=True))
    crc = zlib.crc32(body)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> Checkpoint:
    import zlib

    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DataError(f"{path}: checksum mismatch")
    r = _Reader(body, path)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    config_text = r.read_str()
    epoch, opt_step = r.unpack("<IQ")
    params = r.read_tensors()
    opt_m = r.read_tensors()
    opt_v = r.read_tensors()
    rng_state = json.loads(r.read_str())
    return Checkpoint(
        config_text=config_text,
        params=params,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_step=opt_step,
        epoch=epoch,
        rng_state=rng_state,
    )
