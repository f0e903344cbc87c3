"""Binary checkpoint format.

Layout (little-endian)::

    b"AIKD" | u32 version | i64 seed | u32 len | JSON header (sorted keys)
    | u32 n_arrays | n_arrays x (u64 n_values | n_values x f64)
    | u32 crc32 of everything before it

The header records the architecture, frozen flag, optimizer state, SWA count
and free-form metadata (label normalization, config). Arrays are the model
parameters in layer order, followed by the SWA running average if present.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_bytes_atomic
from .network import ArchitectureSpec, ModelParams, SwaState

MAGIC = b"AIKD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    seed: int = 0
    optimizer: dict = field(default_factory=dict)
    swa: SwaState | None = None
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def spec(self) -> ArchitectureSpec:
        return self.params.spec


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = list(ckpt.params.arrays())
    swa_count = 0
    if ckpt.swa is not None and ckpt.swa.count > 0:
        arrays += ckpt.swa.average
        swa_count = ckpt.swa.count
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise CheckpointError("refusing to save non-finite parameters")
    header = {
        "architecture": ckpt.spec.to_dict(),
        "frozen": bool(ckpt.params.frozen),
        "optimizer": ckpt.optimizer,
        "swa_count": swa_count,
        "metadata": ckpt.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Iq", FORMAT_VERSION, int(ckpt.seed)),
             struct.pack("<I", len(hbytes)), hbytes, struct.pack("<I", len(arrays))]
    for a in arrays:
        flat = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
        parts += [struct.pack("<Q", flat.size), flat.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint | ModelParams, path, **kwargs) -> None:
    if isinstance(ckpt, ModelParams):
        ckpt = Checkpoint(ckpt, **kwargs)
    write_bytes_atomic(path, checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an AIKD checkpoint (bad magic)")
    version, seed = r.unpack("<Iq")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if len(buf) < 4 or zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise IntegrityError("checkpoint checksum mismatch (truncated or corrupted)")
    body = _Reader(buf[:-4])
    body.pos = r.pos
    (hlen,) = body.unpack("<I")
    try:
        header = json.loads(body.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt checkpoint header: {exc}") from exc
    spec = ArchitectureSpec.from_dict(header["architecture"])
    (n_arrays,) = body.unpack("<I")
    arrays = []
    for _ in range(n_arrays):
        (n,) = body.unpack("<Q")
        arrays.append(np.frombuffer(body.take(8 * n), dtype="<f8").astype(np.float64))
    if body.pos != len(body.buf):
        raise IntegrityError("trailing bytes after checkpoint arrays")

    shapes = spec.param_shapes()
    swa_count = int(header.get("swa_count", 0))
    expected = len(shapes) * (2 if swa_count else 1)
    if n_arrays != expected:
        raise IntegrityError(f"checkpoint holds {n_arrays} arrays, architecture needs {expected}")
    for a, s in zip(arrays, shapes + shapes):
        if a.size != int(np.prod(s)):
            raise IntegrityError("array length does not match the architecture")
    params = ModelParams.from_arrays(spec, [a.reshape(s) for a, s in zip(arrays, shapes)],
                                     frozen=header.get("frozen", False))
    swa = None
    if swa_count:
        swa = SwaState([a.reshape(s) for a, s in zip(arrays[len(shapes):], shapes)], swa_count, spec)
    return Checkpoint(params, seed, header.get("optimizer", {}), swa, header.get("metadata", {}), version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
