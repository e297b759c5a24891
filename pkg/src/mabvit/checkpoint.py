"""Flat binary model checkpoints.

Layout (all integers unsigned 64-bit little-endian, floats little-endian
float64):

    8 bytes   magic "MABVIT01"
    u64       config text length, then that many bytes of UTF-8 key=value lines
    repeated, one record per parameter tensor, sorted by name:
        u64       name length, then the UTF-8 name
        u64       rank
        u64 * rank  dims
        f64 * prod(dims)  payload

The parameter name set is fully determined by the embedded config, so the
loader reads exactly that many records and rejects anything missing, extra,
out of order, or truncated, reporting the byte offset where reading failed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import (
    ModelConfig,
    ModelParams,
    assemble_params,
    config_from_text,
    config_to_text,
    named_params,
    param_shapes,
)
from .tensor import Tensor

MAGIC = b"MABVIT01"

_MAX_NAME = 4096
_MAX_CONFIG = 1 << 20
_MAX_RANK = 8
_MAX_DIM = 1 << 32


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig) -> None:
    named = named_params(params)
    cfg = config_to_text(config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(cfg)))
        f.write(cfg)
        for name in sorted(named):
            t = named[name]
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", t.ndim))
            f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte {self.off} "
                f"(need {n} bytes, {len(self.blob) - self.off} remain)"
            )
        chunk = self.blob[self.off : self.off + n]
        self.off += n
        return chunk

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint; returns (params, config) with requires_grad set."""
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0 (expected {MAGIC!r})")

    cfg_len = r.u64("config length")
    if cfg_len > _MAX_CONFIG:
        raise FormatError(f"{path}: config record length {cfg_len} exceeds {_MAX_CONFIG}")
    try:
        cfg_text = r.take(cfg_len, "config record").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: config record is not valid UTF-8: {e}") from None
    config = config_from_text(cfg_text)

    expected = param_shapes(config)
    tensors: dict[str, Tensor] = {}
    prev_name = None
    for _ in range(len(expected)):
        name_at = r.off
        name_len = r.u64("name length")
        if name_len > _MAX_NAME:
            raise FormatError(
                f"{path}: parameter name length {name_len} at byte {name_at} "
                f"exceeds {_MAX_NAME}"
            )
        try:
            name = r.take(name_len, "parameter name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: parameter name is not valid UTF-8: {e}") from None
        if prev_name is not None and name <= prev_name:
            raise FormatError(
                f"{path}: parameter {name!r} out of order after {prev_name!r} "
                f"(records must be sorted by name)"
            )
        prev_name = name
        if name not in expected:
            raise FormatError(f"{path}: unexpected parameter {name!r} at byte {name_at}")
        rank = r.u64(f"rank of {name}")
        if rank > _MAX_RANK:
            raise FormatError(f"{path}: rank {rank} of {name!r} exceeds {_MAX_RANK}")
        dims = tuple(r.u64(f"dim {i} of {name}") for i in range(rank))
        if any(d == 0 or d > _MAX_DIM for d in dims):
            raise FormatError(f"{path}: implausible dims {dims} for {name!r}")
        if dims != expected[name]:
            raise FormatError(
                f"{path}: {name!r} has shape {dims}, config expects {expected[name]}"
            )
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(8 * n, f"payload of {name}")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = Tensor(data, requires_grad=True)
    if r.off != len(blob):
        raise FormatError(
            f"{path}: {len(blob) - r.off} trailing bytes after the last parameter "
            f"(byte {r.off})"
        )
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise FormatError(f"{path}: missing parameters: {missing[:5]}")
    return assemble_params(tensors, config), config
