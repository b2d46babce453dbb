"""Binary container for named tensors (magic "ESLG").

Little-endian layout:
  header: magic "ESLG", u32 format version, u32 entry count
  entry:  u16 name length, UTF-8 name, u8 dtype code, u8 rank, u32 dims...,
          payload.
Dtype codes: 0 = real32 raw, 1 = int4 blocks (u32 block_size, u32 block count,
float32 scales, packed codes zero-padded to a byte boundary), 2 = UTF-8 JSON
bytes (rank 1, dims = [byte length]) used for the single config entry.
Readers reject unknown magic or version.
"""

from __future__ import annotations

import json
import struct
from typing import Any, BinaryIO

import numpy as np

from .errors import FormatError
from .quant import QuantizedTensor

MAGIC = b"ESLG"
VERSION = 1

DTYPE_REAL32 = 0
DTYPE_INT4 = 1
DTYPE_JSON = 2

CONFIG_ENTRY = "__config__"


def _write_entry_header(fh: BinaryIO, name: str, dtype: int, dims: tuple[int, ...]) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", dtype, len(dims)))
    for d in dims:
        fh.write(struct.pack("<I", d))


def write_checkpoint(path, tensors: dict[str, Any], config: dict) -> None:
    """Write the config entry followed by tensors in the given dict order."""
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors) + 1))
        _write_entry_header(fh, CONFIG_ENTRY, DTYPE_JSON, (len(config_bytes),))
        fh.write(config_bytes)
        for name, value in tensors.items():
            if isinstance(value, QuantizedTensor):
                _write_entry_header(fh, name, DTYPE_INT4, value.dims)
                fh.write(struct.pack("<II", value.block_size, value.num_blocks))
                fh.write(value.scales.astype("<f4").tobytes())
                fh.write(value.packed.tobytes())
            else:
                arr = np.ascontiguousarray(value, dtype=np.float32)
                _write_entry_header(fh, name, DTYPE_REAL32, arr.shape)
                fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("checkpoint truncated")
    return data


def read_checkpoint(path) -> tuple[dict[str, Any], dict]:
    """Read a container; returns (tensors, config dict)."""
    tensors: dict[str, Any] = {}
    config: dict | None = None
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}; not an ESLG checkpoint")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            dtype, rank = struct.unpack("<BB", _read_exact(fh, 2))
            dims = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
            numel = 1
            for d in dims:
                numel *= d
            if dtype == DTYPE_REAL32:
                payload = _read_exact(fh, 4 * numel)
                tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            elif dtype == DTYPE_INT4:
                block_size, nblocks = struct.unpack("<II", _read_exact(fh, 8))
                scales = np.frombuffer(_read_exact(fh, 4 * nblocks), dtype="<f4").copy()
                packed = np.frombuffer(_read_exact(fh, (numel + 1) // 2), dtype=np.uint8).copy()
                tensors[name] = QuantizedTensor(
                    dims=dims, block_size=block_size, packed=packed, scales=scales
                )
            elif dtype == DTYPE_JSON:
                payload = _read_exact(fh, numel)
                try:
                    decoded = json.loads(payload.decode("utf-8"))
                except ValueError as exc:
                    raise FormatError(f"corrupt JSON entry {name!r}") from exc
                if name == CONFIG_ENTRY:
                    config = decoded
                else:
                    tensors[name] = decoded
            else:
                raise FormatError(f"unknown dtype code {dtype} for entry {name!r}")
    if config is None:
        raise FormatError("checkpoint has no config entry")
    return tensors, config
