"""Versioned binary container: a JSON header plus raw tensor payload.

Layout (little-endian):

    magic      4 bytes  b"HDCK"
    version    u8       1
    header_len u64
    header     UTF-8 JSON (sorted keys; includes a tensor index of
               name -> {dtype, shape, offset, nbytes})
    payload    concatenated raw tensor bytes

Writing is fully deterministic: the same inputs produce identical bytes,
so checkpoints can be compared and hashed. Floats in the header survive
the JSON round trip exactly (repr-based encoding).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

_MAGIC = b"HDCK"
_VERSION = 1
_PREFIX = struct.Struct("<4sBQ")

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "float64": ("<f8", torch.float64),
    "int64": ("<i8", torch.int64),
    "int32": ("<i4", torch.int32),
}
_TORCH_NAMES = {v[1]: k for k, v in _DTYPES.items()}


def _to_numpy(tensor) -> np.ndarray:
    if torch.is_tensor(tensor):
        tensor = tensor.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(tensor)


def write_container(path, header: dict, tensors: dict) -> None:
    """Write header metadata and named tensors; tensor names are sorted so
    the byte layout is reproducible."""
    path = Path(path)
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {dtype_name}")
        raw = arr.astype(_DTYPES[dtype_name][0]).tobytes()
        index[name] = {
            "dtype": dtype_name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)

    full_header = dict(header)
    full_header["tensors"] = index
    encoded = json.dumps(full_header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(_MAGIC, _VERSION, len(encoded)))
        fh.write(encoded)
        for raw in blobs:
            fh.write(raw)


def read_container(path):
    """Read back (header, tensors); tensors are returned as torch tensors."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated container")
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(raw[_PREFIX.size:header_end].decode("utf-8"))
    index = header.pop("tensors", {})

    tensors = {}
    payload_start = header_end
    for name, meta in index.items():
        start = payload_start + meta["offset"]
        end = start + meta["nbytes"]
        if end > len(raw):
            raise FormatError(f"{path}: tensor {name!r} extends past end of file")
        np_dtype, torch_dtype = _DTYPES[meta["dtype"]]
        arr = np.frombuffer(raw, dtype=np_dtype, count=meta["nbytes"] // np.dtype(np_dtype).itemsize,
                            offset=start).reshape(meta["shape"]).copy()
        tensors[name] = torch.from_numpy(arr).to(torch_dtype)
    return header, tensors


def torch_dtype_name(dtype: torch.dtype) -> str:
    if dtype not in _TORCH_NAMES:
        raise FormatError(f"unsupported dtype {dtype}")
    return _TORCH_NAMES[dtype]
