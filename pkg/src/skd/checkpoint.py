"""SKDC checkpoint files.

Layout (little-endian, no padding)::

    b"SKDC" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8.  Model tensors live under
``phi.*``, ``theta.*`` and ``psi.*``; run metadata (backbone config, seeds,
resolved run config) is stored as JSON text in a uint8 tensor ``meta.config``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from skd.errors import FormatError
from skd.model import BackboneConfig, ModelParams
from skd.tensor import Tensor

MAGIC = b"SKDC"
VERSION = 1
META_NAME = "meta.config"

DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in DTYPE_CODES:
            raise ValueError(f"cannot store dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    """Parse an SKDC byte string; raises FormatError without returning partial data."""
    pos = 0

    def read(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if read(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'SKDC'", 0)
    version, count = struct.unpack("<II", read(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", read(2, "name length"))
        try:
            name = read(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start + 2) from None
        code, rank = struct.unpack("<BB", read(2, "dtype/rank"))
        if code not in CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name}", pos - 2)
        dims = struct.unpack(f"<{rank}I", read(4 * rank, "dims"))
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = read(nbytes, f"payload of {name}")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name}", start)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return tensors


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    info = {"backbone": params.config.to_dict(), **(meta or {})}
    tensors = {name: t.data for name, t in params.named().items()}
    tensors[META_NAME] = np.frombuffer(json.dumps(info, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path, requires_grad: bool = True) -> tuple[ModelParams, dict]:
    """Returns ``(params, meta)``; the backbone config comes from the metadata tensor."""
    tensors = decode_tensors(Path(path).read_bytes())
    meta_raw = tensors.pop(META_NAME, None)
    meta = json.loads(meta_raw.tobytes().decode("utf-8")) if meta_raw is not None else {}
    config = BackboneConfig.from_dict(meta["backbone"]) if "backbone" in meta else _infer_config(tensors)
    try:
        params = ModelParams.from_named(
            config, {k: Tensor(v, requires_grad=requires_grad) for k, v in tensors.items()})
    except ValueError as exc:
        raise FormatError(f"checkpoint tensors inconsistent: {exc}") from exc
    return params, meta


def _infer_config(tensors: dict[str, np.ndarray]) -> BackboneConfig:
    filters, i = [], 1
    while f"phi.block{i}.weight" in tensors:
        filters.append(tensors[f"phi.block{i}.weight"].shape[0])
        i += 1
    if not filters or "theta.weight" not in tensors:
        raise FormatError("checkpoint lacks phi/theta tensors and metadata")
    return BackboneConfig(
        block_filters=tuple(filters),
        input_channels=tensors["phi.block1.weight"].shape[1],
        input_size=2 ** len(filters),
        num_classes=tensors["theta.weight"].shape[1],
    )


def params_digest(params: ModelParams, prefix: str = "") -> str:
    """SHA-256 over names, shapes, dtypes and raw bytes of the selected tensors."""
    h = hashlib.sha256()
    for name, t in sorted(params.named().items()):
        if name.startswith(prefix):
            h.update(f"{name}:{t.shape}:{t.dtype}".encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
