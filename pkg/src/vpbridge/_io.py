"""Binary container shared by the checkpoint, embedding, and trajectory files.

Layout: magic bytes, u32 little-endian metadata length, UTF-8 JSON metadata,
raw payload (float32 little-endian tensor data, in the order the metadata
declares).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch


def pack_block(magic: bytes, meta: dict, payload: bytes) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<I", len(meta_bytes)) + meta_bytes + payload


def write_block_file(path: str | Path, magic: bytes, meta: dict, payload: bytes) -> None:
    Path(path).write_bytes(pack_block(magic, meta, payload))


def unpack_block(blob: bytes, magic: bytes) -> tuple[dict, bytes]:
    if blob[: len(magic)] != magic:
        raise ValueError(f"bad magic: expected {magic!r}, got {blob[:len(magic)]!r}")
    offset = len(magic)
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    meta = json.loads(blob[offset : offset + meta_len].decode("utf-8"))
    return meta, blob[offset + meta_len :]


def read_block_file(path: str | Path, magic: bytes) -> tuple[dict, bytes]:
    return unpack_block(Path(path).read_bytes(), magic)


def tensors_to_payload(tensors: list[tuple[str, torch.Tensor]]) -> tuple[list[dict], bytes]:
    """Serialize named tensors to float32 LE, returning the declaration list."""
    decls = []
    chunks = []
    for name, tensor in tensors:
        arr = tensor.detach().cpu().numpy().astype("<f4")
        decls.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    return decls, b"".join(chunks)


def payload_to_tensors(decls: list[dict], payload: bytes) -> dict[str, torch.Tensor]:
    out = {}
    offset = 0
    for decl in decls:
        shape = tuple(decl["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[decl["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"payload size mismatch: consumed {offset}, have {len(payload)}")
    return out
