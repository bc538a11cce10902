"""Versioned, checksummed binary checkpoints.

Layout: magic, format version, JSON header (spec, tensor index, training
metadata), raw little-endian tensor payloads in index order, CRC32 of the
payload. Round trips are bit-exact; a tied head is stored once and re-tied
on load.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import TransformerModel, TransformerSpec
from .tensor import Tensor

MAGIC = b"LPLB"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: TransformerModel, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    index = []
    payload = bytearray()
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name].data)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
        payload.extend(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "tensors": index,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload))))
    return path


def load_checkpoint(path: str | Path) -> tuple[TransformerModel, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version} unsupported (expected {FORMAT_VERSION})")
    header_end = 12 + header_len
    if len(raw) < header_end + 4:
        raise CheckpointError(f"{path} is truncated")
    header = json.loads(raw[header_end - header_len:header_end].decode())
    payload = raw[header_end:-4]
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointError(f"{path} failed its checksum (corrupt or truncated)")
    spec = TransformerSpec.from_dict(header["spec"])

    tensors: dict[str, Tensor] = {}
    offset = 0
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        offset += nbytes
        tensors[entry["name"]] = Tensor(arr.reshape(entry["shape"]).copy(), requires_grad=True)
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload size does not match tensor index")

    model = _assemble(spec, tensors)
    return model, header["meta"]


def _assemble(spec: TransformerSpec, tensors: dict[str, Tensor]) -> TransformerModel:
    from .model import BLOCK_ROLES, Block

    try:
        embedding = tensors["embedding"]
        blocks = [
            Block(**{role: tensors[f"blocks.{i}.{role}"] for role in BLOCK_ROLES})
            for i in range(spec.num_layers)
        ]
        final_norm = tensors["final_norm"]
        lm_head = embedding if spec.tie_embeddings else tensors["lm_head"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc}") from exc
    return TransformerModel(spec, embedding, blocks, final_norm, lm_head)
