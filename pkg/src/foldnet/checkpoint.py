"""Binary checkpoint container.

Layout: the magic string, a length-prefixed JSON metadata block (config
echo, unfolding metadata, step, digests), then the payload: named tensors
as (name length, name bytes, rank, dims, float64 values), all fixed-width
fields little-endian 64-bit. The payload holds exactly the physical-layer,
frontend, head, and optional decoder tensors; a schedule never materializes
duplicated copies, so the file size is independent of the maximum depth.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .folding import FoldableEncoder, ModelConfig, model_from_arrays

MAGIC = b"FOLDNET1"
FORMAT_VERSION = 1
_MAX_TENSORS = 100_000
_MAX_NAME = 4096
_MAX_RANK = 8
_MAX_DIM = 2 ** 32


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def _u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def _encode_payload(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(_u64(len(encoded)))
        chunks.append(encoded)
        chunks.append(_u64(arr.ndim))
        for dim in arr.shape:
            chunks.append(_u64(dim))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: FoldableEncoder, meta: dict, path) -> None:
    """Write atomically (temp file then rename); bit-exact on reload."""
    arrays = {name: t.data for name, t in model.parameters().items()}
    payload = _encode_payload(arrays)
    metadata = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "n_p": model.n_physical,
        "N_f": model.config.max_depth,
        "mask": model.config.to_dict()["mask"],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    metadata.update(meta or {})
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    blob = b"".join([MAGIC, _u64(len(meta_bytes)), meta_bytes,
                     _u64(len(arrays)), payload])
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated payload while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path) -> tuple[FoldableEncoder, dict]:
    """Validate magic, metadata, dims, and the payload digest, then rebuild
    the model; returns (model, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"bad magic: not a {MAGIC.decode()} checkpoint")
    meta_len = reader.u64("metadata length")
    if meta_len > len(blob):
        raise CheckpointError("truncated payload while reading metadata")
    try:
        metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from exc
    if metadata.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format_version {metadata.get('format_version')!r}")

    n_tensors = reader.u64("tensor count")
    if n_tensors > _MAX_TENSORS:
        raise CheckpointError(f"implausible tensor count {n_tensors}")
    payload_start = reader.pos
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = reader.u64("name length")
        if name_len > _MAX_NAME:
            raise CheckpointError(f"implausible name length {name_len}")
        name = reader.take(name_len, "name").decode("utf-8")
        rank = reader.u64("rank")
        if rank > _MAX_RANK:
            raise CheckpointError(f"tensor {name}: implausible rank {rank}")
        dims = []
        count = 1
        for _ in range(rank):
            dim = reader.u64("dim")
            if dim == 0 or dim > _MAX_DIM:
                raise CheckpointError(f"tensor {name}: dim overflow ({dim})")
            count *= dim
            if count > _MAX_DIM:
                raise CheckpointError(f"tensor {name}: dim overflow (product)")
            dims.append(dim)
        raw = reader.take(8 * count, f"values of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    if reader.pos != len(blob):
        raise CheckpointError("trailing bytes after payload")

    digest = hashlib.sha256(blob[payload_start:]).hexdigest()
    if digest != metadata.get("payload_sha256"):
        raise CheckpointError("payload digest mismatch (file tampered or corrupt)")

    try:
        config = ModelConfig.from_dict(metadata["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config metadata: {exc}") from exc
    if metadata.get("n_p") != config.n_physical:
        raise CheckpointError("metadata n_p disagrees with config")
    try:
        model = model_from_arrays(config, arrays)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return model, metadata
