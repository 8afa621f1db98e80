"""Single-file, self-describing model checkpoints.

Layout::

    b"FITC" | version: u32 LE | header_len: u32 LE | header: UTF-8 JSON | payload

The header lists every array as ``{"name", "shape", "nbytes"}``; the payload is
those arrays back to back, row-major float64 little-endian, in header order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import canonical_json, config_hash
from .corpus import Vocabulary
from .errors import (CheckpointError, CheckpointStructureError, CheckpointTruncatedError,
                     CheckpointVersionError, InputError)

MAGIC = b"FITC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    vocab: Vocabulary | None = None
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def vocab_hash(self) -> str | None:
        return None if self.vocab is None else self.vocab.hash

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    specs, chunks = [], []
    for name, arr in ckpt.arrays.items():
        data = np.array(arr, dtype=_DTYPE, order="C")  # ascontiguousarray would promote 0-d to 1-d
        specs.append({"name": name, "shape": list(data.shape), "nbytes": data.nbytes})
        chunks.append(data.tobytes(order="C"))
    header = {
        "kind": ckpt.kind,
        "arrays": specs,
        "vocab": None if ckpt.vocab is None else ckpt.vocab.to_dict(),
        "vocab_hash": ckpt.vocab_hash,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
    }
    raw = canonical_json(header).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(chunks)


def load_checkpoint(blob: bytes) -> Checkpoint:
    """Parse a checkpoint; nothing is returned unless every check passes."""
    if len(blob) < _PREFIX.size:
        raise CheckpointTruncatedError(f"checkpoint is {len(blob)} bytes, shorter than its fixed prefix")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointVersionError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + header_len
    if len(blob) < start:
        raise CheckpointTruncatedError("checkpoint ends inside its header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointStructureError(f"unreadable checkpoint header: {exc}") from None
    try:
        specs = header["arrays"]
        kind = header["kind"]
    except (KeyError, TypeError):
        raise CheckpointStructureError("checkpoint header lacks 'kind' or 'arrays'") from None

    arrays: dict[str, np.ndarray] = {}
    offset = start
    for spec in specs:
        name, shape, nbytes = spec["name"], tuple(spec["shape"]), spec["nbytes"]
        if any(d < 0 for d in shape) or int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize != nbytes:
            raise CheckpointStructureError(
                f"array {name!r}: shape {list(shape)} does not match its {nbytes}-byte payload")
        if name in arrays:
            raise CheckpointStructureError(f"array {name!r} appears twice")
        if offset + nbytes > len(blob):
            raise CheckpointTruncatedError(
                f"payload ends inside array {name!r} ({len(blob) - offset} of {nbytes} bytes)")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointStructureError(f"{len(blob) - offset} trailing bytes after the declared arrays")

    vocab = None
    if header.get("vocab") is not None:
        try:
            vocab = Vocabulary.from_dict(header["vocab"])
        except (InputError, KeyError, TypeError) as exc:
            raise CheckpointStructureError(f"invalid vocabulary in header: {exc}") from None
        if vocab.hash != header.get("vocab_hash"):
            raise CheckpointStructureError("stored vocabulary does not match the recorded vocab hash")
    config = header.get("config") or {}
    if config_hash(config) != header.get("config_hash"):
        raise CheckpointStructureError("stored config does not match the recorded config hash")
    return Checkpoint(kind=kind, arrays=arrays, vocab=vocab, config=config, meta=header.get("meta") or {})


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(save_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None
    except IsADirectoryError:
        raise InputError(f"checkpoint path is a directory: {path}") from None
    try:
        return load_checkpoint(blob)
    except CheckpointError as exc:
        raise type(exc)(f"{path}: {exc}") from None
