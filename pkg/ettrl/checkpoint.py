"""Versioned single-file checkpoints.

Layout: ``ETTRLCKP`` magic, then four sections (header, config, params, rng),
each prefixed with its little-endian u64 byte length, then a SHA-256 digest of
everything before it. Params are written sorted by context key so equal
tables always serialise to equal bytes.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from core import RngStream
from errors import LoadFailure, WriteFailure
from policy import ContextKey, PolicyParams

logger = logging.getLogger(__name__)

MAGIC = b"ETTRLCKP"
FORMAT_VERSION = 1
_DIGEST_LEN = 32
_KEY = struct.Struct("<Qqi")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class Checkpoint:
    config_json: str
    params: PolicyParams
    rng: RngStream
    episode: int


def _section(payload: bytes) -> bytes:
    return _U64.pack(len(payload)) + payload


def _encode_params(params: PolicyParams) -> bytes:
    parts = [struct.pack("<QII", len(params), params.vocab_size, params.bucket_count)]
    for key, row in params.sorted_items():
        parts.append(_KEY.pack(key.prompt_fingerprint, key.last_token, key.position_bucket))
        parts.append(np.ascontiguousarray(row, dtype="<f8").tobytes())
    return b"".join(parts)


def _decode_params(blob: bytes) -> PolicyParams:
    count, vocab_size, bucket_count = struct.unpack_from("<QII", blob, 0)
    row_bytes = 8 * vocab_size
    offset = struct.calcsize("<QII")
    if len(blob) != offset + count * (_KEY.size + row_bytes):
        raise LoadFailure("params section has the wrong size")
    table: dict[ContextKey, np.ndarray] = {}
    for _ in range(count):
        fp, last, bucket = _KEY.unpack_from(blob, offset)
        offset += _KEY.size
        row = np.frombuffer(blob, dtype="<f8", count=vocab_size, offset=offset).astype(np.float64)
        offset += row_bytes
        table[ContextKey(fp, last, bucket)] = row
    return PolicyParams(table, vocab_size, bucket_count)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    rng = checkpoint.rng
    body = b"".join(
        [
            MAGIC,
            _section(struct.pack("<IQ", FORMAT_VERSION, checkpoint.episode)),
            _section(checkpoint.config_json.encode("utf-8")),
            _section(_encode_params(checkpoint.params)),
            _section(struct.pack("<QQQ", rng.seed, rng.stream_id, rng.cursor)),
        ]
    )
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + _DIGEST_LEN or not data.startswith(MAGIC):
        raise LoadFailure("not a checkpoint file")
    body, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise LoadFailure("checkpoint digest mismatch (truncated or corrupt file)")

    sections: list[bytes] = []
    offset = len(MAGIC)
    while offset < len(body):
        if offset + _U64.size > len(body):
            raise LoadFailure("dangling section length")
        (size,) = _U64.unpack_from(body, offset)
        offset += _U64.size
        if offset + size > len(body):
            raise LoadFailure("section runs past the end of the file")
        sections.append(body[offset : offset + size])
        offset += size
    if len(sections) != 4:
        raise LoadFailure(f"expected 4 sections, found {len(sections)}")

    header, config, params, rng = sections
    try:
        version, episode = struct.unpack("<IQ", header)
        if version != FORMAT_VERSION:
            raise LoadFailure(f"unsupported checkpoint version {version}")
        seed, stream_id, cursor = struct.unpack("<QQQ", rng)
        return Checkpoint(config.decode("utf-8"), _decode_params(params), RngStream(seed, stream_id, cursor), episode)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise LoadFailure(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(checkpoint: Checkpoint, path: str | os.PathLike) -> Path:
    """Write atomically: the target is either the old file or the complete new one."""
    path = Path(path)
    data = encode_checkpoint(checkpoint)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    except OSError as exc:
        raise WriteFailure(f"could not write checkpoint {path}: {exc}") from exc
    logger.debug("checkpoint episode=%d written to %s (%d bytes)", checkpoint.episode, path, len(data))
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadFailure(f"could not read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


__all__ = ["Checkpoint", "FORMAT_VERSION", "MAGIC", "decode_checkpoint", "encode_checkpoint", "load_checkpoint", "save_checkpoint"]
