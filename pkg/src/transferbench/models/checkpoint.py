"""Checkpoint serialization.

Layout: magic ``TABX`` (4 bytes), version byte, UTF-8 JSON header terminated
by a newline, 8-byte little-endian blob length, then the weight blob as raw
little-endian IEEE-754 float64 in parameter-table order.  The header is
readable without touching the blob.  save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json

import numpy as np

from .archs import Model, _param_table
from .spec import ModelSpec

MAGIC = b"TABX"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


def _header_bytes(model: Model) -> bytes:
    header = {"spec": model.spec.to_json(), "meta": model.meta}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: Model, path) -> None:
    blob = np.concatenate([model.params[name].reshape(-1)
                           for name, _, _ in _param_table(model.spec)])
    blob = np.ascontiguousarray(blob, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(_header_bytes(model))
        fh.write(b"\n")
        fh.write(len(blob.tobytes()).to_bytes(8, "little"))
        fh.write(blob.tobytes())


def read_header(path) -> dict:
    """Parse spec + training metadata without reading the weight blob."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}")
        version = fh.read(1)
        if version != bytes([VERSION]):
            raise CheckpointError(f"unsupported version {version!r}")
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise CheckpointError("unterminated header")
        return json.loads(line.decode("utf-8"))


def load_checkpoint(path) -> Model:
    header = read_header(path)
    spec = ModelSpec.from_json(header["spec"])
    with open(path, "rb") as fh:
        fh.read(4 + 1)
        fh.readline()
        nbytes = int.from_bytes(fh.read(8), "little")
        raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise TruncatedBlobError(f"blob truncated: expected {nbytes} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    table = _param_table(spec)
    expected = sum(int(np.prod(s)) for _, s, _ in table)
    if flat.size != expected:
        raise LengthMismatchError(
            f"blob holds {flat.size} parameters but spec implies {expected}")
    params, off = {}, 0
    for name, shape, _ in table:
        n = int(np.prod(shape))
        params[name] = flat[off:off + n].reshape(shape).copy()
        off += n
    return Model(spec, params, header.get("meta", {}))
