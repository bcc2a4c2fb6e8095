"""Binary checkpoint files.

Layout::

    b"LLRC" | u32 LE version | u32 LE header length | JSON header | payload

The header lists tensor names and shapes in payload order, the model spec,
training metadata and the SHA-256 of the payload.  The payload is the
concatenation of every tensor as little-endian float64, C order.
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from llr.errors import FormatError
from llr.models import ModelSpec, ParamSet

MAGIC = b"LLRC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: ParamSet


def save_checkpoint(path, spec, params, digest_of_config=None):
    params.validate(spec)
    names = sorted(params.tensors)
    chunks = [np.ascontiguousarray(params.tensors[n], dtype="<f8").tobytes() for n in names]
    payload = b"".join(chunks)
    header = {
        "spec": spec.to_dict(),
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
        "seed": params.seed,
        "epoch": params.epoch,
        "meta": params.meta,
        "config_digest": digest_of_config,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise FormatError("checkpoint shorter than its fixed prefix", len(blob))
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}; this reader supports version {VERSION}", 4)
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise FormatError("truncated header", len(blob))
    try:
        header = json.loads(blob[start : start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", start) from exc
    payload = blob[start + hlen :]
    offset = start + hlen
    if len(payload) != header["payload_bytes"]:
        raise FormatError(
            f"truncated payload: expected {header['payload_bytes']} bytes, found {len(payload)}", offset + len(payload)
        )
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise FormatError("payload digest mismatch", offset)

    spec = ModelSpec.from_dict(header["spec"])
    tensors = {}
    pos = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        tensors[entry["name"]] = np.frombuffer(payload[pos : pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(payload):
        raise FormatError(f"payload holds {len(payload)} bytes but tensors describe {pos}", offset + pos)
    params = ParamSet(tensors, seed=header["seed"], epoch=header["epoch"], meta=header.get("meta") or {})
    params.validate(spec)
    return Checkpoint(spec, params)
