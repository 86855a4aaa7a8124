"""Binary checkpoint format for encoder/decoder weights.

Layout: magic, version, length-prefixed JSON header (kind, epoch, config
hash, rng state, array manifest), little-endian array payload, then a
sha256 digest of everything before it. The trailing digest turns
truncation or bit corruption into a load-time error.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"UN2C"
VERSION = 1

_DTYPE_TAGS = {"f4": np.dtype("<f4"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}
_TAG_FOR = {np.dtype(np.float32): "f4", np.dtype(np.int64): "i8", np.dtype(np.uint8): "u1"}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, kind, arrays, epoch=0, config_hash="", rng_state=""):
    manifest = []
    payload = bytearray()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype not in _TAG_FOR:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name!r}")
        tag = _TAG_FOR[a.dtype]
        manifest.append({"name": name, "shape": list(a.shape),
                         "dtype": tag, "offset": len(payload)})
        payload += a.astype(_DTYPE_TAGS[tag]).tobytes()
    header = json.dumps({"kind": kind, "epoch": int(epoch),
                         "config_hash": config_hash, "rng_state": rng_state,
                         "manifest": manifest},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<HI", VERSION, len(header)) + header + bytes(payload)
    blob = body + hashlib.sha256(body).digest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(body).hexdigest()


def load_checkpoint(path, expected_kind=None):
    """Returns (arrays, metadata). Verifies magic, version, digest, and kind."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint file: bad magic {blob[:4]!r}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (truncated or corrupted)")
    version, header_len = struct.unpack("<HI", body[4:10])
    if version > VERSION:
        raise CheckpointError(f"checkpoint version {version} is newer than supported {VERSION}")
    header = json.loads(body[10:10 + header_len].decode())
    if expected_kind is not None and header["kind"] != expected_kind:
        raise CheckpointError(f"expected a {expected_kind!r} checkpoint, got {header['kind']!r}")
    payload = body[10 + header_len:]
    arrays = {}
    for ent in header["manifest"]:
        dt = _DTYPE_TAGS[ent["dtype"]]
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"]
        a = np.frombuffer(payload[start:start + n * dt.itemsize], dtype=dt)
        arrays[ent["name"]] = a.reshape(ent["shape"]).copy()
    meta = {k: header[k] for k in ("kind", "epoch", "config_hash", "rng_state")}
    return arrays, meta
