"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"NVKMCKPT"
    8       4     uint32 header length H
    12      H     UTF-8 JSON header, keys sorted, no whitespace
    12+H    8*N   float64 payload, arrays concatenated in header order
    end-32  32    SHA-256 of every preceding byte

The header holds ``format_version``, the full ``model_config`` echo,
free-form ``metadata`` (seeds, standardization, provenance) and an
``arrays`` list of ``{"name", "shape", "offset", "count"}`` records, where
``offset`` and ``count`` are in float64 elements from the payload start.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import jax.numpy as jnp
import numpy as np

from nvkm.errors import IncompatibleCheckpoint, ParseError
from nvkm.model import ModelConfig, VolterraModel

MAGIC = b"NVKMCKPT"
FORMAT_VERSION = "nvkm-ckpt-1"


def to_bytes(model: VolterraModel) -> bytes:
    arrays = []
    chunks = []
    offset = 0
    for name in sorted(model.params):
        a = np.asarray(model.params[name], dtype="<f8", order="C")
        arrays.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.reshape(-1).tobytes())
        offset += a.size
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "metadata": model.metadata,
        "arrays": arrays,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> VolterraModel:
    if len(blob) < len(MAGIC) + 4 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise ParseError("not an NVKM checkpoint (bad magic or too short)")
    body, digest = blob[:-32], blob[-32:]
    (hlen,) = struct.unpack("<I", body[8:12])
    if 12 + hlen > len(body):
        raise ParseError("checkpoint truncated inside header")
    try:
        header = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"checkpoint version {version!r}, expected {FORMAT_VERSION!r}")
    payload = body[12 + hlen :]
    n_values = sum(rec["count"] for rec in header["arrays"])
    if len(payload) != 8 * n_values:
        raise ParseError(f"checkpoint payload has {len(payload)} bytes, expected {8 * n_values}")
    if hashlib.sha256(body).digest() != digest:
        raise ParseError("checkpoint checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8")
    params = {}
    for rec in header["arrays"]:
        a = values[rec["offset"] : rec["offset"] + rec["count"]].reshape(rec["shape"])
        params[rec["name"]] = jnp.asarray(a.astype(np.float64))
    cfg = ModelConfig.from_dict(header["model_config"])
    return VolterraModel(cfg, params, header.get("metadata", {}))


def checkpoint_save(model: VolterraModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def checkpoint_load(path) -> VolterraModel:
    return from_bytes(Path(path).read_bytes())
