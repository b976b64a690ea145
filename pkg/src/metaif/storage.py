"""Self-describing binary container for float64 arrays.

Layout::

    b"MIFC" | u32 version | u64 header length | UTF-8 JSON header | payload

The header lists every array as ``{"name", "shape", "offset"}`` (offset in
float64 elements into the payload) plus arbitrary JSON metadata. The payload is
the concatenation of all arrays as little-endian float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MetaIFError
from .model import Architecture, ParamVector

MAGIC = b"MIFC"
VERSION = 1


class ContainerError(MetaIFError, ValueError):
    pass


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.reshape(-1))
        offset += a.size
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    payload = np.concatenate(chunks).astype("<f8") if chunks else np.zeros(0, "<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        fh.write(payload.tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a metaif container")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode())
    payload = np.frombuffer(raw[16 + hlen :], dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = payload[e["offset"] : e["offset"] + size]
        if chunk.size != size:
            raise ContainerError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = chunk.reshape(tuple(e["shape"])).astype(np.float64)
    return header["meta"], arrays


def save_param_vector(path, p: ParamVector) -> None:
    write_container(path, {"kind": "param_vector", "arch": p.arch.to_dict()}, {"values": p.values})


def load_param_vector(path) -> ParamVector:
    meta, arrays = read_container(path)
    if meta.get("kind") != "param_vector":
        raise ContainerError(f"{path}: expected a param_vector container, got {meta.get('kind')}")
    return ParamVector(Architecture.from_dict(meta["arch"]), arrays["values"])


def param_vector_json(p: ParamVector) -> dict:
    """Human-readable export: per-layer weight matrices with the bias row last."""
    return {
        "arch": p.arch.to_dict(),
        "layers": [p.layer(l).tolist() for l in range(p.arch.n_layers)],
    }
