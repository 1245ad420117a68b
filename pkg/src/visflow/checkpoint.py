"""Binary checkpoint persistence.

File layout: magic b"HMAP", 32-bit little-endian format version, 64-bit
little-endian header length, UTF-8 JSON header, then raw little-endian
float64 tensor payloads in manifest order. The header holds the model config
and a tensor manifest of (name, shape, offset), offsets relative to the start
of the payload section. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .model import ModelConfig, ModelParams, param_manifest

MAGIC = b"HMAP"
FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    if config != params.config:
        raise ManifestError("config does not match the parameters' config")
    manifest = []
    offset = 0
    payloads = []
    for name, arr in params.tensors():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": asdict(config), "tensors": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for data in payloads:
            f.write(data)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < 16:
        raise TruncatedPayloadError("file too short for its fixed-size header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, supported {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end:
        raise TruncatedPayloadError("header extends past end of file")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
        config = ModelConfig(**header["config"])
        entries = header["tensors"]
    except (ValueError, TypeError, KeyError) as exc:
        raise ManifestError(f"malformed header: {exc}") from exc

    expected = dict(param_manifest(config))
    seen = [e.get("name") for e in entries]
    if sorted(seen) != sorted(expected):
        raise ManifestError("tensor manifest does not list every model tensor exactly once")

    payload = blob[header_end:]
    tensors = {}
    for entry in entries:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        if shape != expected[name]:
            raise ManifestError(f"tensor {name!r} has shape {shape}, expected {expected[name]}")
        offset = int(entry["offset"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset < 0 or offset + size > len(payload):
            raise TruncatedPayloadError(f"payload for {name!r} extends past end of file")
        arr = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
    return ModelParams.from_tensor_dict(config, tensors), config
