"""Single-file parameter container shared by every model in the pipeline.

Layout: 8-byte little-endian header length, UTF-8 JSON manifest mapping
array name -> {shape, dtype, offset}, then the raw little-endian array
bytes.  Offsets are relative to the end of the manifest.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_LEN_BYTES = 8


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def write_arrays(path, arrays):
    """Write {name: ndarray} to `path`; values are stored little-endian."""
    path = Path(path)
    manifest = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest[name] = {
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
            "offset": offset,
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(_LEN_BYTES, "little"))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def read_arrays(path):
    """Read a container back into {name: ndarray} (native byte order)."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _LEN_BYTES:
        raise CheckpointError(f"{path}: truncated header length")
    header_len = int.from_bytes(blob[:_LEN_BYTES], "little")
    header_end = _LEN_BYTES + header_len
    if header_end > len(blob):
        raise CheckpointError(f"{path}: header extends past end of file")
    try:
        manifest = json.loads(blob[_LEN_BYTES:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest is not an object")

    payload = blob[header_end:]
    arrays = {}
    for name, meta in manifest.items():
        try:
            shape = tuple(int(s) for s in meta["shape"])
            dtype = np.dtype(meta["dtype"])
            offset = int(meta["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad entry for {name!r}: {exc}") from exc
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = dtype.itemsize * count
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: array {name!r} spans [{offset}, {offset + nbytes}) "
                f"outside payload of {len(payload)} bytes"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        arrays[name] = np.ascontiguousarray(arr.reshape(shape).astype(dtype.newbyteorder("=")))
    return arrays


def write_sidecar(path, payload):
    """Write the JSON sidecar holding config, schedule constants, and stats."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_sidecar(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
