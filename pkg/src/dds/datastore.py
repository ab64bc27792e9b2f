"""Bit-exact on-disk formats for datasets and run metrics.

One binary container serves both raw episode datasets and relabeled
skill datasets, distinguished by a header "kind" field:

    bytes 0..4    magic b"DDS1"
    bytes 4..12   little-endian uint64 header length
    header        UTF-8 JSON: kind, env spec, dims, per-array
                  {shape, dtype, offset} entries, creation seed
    payload       raw little-endian arrays at the recorded offsets

Floats are stored as "<f4", terminal flags as "|u1", skill indices as
"<i8".  Offsets are validated against the file length and checked for
overlap before anything is allocated.  Metrics are RFC-4180 CSV.
"""

from __future__ import annotations

import csv
import json

import numpy as np

MAGIC = b"DDS1"
ALLOWED_DTYPES = {"<f4", "<i8", "|u1"}


class DataFormatError(Exception):
    """Raised for malformed dataset files or invalid write requests."""


def _pack(header: dict, arrays: dict):
    entries = {}
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        dtype = arr.dtype.newbyteorder("<")
        dstr = dtype.str if dtype.str != "|u1" else "|u1"
        if dstr not in ALLOWED_DTYPES:
            raise DataFormatError(f"array {name!r} has unsupported dtype {arr.dtype}")
        arr = arr.astype(dtype, copy=False)
        entries[name] = {"shape": list(arr.shape), "dtype": dstr, "offset": offset}
        chunk = arr.tobytes()
        chunks.append(chunk)
        offset += len(chunk)
    header = dict(header, arrays=entries)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += len(header_bytes).to_bytes(8, "little")
    out += header_bytes
    for chunk in chunks:
        out += chunk
    return bytes(out)


def _unpack(blob: bytes):
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataFormatError("bad magic: not a DDS1 dataset file")
    header_len = int.from_bytes(blob[4:12], "little")
    if 12 + header_len > len(blob):
        raise DataFormatError("truncated file: header extends past end of file")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"unreadable header: {e}") from e
    payload = blob[12 + header_len:]

    entries = header.get("arrays")
    if not isinstance(entries, dict):
        raise DataFormatError("header missing 'arrays' table")
    spans = []
    arrays = {}
    for name, ent in entries.items():
        try:
            shape = tuple(int(x) for x in ent["shape"])
            dstr = ent["dtype"]
            offset = int(ent["offset"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"bad array entry {name!r}: {e}") from e
        if dstr not in ALLOWED_DTYPES:
            raise DataFormatError(f"array {name!r} has unsupported dtype {dstr}")
        if offset < 0 or any(s < 0 for s in shape):
            raise DataFormatError(f"array {name!r} has negative offset or shape")
        dtype = np.dtype(dstr)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise DataFormatError(
                f"array {name!r} extends past end of payload "
                f"({offset + nbytes} > {len(payload)})"
            )
        spans.append((offset, offset + nbytes, name))
        arrays[name] = np.frombuffer(
            payload, dtype=dtype, count=count, offset=offset
        ).reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise DataFormatError(f"arrays {n0!r} and {n1!r} overlap in the payload")
    return header, arrays


def write_episode_dataset(path, episodes, env_spec, seed, extra_header=None):
    """Raw offline dataset: per-episode state/action/reward/terminal arrays."""
    if not episodes:
        raise DataFormatError("refusing to write an empty episode dataset")
    dim_s = episodes[0].states.shape[1]
    dim_a = episodes[0].actions.shape[1]
    arrays = {}
    meta = []
    for i, ep in enumerate(episodes):
        if ep.states.shape[1] != dim_s or ep.actions.shape[1] != dim_a:
            raise DataFormatError(f"episode {i} has inconsistent dimensions")
        arrays[f"ep{i}.states"] = ep.states.astype(np.float32)
        arrays[f"ep{i}.actions"] = ep.actions.astype(np.float32)
        arrays[f"ep{i}.rewards"] = ep.rewards.astype(np.float32)
        arrays[f"ep{i}.terminals"] = ep.terminals.astype(np.uint8)
        arrays[f"ep{i}.final_state"] = ep.final_state.astype(np.float32)
        meta.append({"seed": int(ep.seed), "script": ep.script, "length": len(ep)})
    header = {
        "kind": "raw-episodes",
        "env": env_spec.to_dict(),
        "dim_s": int(dim_s), "dim_a": int(dim_a),
        "num_episodes": len(episodes),
        "episodes": meta,
        "seed": int(seed),
    }
    if extra_header:
        header.update(extra_header)
    with open(path, "wb") as f:
        f.write(_pack(header, arrays))


def read_episode_dataset(path):
    """Returns (episodes, header); inverse of write_episode_dataset."""
    from .envs import Episode

    with open(path, "rb") as f:
        header, arrays = _unpack(f.read())
    if header.get("kind") != "raw-episodes":
        raise DataFormatError(f"expected kind 'raw-episodes', got {header.get('kind')!r}")
    episodes = []
    for i, meta in enumerate(header["episodes"]):
        try:
            episodes.append(Episode(
                states=arrays[f"ep{i}.states"],
                actions=arrays[f"ep{i}.actions"],
                rewards=arrays[f"ep{i}.rewards"],
                terminals=arrays[f"ep{i}.terminals"].astype(bool),
                final_state=arrays[f"ep{i}.final_state"],
                seed=meta["seed"], script=meta.get("script", ""),
            ))
        except KeyError as e:
            raise DataFormatError(f"episode {i} arrays missing from payload: {e}") from e
    return episodes, header


def write_relabeled_dataset(path, dataset, extra_header=None):
    """Skill-level dataset D^H in columnar form."""
    from .relabel import RelabeledDataset

    assert isinstance(dataset, RelabeledDataset)
    if len(dataset) == 0:
        raise DataFormatError("refusing to write an empty relabeled dataset")
    states, skills, rewards, next_states, terminals = dataset.arrays()
    arrays = {
        "states": states.astype(np.float32),
        "skills": skills.astype(np.int64),
        "rewards": rewards.astype(np.float32),
        "next_states": next_states.astype(np.float32),
        "terminals": terminals.astype(np.uint8),
    }
    header = {
        "kind": "relabeled",
        "num_transitions": len(dataset),
        "horizon": int(dataset.horizon),
        "gamma": float(dataset.gamma),
        "skill_fingerprint": dataset.skill_fingerprint,
    }
    if extra_header:
        header.update(extra_header)
    with open(path, "wb") as f:
        f.write(_pack(header, arrays))


def read_relabeled_dataset(path):
    from .relabel import RelabeledDataset, RelabeledTransition

    with open(path, "rb") as f:
        header, arrays = _unpack(f.read())
    if header.get("kind") != "relabeled":
        raise DataFormatError(f"expected kind 'relabeled', got {header.get('kind')!r}")
    try:
        states = arrays["states"]
        skills = arrays["skills"]
        rewards = arrays["rewards"]
        next_states = arrays["next_states"]
        terminals = arrays["terminals"].astype(bool)
    except KeyError as e:
        raise DataFormatError(f"relabeled dataset missing array: {e}") from e
    transitions = [
        RelabeledTransition(
            state=states[i], skill_index=int(skills[i]), reward=float(rewards[i]),
            next_state=next_states[i], terminal=bool(terminals[i]),
            gamma_used=float(header["gamma"]),
        )
        for i in range(len(states))
    ]
    dataset = RelabeledDataset(
        transitions=transitions, horizon=int(header["horizon"]),
        gamma=float(header["gamma"]),
        skill_fingerprint=header.get("skill_fingerprint", ""),
    )
    return dataset, header


def write_csv(path, columns, rows):
    """RFC-4180 CSV with a fixed header row; rows are sequences or dicts."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                writer.writerow([row[c] for c in columns])
            else:
                if len(row) != len(columns):
                    raise ValueError(
                        f"row has {len(row)} fields, header has {len(columns)}"
                    )
                writer.writerow(list(row))


def read_csv(path):
    """Returns (columns, rows-as-string-lists)."""
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            columns = next(reader)
        except StopIteration:
            raise DataFormatError(f"empty CSV file: {path}") from None
        return columns, [row for row in reader]
