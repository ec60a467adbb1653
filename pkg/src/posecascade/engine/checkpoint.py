"""Checkpoint file format: a JSON header followed by raw little-endian blobs.

Layout:

    line 1:  ``POSECASCADE-CKPT 1 <header_bytes>``
    bytes:   UTF-8 JSON header of exactly ``header_bytes`` length
    bytes:   one raw blob per stored tensor, in header order

The header lists every parameter with name, shape and share_group.  Members
of a share_group are stored once: the first occurrence owns the blob, later
ones carry ``alias_of``.  Loading restores that aliasing (one ndarray shared
by all members) and verifies the architecture fingerprint when asked.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .tensor import Parameter

MAGIC = "POSECASCADE-CKPT"
FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Malformed checkpoint file or metadata mismatch."""


class FingerprintMismatch(CheckpointError):
    """Checkpoint was written for a different architecture."""


@dataclass
class CheckpointData:
    header: dict
    arrays: Dict[str, np.ndarray]  # aliased names map to the same ndarray object
    extra_arrays: Dict[str, np.ndarray]

    @property
    def fingerprint(self) -> str:
        return self.header["fingerprint"]

    @property
    def extra(self) -> dict:
        return self.header.get("extra", {})


def save_checkpoint(path, params: Sequence[Parameter], *, fingerprint: str,
                    extra: Optional[dict] = None,
                    extra_arrays: Optional[Dict[str, np.ndarray]] = None) -> None:
    entries = []
    blobs = []
    owner_by_storage: Dict[int, str] = {}
    for p in params:
        dtype_name = p.tensor.data.dtype.name
        if dtype_name not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported parameter dtype {dtype_name}")
        entry = {
            "name": p.name,
            "shape": list(p.tensor.data.shape),
            "dtype": dtype_name,
            "share_group": p.share_group,
        }
        owner = owner_by_storage.get(id(p.tensor))
        if owner is None:
            owner_by_storage[id(p.tensor)] = p.name
            blobs.append(p.tensor.data.astype(_DTYPE_CODES[dtype_name]).tobytes())
        else:
            entry["alias_of"] = owner
        entries.append(entry)

    array_entries = []
    for name in sorted(extra_arrays or {}):
        arr = np.asarray(extra_arrays[name])
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported extra-array dtype {dtype_name}")
        array_entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype_name})
        blobs.append(arr.astype(_DTYPE_CODES[dtype_name]).tobytes())

    header = {
        "format_version": FORMAT_VERSION,
        "fingerprint": fingerprint,
        "params": entries,
        "extra_arrays": array_entries,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION} {len(header_bytes)}\n".encode("ascii"))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> CheckpointData:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii", errors="replace").strip()
        fields = first.split()
        if len(fields) != 3 or fields[0] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic line)")
        version, header_len = int(fields[1]), int(fields[2])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))

        def read_blob(entry) -> np.ndarray:
            code = _DTYPE_CODES[entry["dtype"]]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(count * np.dtype(code).itemsize)
            if len(blob) != count * np.dtype(code).itemsize:
                raise CheckpointError(f"{path}: truncated blob for '{entry['name']}'")
            return np.frombuffer(blob, dtype=code).reshape(shape).astype(entry["dtype"])

        arrays: Dict[str, np.ndarray] = {}
        for entry in header["params"]:
            if "alias_of" in entry:
                arrays[entry["name"]] = arrays[entry["alias_of"]]
            else:
                arrays[entry["name"]] = read_blob(entry)
        extra_arrays: Dict[str, np.ndarray] = {}
        for entry in header.get("extra_arrays", []):
            extra_arrays[entry["name"]] = read_blob(entry)
    data = CheckpointData(header=header, arrays=arrays, extra_arrays=extra_arrays)
    if expected_fingerprint is not None and data.fingerprint != expected_fingerprint:
        raise FingerprintMismatch(
            f"{path}: checkpoint fingerprint {data.fingerprint} != expected {expected_fingerprint}"
        )
    return data
