"""A deterministic binary container for arrays plus a JSON header.

Layout: 4-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then the raw array payloads back to back.  Arrays are stored little-endian
C-order; the header carries name, dtype, shape, and payload offset for each.
Writing the same content twice produces byte-identical files (keys sorted,
no timestamps), which is what makes rerun-equality checks meaningful.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractViolation

MAGIC = b"DNSC"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _canonical(array: np.ndarray) -> np.ndarray:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = np.ascontiguousarray(arr, dtype="<f8")
    elif arr.dtype.kind in ("i", "u", "b"):
        arr = np.ascontiguousarray(arr, dtype="<i8")
    else:
        raise ContractViolation(f"unsupported array dtype {arr.dtype}")
    return arr


def write_container(path, arrays: dict, meta: dict):
    """Write named arrays and a JSON-serializable meta dict to ``path``."""
    items = [(name, _canonical(arr)) for name, arr in sorted(arrays.items())]
    directory = []
    offset = 0
    for name, arr in items:
        directory.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "arrays": directory},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, arr in items:
            fh.write(arr.tobytes())


def _read_header(fh):
    magic = fh.read(4)
    if magic != MAGIC:
        raise ContractViolation(f"bad container magic {magic!r}")
    (hlen,) = struct.unpack("<Q", fh.read(8))
    header = json.loads(fh.read(hlen).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ContractViolation(f"unsupported container version {header.get('format_version')}")
    return header, 4 + 8 + hlen


def read_container(path) -> tuple[dict, dict]:
    """Read all arrays and the meta dict."""
    with open(path, "rb") as fh:
        header, payload_start = _read_header(fh)
        arrays = {}
        for entry in header["arrays"]:
            fh.seek(payload_start + entry["offset"])
            raw = fh.read(entry["nbytes"])
            arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
            arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]


def read_container_meta(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
    return header["meta"]


def read_container_array(path, name: str) -> np.ndarray:
    """Read one named array, seeking past everything else on disk."""
    with open(path, "rb") as fh:
        header, payload_start = _read_header(fh)
        for entry in header["arrays"]:
            if entry["name"] == name:
                fh.seek(payload_start + entry["offset"])
                raw = fh.read(entry["nbytes"])
                return np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
    raise ContractViolation(f"container has no array named {name!r}")


def container_array_names(path) -> list[str]:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
    return [entry["name"] for entry in header["arrays"]]
