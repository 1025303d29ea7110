"""JSON manifest + little-endian binary blob storage for named arrays.

``<stem>.json`` holds metadata and one entry per array
(``name``, ``dtype``, ``shape``, ``offset``, ``nbytes``); ``<stem>.bin`` is
the concatenation of the raw array bytes in manifest order.
"""
import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


class FormatError(ValueError):
    """Raised when a manifest/blob pair is inconsistent or truncated."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _stem(path):
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_arrays(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray) and ``meta`` under ``path``.

    Floating arrays are stored as ``<f4`` and integer arrays as ``<i4``.
    Returns the paths of the manifest and the blob.
    """
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "<i4" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "<f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "atta-tensors", "version": FORMAT_VERSION,
                "blob": stem.name + ".bin", "blob_nbytes": offset,
                "meta": meta or {}, "tensors": entries}
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    _atomic_write(bin_path, b"".join(chunks))
    _atomic_write(json_path, json.dumps(manifest, indent=1, sort_keys=True))
    return json_path, bin_path


def load_arrays(path):
    """Inverse of :func:`save_arrays`. Returns ``(arrays, meta)``."""
    stem = _stem(path)
    json_path = stem.with_suffix(".json")
    try:
        manifest = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{json_path}: manifest is not valid JSON: {exc.msg}", exc.pos) from None
    if manifest.get("format") != "atta-tensors":
        raise FormatError(f"{json_path}: not an atta tensor manifest")
    blob = (json_path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_nbytes"]:
        raise FormatError(f"{json_path}: blob has {len(blob)} bytes, manifest declares "
                          f"{manifest['blob_nbytes']}", min(len(blob), manifest["blob_nbytes"]))
    arrays = {}
    expected = 0
    for entry in manifest["tensors"]:
        name, offset, nbytes = entry["name"], entry["offset"], entry["nbytes"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"{json_path}: tensor {name!r} has unknown dtype {entry['dtype']!r}", offset)
        if offset != expected:
            raise FormatError(f"{json_path}: tensor {name!r} is not contiguous with the previous one", offset)
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count * dtype.itemsize != nbytes:
            raise FormatError(f"{json_path}: tensor {name!r} shape {entry['shape']} needs "
                              f"{count * dtype.itemsize} bytes, manifest says {nbytes}", offset)
        if offset + nbytes > len(blob):
            raise FormatError(f"{json_path}: tensor {name!r} runs past the end of the blob", offset)
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(entry["shape"]).copy()
        expected = offset + nbytes
    if expected != len(blob):
        raise FormatError(f"{json_path}: {len(blob) - expected} trailing bytes in blob", expected)
    return arrays, manifest["meta"]
