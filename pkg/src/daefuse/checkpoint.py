"""Deterministic single-file checkpoint archive.

Layout: an 8-byte magic, a format version, a length-prefixed JSON header
(sorted keys, compact separators) and the raw little-endian tensor payloads
concatenated in sorted name order. Identical contents always produce
identical bytes, so save -> load -> save round-trips byte-exactly, and
tensors are restored bit-exactly from their raw buffers.
"""

import json
import struct

import numpy as np
import torch

from .errors import NotFoundError, UnsupportedFormatError

MAGIC = b"DAEFCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


def _to_array(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    # np.asarray keeps 0-d shapes (ascontiguousarray would promote to 1-d);
    # tobytes() serializes in C order regardless of layout.
    arr = np.asarray(value)
    if arr.dtype.name not in _DTYPES:
        raise UnsupportedFormatError(f"cannot archive dtype {arr.dtype}")
    return arr


def save_archive(path, tensors, manifest):
    """Write named tensors plus a JSON-serializable manifest to one file."""
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = _to_array(tensors[name])
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = json.dumps(
        {"manifest": manifest, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_archive(path):
    """Read an archive back into ({name: torch.Tensor}, manifest)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise NotFoundError(f"no such checkpoint: {path}") from exc
    if blob[:8] != MAGIC:
        raise UnsupportedFormatError(f"{path} is not a checkpoint archive")
    version, header_len = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise UnsupportedFormatError(f"unsupported checkpoint format version {version}")
    header = json.loads(blob[20 : 20 + header_len].decode("utf-8"))
    payload = blob[20 + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        # astype copies into a native-order contiguous array, keeping 0-d.
        tensors[entry["name"]] = torch.from_numpy(arr.astype(entry["dtype"]))
    return tensors, header["manifest"]


def flatten_structure(obj, prefix, tensors):
    """Replace tensors in a nested dict/list structure by archive references.

    Returns a JSON-serializable skeleton; extracted tensors are added to
    ``tensors`` under path-derived names.
    """
    if isinstance(obj, torch.Tensor):
        tensors[prefix] = obj
        return {"__tensor__": prefix}
    if isinstance(obj, dict):
        return {
            str(k): flatten_structure(v, f"{prefix}/{k}", tensors)
            for k, v in obj.items()
        }
    if isinstance(obj, (list, tuple)):
        return [
            flatten_structure(v, f"{prefix}/{i}", tensors) for i, v in enumerate(obj)
        ]
    return obj


def unflatten_structure(skeleton, tensors, int_keys=False):
    """Inverse of flatten_structure given the loaded tensor mapping."""
    if isinstance(skeleton, dict):
        if set(skeleton.keys()) == {"__tensor__"}:
            return tensors[skeleton["__tensor__"]]
        out = {}
        for k, v in skeleton.items():
            key = int(k) if int_keys and k.lstrip("-").isdigit() else k
            out[key] = unflatten_structure(v, tensors, int_keys=int_keys)
        return out
    if isinstance(skeleton, list):
        return [unflatten_structure(v, tensors, int_keys=int_keys) for v in skeleton]
    return skeleton
