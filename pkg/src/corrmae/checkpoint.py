"""Named-array checkpoint container.

Binary layout (little-endian)::

    bytes 0-7    magic b"CMAECKPT"
    uint32       format version (1)
    uint32       header length H
    H bytes      UTF-8 JSON: {"version": 1, "meta": {...},
                  "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      raw array bytes; offsets are relative to the payload start

Names are dotted module paths. Encoder weights use the reserved ``encoder.``
namespace so fine-tuning can load them from a pre-training checkpoint.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

from .errors import ChecksumMismatch, DatasetIOError, FormatVersionMismatch

MAGIC = b"CMAECKPT"
VERSION = 1
ENCODER_NAMESPACE = "encoder."


def save_checkpoint(path, arrays: Mapping[str, object], meta: dict = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in arrays.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        a = np.asarray(value)
        a = a if a.flags.c_contiguous else a.copy(order="C")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
            for b in blobs:
                f.write(b)
    except OSError as e:
        raise DatasetIOError(str(e)) from e


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DatasetIOError(str(e)) from e
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatVersionMismatch("not a corrmae checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise FormatVersionMismatch(f"checkpoint version {version} != {VERSION}")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatVersionMismatch(f"unreadable checkpoint header: {e}") from e
    payload = raw[16 + hlen :]
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise ChecksumMismatch(f"array {e['name']!r} runs past the end of the file")
        a = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = a.copy()
    return arrays, header.get("meta", {})


def module_arrays(module: torch.nn.Module, prefix: str = "") -> Dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Load ``prefix``-namespaced arrays into ``module`` (strict on names and shapes)."""
    state = {k[len(prefix) :]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)}
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    if missing:
        raise KeyError(f"checkpoint lacks {len(missing)} arrays under {prefix!r}, e.g. {missing[:3]}")
    for k, v in own.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {prefix}{k}: {tuple(state[k].shape)} vs {tuple(v.shape)}")
    module.load_state_dict({k: state[k].to(own[k].dtype) for k in own})
