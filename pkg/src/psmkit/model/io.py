"""Binary model files: magic, JSON header, raw little-endian arrays."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .network import ModelConfig, PsmModel

MODEL_MAGIC = b"PUFMDL1"
_PREFIX = struct.Struct("<7sQ")


class ModelFormatError(ValueError):
    """Unreadable, truncated or incompatible model file."""


def save_params(model: PsmModel, path: str | Path) -> None:
    state = model.state_dict()
    arrays = []
    meta = []
    for name, t in state.items():
        a = t.detach().cpu().numpy()
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        arrays.append(a)
        meta.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str})
    header = json.dumps(
        {"config": json.loads(model.config.to_json()), "mod_names": list(model.mod_names), "arrays": meta},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MODEL_MAGIC, len(header)))
        fh.write(header)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_params(path: str | Path, active_mods=None) -> PsmModel:
    """Load a model; ``active_mods`` (a ModTable) must be covered by its vocabulary."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ModelFormatError(f"{path}: truncated model file")
    magic, hlen = _PREFIX.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as err:
        raise ModelFormatError(f"{path}: bad header ({err})") from None
    model = PsmModel(config)
    if active_mods is not None:
        for name in active_mods.token_names:
            if name not in model.mod_index:
                raise ModelFormatError(f"{path}: modification token {name!r} not in model vocabulary")
    expected = model.state_dict()
    offset = start + hlen
    loaded = {}
    for m in header["arrays"]:
        name = m["name"]
        if name not in expected:
            raise ModelFormatError(f"{path}: unexpected array {name}")
        dtype = np.dtype(m["dtype"])
        shape = tuple(m["shape"])
        if shape != tuple(expected[name].shape):
            raise ModelFormatError(
                f"{path}: shape mismatch for {name}: file {shape}, model {tuple(expected[name].shape)}"
            )
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise ModelFormatError(f"{path}: truncated array data")
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        loaded[name] = torch.from_numpy(arr.reshape(shape).astype(dtype.newbyteorder("="))).clone()
        offset += nbytes
    if offset != len(raw):
        raise ModelFormatError(f"{path}: trailing bytes after array data")
    missing = set(expected) - set(loaded)
    if missing:
        raise ModelFormatError(f"{path}: missing arrays {sorted(missing)}")
    if any(t.dtype == torch.float64 for t in loaded.values()):
        model = model.double()
    model.load_state_dict(loaded)
    model.eval()
    return model
