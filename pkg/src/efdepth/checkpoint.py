"""Checkpoint container: dotted names -> little-endian float32 arrays.

Layout (all integers little-endian):

    magic   4 bytes  b"EFD1"
    version u32      currently 1
    count   u32      number of entries
    then per entry:
      name_len u16, name utf-8 bytes,
      ndim u8, dims ndim * u32,
      data  prod(dims) * f32 (row-major)

Entries are written sorted by name so files are byte-stable for identical
contents. Model parameters use their state_dict names; optimizer moments
ride along under an "optim." prefix and run counters under "meta.".
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np
import torch

from .errors import DataError

MAGIC = b"EFD1"
VERSION = 1


def save_arrays(path, arrays: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name in sorted(arrays):
            # np.ascontiguousarray would promote 0-d arrays to 1-d and lose
            # the scalar shape of parameters like the affinity temperature
            arr = np.asarray(arrays[name], dtype="<f4")
            if arr.ndim:
                arr = np.ascontiguousarray(arr)
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise DataError(f"parameter name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    out: Dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            out[name] = arr.copy()
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        raise DataError(f"{path}: truncated or corrupt checkpoint ({err})") from None
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def save_model(path, model: torch.nn.Module, extras: Dict[str, np.ndarray] | None = None) -> None:
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    for key, val in (extras or {}).items():
        if key in arrays:
            raise DataError(f"extra entry {key!r} collides with a model parameter")
        arrays[key] = np.asarray(val, dtype=np.float32)
    save_arrays(path, arrays)


def load_model(path, model: torch.nn.Module) -> Dict[str, np.ndarray]:
    """Load parameters into model; returns the non-parameter extras."""
    arrays = load_arrays(path)
    state = model.state_dict()
    missing = [k for k in state if k not in arrays]
    if missing:
        raise DataError(f"checkpoint missing parameters: {missing[:5]}")
    new_state = {}
    for key, ref in state.items():
        arr = arrays.pop(key)
        if tuple(arr.shape) != tuple(ref.shape):
            raise DataError(
                f"checkpoint parameter {key} has shape {arr.shape}, expected {tuple(ref.shape)}"
            )
        new_state[key] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(new_state)
    return arrays
