"""Single-file binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..7    magic b"XCNT0001"
    uint32        length of the metadata JSON
    ...           metadata JSON (utf-8): {"config": {...}, "extra": {...}}
    uint32        number of named arrays
    per array:
        uint16    name length, then name (utf-8)
        uint8     dtype code (0 = float64)
        uint8     ndim
        uint32*   dims
        ...       raw C-order little-endian data

The same container stores model weights and, for resumable training runs,
optimizer moments under an ``opt/`` name prefix.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"XCNT0001"
_DTYPES = {0: np.dtype("<f8")}


def save_checkpoint(
    path: str | Path,
    config: ModelConfig,
    arrays: dict[str, np.ndarray],
    extra: dict | None = None,
) -> None:
    meta = json.dumps({"config": config.to_dict(), "extra": extra or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", 0, a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            if code not in _DTYPES:
                raise ValueError(f"{path}: unknown dtype code {code} for {name}")
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(count * dt.itemsize), dtype=dt)
            arrays[name] = data.reshape(shape).astype(np.float64)
    return ModelConfig.from_dict(meta["config"]), arrays, meta.get("extra", {})
