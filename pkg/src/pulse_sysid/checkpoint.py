"""Named float64 array container with a JSON header.

Stored as an uncompressed ``.npz``: each array keeps its shape and is
row-major float64; the header is a UTF-8 JSON document held in the
``__header__`` entry as a uint8 byte array.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

HEADER_KEY = "__header__"


def save_arrays(path, header: dict, arrays: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    if HEADER_KEY in payload:
        raise ValueError(f"array name {HEADER_KEY!r} is reserved")
    payload[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z[HEADER_KEY]).decode())
        arrays = {k: z[k] for k in z.files if k != HEADER_KEY}
    return header, arrays
