"""Binary container for named float64 arrays.

Layout: a UTF-8 JSON index ``{name: {shape, byte_offset, byte_len, dtype}}``,
then ``b"\\n\\x00"``, then the little-endian float64 payloads.  Offsets are
counted from the first byte after the 0-byte.  Keys are written sorted so
equal contents give equal bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import SlideIOError, ValidationError

_SEP = b"\n\x00"


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    index = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        raw = arr.tobytes()
        index[name] = {
            "shape": list(arr.shape),
            "byte_offset": offset,
            "byte_len": len(raw),
            "dtype": "f64",
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(header + _SEP + b"".join(blobs))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise SlideIOError(f"cannot read checkpoint {path}: {exc}") from exc
    cut = blob.find(_SEP)
    if cut < 0:
        raise ValidationError(f"{path}: missing index terminator")
    index = json.loads(blob[:cut])
    data = memoryview(blob)[cut + len(_SEP):]
    out = {}
    for name, meta in index.items():
        if meta.get("dtype") != "f64":
            raise ValidationError(f"{path}: tensor {name!r} has unsupported dtype {meta.get('dtype')}")
        start, length = meta["byte_offset"], meta["byte_len"]
        if start + length > len(data):
            raise ValidationError(f"{path}: tensor {name!r} runs past end of file")
        arr = np.frombuffer(data[start : start + length], dtype="<f8").astype(np.float64)
        out[name] = arr.reshape(tuple(meta["shape"]))
    return out
