"""Netpbm readers/writers (P4 masks, P5 grey maps, P6 tiles) backed by Pillow."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SlideIOError


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise SlideIOError(f"cannot read {path}: {exc}") from exc
    return img


def read_ppm(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "RGB":
        raise SlideIOError(f"{path}: expected an RGB (P6) image, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path, format="PPM")


def read_pbm(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "1":
        raise SlideIOError(f"{path}: expected a bitmap (P4), got mode {img.mode}")
    return np.asarray(img, dtype=bool).copy()


def write_pbm(path, mask: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(mask, dtype=bool)).save(path, format="PPM")


def write_pgm16(path, values: np.ndarray) -> None:
    """Write [0, 1] floats as a 16-bit P5 map: 0 -> 0, 1.0 -> 65535."""
    scaled = np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(path, format="PPM")


def read_pgm16(path) -> np.ndarray:
    img = _open(path)
    return np.asarray(img, dtype=np.float64) / 65535.0


def write_scaled_pgm(path, values: np.ndarray) -> float:
    """8-bit P5 map with a linear scale; the scale goes to ``<path>.json``."""
    peak = float(values.max()) if values.size else 0.0
    scale = peak / 255.0 if peak > 0 else 1.0
    q = np.round(np.clip(values, 0, None) / scale).clip(0, 255).astype(np.uint8)
    Image.fromarray(q, "L").save(path, format="PPM")
    Path(str(path) + ".json").write_text(json.dumps({"scale": scale, "offset": 0.0}))
    return scale
