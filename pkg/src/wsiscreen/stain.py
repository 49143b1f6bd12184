"""H&E colour deconvolution, Otsu thresholding and annotation refinement."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError, ValidationError

# Ruifrok & Johnston H&E optical-density vectors (before normalisation)
HEMATOXYLIN_OD = (0.65, 0.70, 0.29)
EOSIN_OD = (0.07, 0.99, 0.11)

I0 = 256.0
# H+E concentration mapped to grey level 255 when building the density image
DENSITY_FULL_SCALE = 2.0
# densities below this are never tissue, whatever Otsu says about background noise
MIN_TISSUE_DENSITY = 0.15


@dataclass(frozen=True)
class StainMatrix:
    """Rows are unit OD vectors: hematoxylin, eosin, residual."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ConfigurationError(f"stain matrix must be 3x3, got {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ConfigurationError(f"stain vectors must have unit length, got norms {norms}")
        if not np.isfinite(np.linalg.cond(m)) or np.linalg.cond(m) >= 1e6:
            raise ConfigurationError("stain matrix is singular or ill-conditioned")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_vectors(cls, hematoxylin, eosin, residual=None) -> "StainMatrix":
        h = np.asarray(hematoxylin, dtype=np.float64)
        e = np.asarray(eosin, dtype=np.float64)
        h = h / np.linalg.norm(h)
        e = e / np.linalg.norm(e)
        if residual is None:
            residual = np.cross(h, e)
        r = np.asarray(residual, dtype=np.float64)
        n = np.linalg.norm(r)
        if n == 0:
            raise ConfigurationError("hematoxylin and eosin vectors are parallel")
        return cls(np.stack([h, e, r / n]))

    @classmethod
    def default(cls) -> "StainMatrix":
        return cls.from_vectors(HEMATOXYLIN_OD, EOSIN_OD)

    @classmethod
    def from_file(cls, path) -> "StainMatrix":
        cfg = json.loads(Path(path).read_text())
        return cls.from_vectors(cfg["hematoxylin"], cfg["eosin"], cfg.get("residual"))

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.matrix[0]

    @property
    def eosin(self) -> np.ndarray:
        return self.matrix[1]


def rgb_to_od(img: np.ndarray) -> np.ndarray:
    """Optical density -log10((I + 1) / 256) per channel."""
    return -np.log10((np.asarray(img, dtype=np.float64) + 1.0) / I0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, rounded and clipped to 8 bits."""
    return np.clip(np.round(I0 * np.power(10.0, -od) - 1.0), 0, 255).astype(np.uint8)


def stain_separate(od: np.ndarray, stains: StainMatrix | None = None) -> np.ndarray:
    """Per-pixel stain concentrations (H, E, residual) solving ``od = c @ M``."""
    m = (stains or StainMatrix.default()).matrix
    flat = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    if np.linalg.cond(m) < 1e6:
        conc = np.linalg.solve(m.T, flat.T).T
    else:
        conc = np.linalg.lstsq(m.T, flat.T, rcond=None)[0].T
    return conc.reshape(np.shape(od))


def stain_density(img: np.ndarray, stains: StainMatrix | None = None) -> np.ndarray:
    """H + E concentration per pixel."""
    conc = stain_separate(rgb_to_od(img), stains)
    return conc[..., 0] + conc[..., 1]


class OtsuResult(NamedTuple):
    threshold: int
    degenerate: bool


def otsu_threshold(values: np.ndarray, *, histogram: bool = False) -> OtsuResult:
    """Otsu's cut over 256 grey levels; class 0 is ``value <= threshold``.

    The between-class variance comparison is done in exact integer
    arithmetic, so ties resolve to the smallest threshold deterministically.
    A histogram with no separable mass is reported as degenerate.
    """
    if histogram:
        hist = np.asarray(values, dtype=np.int64)
        if hist.shape != (256,):
            raise ValidationError(f"histogram must have 256 bins, got {hist.shape}")
        if np.any(hist < 0):
            raise ValidationError("histogram counts must be non-negative")
    else:
        v = np.asarray(values)
        if v.size and (v.min() < 0 or v.max() > 255):
            raise ValidationError("grey values must lie in [0, 255]")
        hist = np.bincount(v.astype(np.int64).ravel(), minlength=256)
    total = int(hist.sum())
    if total == 0:
        raise ValidationError("Otsu threshold of an empty image")
    counts = [int(c) for c in np.cumsum(hist)]
    sums = [int(s) for s in np.cumsum(hist * np.arange(256))]
    grand = sums[-1]
    best_num, best_den, best_t = 0, 1, 0
    for t in range(255):
        n0 = counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        s0 = sums[t]
        # sigma_b^2 * total^2 = (s0*n1 - s1*n0)^2 / (n0*n1)
        num = (s0 * n1 - (grand - s0) * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return OtsuResult(best_t, best_num == 0)


def density_image(img: np.ndarray, stains: StainMatrix | None = None) -> np.ndarray:
    """Stain density rescaled to uint8 grey levels (fixed scale, not per image)."""
    d = stain_density(img, stains)
    return np.clip(np.round(d / DENSITY_FULL_SCALE * 255.0), 0, 255).astype(np.uint8)


def foreground_mask(
    img: np.ndarray, stains: StainMatrix | None = None, min_component: int = 0
) -> np.ndarray:
    """Tissue mask: Otsu on the H+E density image.

    Pixels lighter than MIN_TISSUE_DENSITY are background regardless of the
    Otsu cut, which keeps near-white slides empty.  With ``min_component``
    > 0, connected components smaller than that many pixels are dropped.
    """
    grey = density_image(img, stains)
    floor = int(np.ceil(MIN_TISSUE_DENSITY / DENSITY_FULL_SCALE * 255.0))
    t, degenerate = otsu_threshold(grey)
    if degenerate:
        level = int(grey.reshape(-1)[0]) if grey.size else 0
        mask = np.full(grey.shape, level >= floor)
    else:
        mask = grey > max(t, floor - 1)
    if min_component > 0 and mask.any():
        labels, n = ndimage.label(mask)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        keep = sizes >= min_component
        keep[0] = False
        mask = keep[labels]
    return mask


def refine_annotation(manual: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    """Annotation restricted to stained tissue (pixelwise AND)."""
    manual = np.asarray(manual, dtype=bool)
    foreground = np.asarray(foreground, dtype=bool)
    if manual.shape != foreground.shape:
        raise DimensionError(
            f"annotation {manual.shape} and foreground {foreground.shape} are not aligned"
        )
    return manual & foreground
