"""Seeded synthetic H&E-like slides with planted lesions.

Slides are rendered in optical-density space from hematoxylin/eosin
concentration maps, so the stain module recovers the tissue exactly the
way it would on a real scan.  Lesions are regions of denser, darker,
slightly larger nuclei inside the tissue.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import SlideIOError, ValidationError
from .slide import SlideManifest, resize_rgb, write_slide
from .stain import StainMatrix, od_to_rgb

BACKGROUND_OD = 0.03


@dataclass(frozen=True)
class GenSpec:
    slide_id: str = "slide"
    size: tuple[int, int] = (1024, 1024)
    levels: int = 2
    downsample: int = 4
    tile_size: int = 256
    mpp: float = 0.5
    n_tissue_blobs: int = 3
    lesion_present: bool = False
    area_frac: float = 0.15
    blur_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        if self.levels < 2:
            raise ValidationError("a synthetic slide needs at least two levels")
        h, w = self.size
        f = self.downsample ** (self.levels - 1)
        if h % f or w % f:
            raise ValidationError(f"slide extent {self.size} is not divisible by {f}")
        if self.lesion_present and not 0 < self.area_frac <= 0.2:
            raise ValidationError(f"lesion area fraction must be in (0, 0.2], got {self.area_frac}")


@dataclass
class RenderedSlide:
    image: np.ndarray  # level-0 RGB
    tissue: np.ndarray
    lesion: np.ndarray
    label: str


def _smooth_noise(rng, shape, coarse=8, sigma=4.0):
    h, w = shape
    small = ndimage.gaussian_filter(rng.normal(size=(h // coarse + 2, w // coarse + 2)), sigma, mode="wrap")
    small /= small.std() + 1e-12
    big = ndimage.zoom(small, coarse, order=1)
    return big[:h, :w]


def _tissue_mask(rng, spec: GenSpec) -> np.ndarray:
    h, w = spec.size
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    field = np.full((h, w), -np.inf)
    for _ in range(spec.n_tissue_blobs):
        cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        ry, rx = rng.uniform(0.15, 0.3) * h, rng.uniform(0.15, 0.3) * w
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(th) + dx * np.sin(th)) / ry
        v = (-dy * np.sin(th) + dx * np.cos(th)) / rx
        field = np.maximum(field, 1.0 - (u * u + v * v))
    field += 0.25 * _smooth_noise(rng, spec.size)
    return field > 0


def _lesion_mask(rng, spec: GenSpec, tissue: np.ndarray) -> np.ndarray:
    n_tissue = int(tissue.sum())
    target = int(round(spec.area_frac * n_tissue))
    if target < 1:
        raise ValidationError(
            f"lesion fraction {spec.area_frac} is unachievable in {n_tissue} tissue pixels"
        )
    depth = ndimage.distance_transform_edt(tissue)
    inner = np.flatnonzero(depth >= np.quantile(depth[tissue], 0.6))
    cy, cx = divmod(int(inner[rng.integers(inner.size)]), spec.size[1])
    h, w = spec.size
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    stretch = rng.uniform(0.7, 1.4)
    dist = np.sqrt(((yy - cy) * stretch) ** 2 + ((xx - cx) / stretch) ** 2)
    field = -dist + 25.0 * _smooth_noise(rng, spec.size, coarse=16, sigma=2.0)
    field = np.where(tissue, field, -np.inf)
    order = np.argsort(-field.ravel(), kind="stable")
    lesion = np.zeros(h * w, dtype=bool)
    lesion[order[:target]] = True
    return lesion.reshape(h, w)


def _nuclei(rng, region: np.ndarray, density: float, sigma: float) -> np.ndarray:
    points = (rng.random(region.shape) < density) & region
    img = ndimage.gaussian_filter(points.astype(np.float64), sigma)
    return img * (2 * np.pi * sigma * sigma)  # unit peak per isolated nucleus


def render_slide(spec: GenSpec) -> RenderedSlide:
    """Level-0 pixels plus exact tissue and lesion masks, without touching disk."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    tissue = _tissue_mask(rng, spec)
    lesion = _lesion_mask(rng, spec, tissue) if spec.lesion_present else np.zeros(spec.size, bool)
    benign = tissue & ~lesion

    eosin = np.where(tissue, 0.45 + 0.08 * _smooth_noise(rng, spec.size), 0.0)
    hema = np.where(tissue, 0.12, 0.0)
    hema = hema + 0.9 * _nuclei(rng, benign, 0.004, 1.3)
    if lesion.any():
        hema = hema + 1.5 * _nuclei(rng, lesion, 0.012, 1.8)
        eosin = np.where(lesion, eosin * 0.8, eosin)

    m = StainMatrix.default().matrix
    od = hema[..., None] * m[0] + eosin[..., None] * m[1]
    od += BACKGROUND_OD + rng.normal(0, 0.008, od.shape)
    od = np.clip(od, 0.0, None)
    if spec.blur_sigma > 0:
        od = ndimage.gaussian_filter(od, (spec.blur_sigma, spec.blur_sigma, 0))
    img = od_to_rgb(od)
    return RenderedSlide(img, tissue, lesion, "positive" if spec.lesion_present else "negative")


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    blocks = img.reshape(h // factor, factor, w // factor, factor, *img.shape[2:]).astype(np.float64)
    mean = blocks.mean(axis=(1, 3))
    if img.dtype == bool:
        return mean >= 0.5
    return np.floor(mean + 0.5).astype(img.dtype)


def pyramid(img: np.ndarray, levels: int, factor: int) -> list[np.ndarray]:
    out = [img]
    for _ in range(levels - 1):
        out.append(box_downsample(out[-1], factor))
    return out


def render_thumbnail(spec: GenSpec, size: int = 512) -> np.ndarray:
    """The thumbnail ``slide.thumbnail`` would produce for this slide, without disk I/O."""
    r = render_slide(spec)
    low = pyramid(r.image, spec.levels, spec.downsample)[-1]
    h, w = low.shape[:2]
    scale = size / max(h, w)
    ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    oy, ox = (size - ch) // 2, (size - cw) // 2
    canvas[oy : oy + ch, ox : ox + cw] = resize_rgb(low, (ch, cw))
    return canvas


def gen_slide(spec: GenSpec, out_dir) -> tuple[SlideManifest, np.ndarray, str]:
    """Render and write one slide; returns (manifest, level-0 lesion mask, label)."""
    r = render_slide(spec)
    manifest = write_slide(
        out_dir,
        spec.slide_id,
        pyramid(r.image, spec.levels, spec.downsample),
        tile_size=spec.tile_size,
        mpp=spec.mpp,
        label=r.label,
        masks={
            "lesion": pyramid(r.lesion, spec.levels, spec.downsample),
            "tissue": pyramid(r.tissue, spec.levels, spec.downsample),
        },
        extra={"blur_sigma": spec.blur_sigma, "seed": spec.seed},
    )
    return manifest, r.lesion, r.label


def slide_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_dataset(
    n: int,
    positive_frac: float,
    seed: int,
    out_dir,
    base: GenSpec | None = None,
    area_frac: tuple[float, float] = (0.1, 0.2),
    blur_frac: float = 0.0,
    blur_sigma: float = 12.0,
) -> Path:
    """Write ``n`` slides plus ``index.jsonl``; returns the index path."""
    if n < 2:
        raise ValidationError("a dataset needs at least two slides")
    if not 0 < positive_frac < 1:
        raise ValidationError(f"positive fraction must be in (0, 1), got {positive_frac}")
    base = base or GenSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_frac))
    labels = rng.permutation(np.array([True] * n_pos + [False] * (n - n_pos)))
    n_blur = int(round(n * blur_frac))
    blurred = set(rng.permutation(n)[:n_blur].tolist())
    seeds = slide_seeds(seed, n)
    lines = []
    for i in range(n):
        srng = np.random.default_rng(seeds[i])
        spec = replace(
            base,
            slide_id=f"slide_{i:04d}",
            seed=seeds[i],
            n_tissue_blobs=int(srng.integers(2, 5)),
            lesion_present=bool(labels[i]),
            area_frac=float(srng.uniform(*area_frac)),
            blur_sigma=blur_sigma if i in blurred else 0.0,
        )
        try:
            manifest, _, label = gen_slide(spec, out / spec.slide_id)
        except OSError as exc:
            raise SlideIOError(f"failed writing {spec.slide_id}: {exc}") from exc
        lines.append(
            json.dumps(
                {
                    "slide_id": spec.slide_id,
                    "label": label,
                    "path": spec.slide_id,
                    "lesion_mask": f"{spec.slide_id}/lesion_L0.pbm",
                    "blurred": spec.blur_sigma > 0,
                },
                sort_keys=True,
            )
        )
    index = out / "index.jsonl"
    index.write_text("\n".join(lines) + "\n")
    return index


def read_index(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "index.jsonl"
    try:
        text = path.read_text()
    except OSError as exc:
        raise SlideIOError(f"cannot read dataset index {path}: {exc}") from exc
    entries = [json.loads(line) for line in text.splitlines() if line.strip()]
    for e in entries:
        e["dir"] = str(path.parent / e["path"])
    return entries
