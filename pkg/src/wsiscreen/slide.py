"""Tiled multi-resolution slides: reading, thumbnails, window plans, patches.

On-disk layout of a slide directory::

    slide.json                      manifest (see SlideManifest.to_json)
    tiles/L{level}/r{row}_c{col}.ppm
    lesion_L{level}.pbm             optional ground-truth lesion masks
    tissue_L{level}.pbm             optional ground-truth tissue masks
"""

from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, RangeError, SlideIOError, ValidationError
from .netpbm import read_pbm, read_ppm, write_pbm, write_ppm

WINDOW = 512
THUMB = 512
TARGET_MPP = 0.5
POSITIVE_LESION_FRACTION = 0.01


@dataclass(frozen=True)
class LevelInfo:
    downsample: int
    width: int
    height: int
    tile_size: int

    @property
    def tile_grid(self) -> tuple[int, int]:
        return (math.ceil(self.height / self.tile_size), math.ceil(self.width / self.tile_size))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass
class SlideManifest:
    slide_id: str
    levels: list[LevelInfo]
    mpp: float
    root: Path
    label: str | None = None
    lesion_mask: str | None = None
    tissue_mask: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.levels:
            raise ValidationError(f"slide {self.slide_id}: no levels")
        if self.levels[0].downsample != 1:
            raise ValidationError(f"slide {self.slide_id}: level 0 must have downsample 1")
        ds = [lv.downsample for lv in self.levels]
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ValidationError(f"slide {self.slide_id}: downsample factors must increase, got {ds}")
        if self.label not in (None, "positive", "negative"):
            raise ValidationError(f"slide {self.slide_id}: bad label {self.label!r}")

    def tile_path(self, level: int, row: int, col: int) -> Path:
        return self.root / "tiles" / f"L{level}" / f"r{row}_c{col}.ppm"

    def mpp_at(self, level: int) -> float:
        return self.mpp * self.levels[level].downsample

    def working_level(self) -> int:
        return min(range(len(self.levels)), key=lambda i: (abs(self.mpp_at(i) - TARGET_MPP), i))

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "microns_per_pixel": self.mpp,
            "slide_label": self.label,
            "lesion_mask": self.lesion_mask,
            "tissue_mask": self.tissue_mask,
            "levels": [
                {**asdict(lv), "tile_grid": list(lv.tile_grid)} for lv in self.levels
            ],
            "tiles": [
                [
                    f"tiles/L{i}/r{r}_c{c}.ppm"
                    for r in range(lv.tile_grid[0])
                    for c in range(lv.tile_grid[1])
                ]
                for i, lv in enumerate(self.levels)
            ],
            **({"extra": self.extra} if self.extra else {}),
        }

    def save(self):
        (self.root / "slide.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    def mask_path(self, kind: str, level: int = 0) -> Path | None:
        ref = self.lesion_mask if kind == "lesion" else self.tissue_mask
        if ref is None:
            return None
        return self.root / ref.format(level=level)


def load_manifest(slide_dir) -> SlideManifest:
    root = Path(slide_dir)
    path = root / "slide.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise SlideIOError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    try:
        levels = [
            LevelInfo(int(lv["downsample"]), int(lv["width"]), int(lv["height"]), int(lv["tile_size"]))
            for lv in doc["levels"]
        ]
        manifest = SlideManifest(
            slide_id=str(doc["slide_id"]),
            levels=levels,
            mpp=float(doc["microns_per_pixel"]),
            root=root,
            label=doc.get("slide_label"),
            lesion_mask=doc.get("lesion_mask"),
            tissue_mask=doc.get("tissue_mask"),
            extra=doc.get("extra", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed manifest ({exc})") from exc
    for i, lv in enumerate(levels):
        for r in range(lv.tile_grid[0]):
            for c in range(lv.tile_grid[1]):
                if not manifest.tile_path(i, r, c).is_file():
                    raise SlideIOError(f"slide {manifest.slide_id}: missing tile {manifest.tile_path(i, r, c)}")
    return manifest


def write_slide(
    root,
    slide_id: str,
    level_images: list[np.ndarray],
    tile_size: int = 256,
    mpp: float = TARGET_MPP,
    label: str | None = None,
    masks: dict[str, list[np.ndarray]] | None = None,
    extra: dict | None = None,
) -> SlideManifest:
    """Cut each level image into PPM tiles and write the manifest."""
    root = Path(root)
    h0, w0 = level_images[0].shape[:2]
    levels = []
    for i, img in enumerate(level_images):
        h, w = img.shape[:2]
        ds = round(h0 / h) if i else 1
        levels.append(LevelInfo(ds, w, h, tile_size))
    manifest = SlideManifest(slide_id, levels, mpp, root, label, extra=extra or {})
    for i, (img, lv) in enumerate(zip(level_images, levels)):
        (root / "tiles" / f"L{i}").mkdir(parents=True, exist_ok=True)
        for r in range(lv.tile_grid[0]):
            for c in range(lv.tile_grid[1]):
                tile = img[r * tile_size : (r + 1) * tile_size, c * tile_size : (c + 1) * tile_size]
                write_ppm(manifest.tile_path(i, r, c), tile)
    for kind, per_level in (masks or {}).items():
        for i, m in enumerate(per_level):
            write_pbm(root / f"{kind}_L{i}.pbm", m)
        if kind == "lesion":
            manifest.lesion_mask = "lesion_L{level}.pbm"
        elif kind == "tissue":
            manifest.tissue_mask = "tissue_L{level}.pbm"
    manifest.save()
    return manifest


@functools.lru_cache(maxsize=512)
def _load_tile(path: str, mtime_ns: int, size: int) -> np.ndarray:
    arr = read_ppm(path)
    arr.flags.writeable = False
    return arr


def _tile(manifest: SlideManifest, level: int, r: int, c: int) -> np.ndarray:
    path = manifest.tile_path(level, r, c)
    try:
        st = os.stat(path)
    except OSError as exc:
        raise SlideIOError(f"slide {manifest.slide_id}: missing tile {path}") from exc
    try:
        tile = _load_tile(str(path), st.st_mtime_ns, st.st_size)
    except SlideIOError as exc:
        raise SlideIOError(f"slide {manifest.slide_id}: corrupt tile {path}: {exc}") from exc
    lv = manifest.levels[level]
    expect = (
        min(lv.tile_size, lv.height - r * lv.tile_size),
        min(lv.tile_size, lv.width - c * lv.tile_size),
    )
    if tile.shape[:2] != expect:
        raise SlideIOError(
            f"slide {manifest.slide_id}: tile {path} is {tile.shape[1]}x{tile.shape[0]}, "
            f"expected {expect[1]}x{expect[0]}"
        )
    return tile


def read_region(manifest: SlideManifest, level: int, origin, size) -> np.ndarray:
    """RGB pixels of the rectangle ``origin=(row, col)``, ``size=(h, w)`` at ``level``."""
    if not 0 <= level < len(manifest.levels):
        raise RangeError(f"slide {manifest.slide_id} has no level {level}")
    lv = manifest.levels[level]
    r0, c0 = (int(v) for v in origin)
    h, w = (int(v) for v in size)
    if h < 1 or w < 1 or r0 < 0 or c0 < 0 or r0 + h > lv.height or c0 + w > lv.width:
        raise RangeError(
            f"region at {(r0, c0)} of size {(h, w)} is outside level {level} ({lv.height}x{lv.width})"
        )
    out = np.empty((h, w, 3), dtype=np.uint8)
    ts = lv.tile_size
    for tr in range(r0 // ts, (r0 + h - 1) // ts + 1):
        for tc in range(c0 // ts, (c0 + w - 1) // ts + 1):
            tile = _tile(manifest, level, tr, tc)
            ys, xs = tr * ts, tc * ts
            a0, a1 = max(r0, ys), min(r0 + h, ys + tile.shape[0])
            b0, b1 = max(c0, xs), min(c0 + w, xs + tile.shape[1])
            out[a0 - r0 : a1 - r0, b0 - c0 : b1 - c0] = tile[a0 - ys : a1 - ys, b0 - xs : b1 - xs]
    return out


def read_level(manifest: SlideManifest, level: int) -> np.ndarray:
    lv = manifest.levels[level]
    return read_region(manifest, level, (0, 0), lv.shape)


def read_mask(manifest: SlideManifest, kind: str = "lesion", level: int = 0) -> np.ndarray | None:
    path = manifest.mask_path(kind, level)
    if path is None:
        return None
    mask = read_pbm(path)
    if mask.shape != manifest.levels[level].shape:
        raise SlideIOError(f"{path}: mask {mask.shape} does not match level {level}")
    return mask


# --- thumbnails --------------------------------------------------------------


@dataclass(frozen=True)
class Thumbnail:
    image: np.ndarray
    source_level: int
    content_shape: tuple[int, int]  # (h, w) of the resized slide inside the square
    offset: tuple[int, int]  # (row, col) of the content's top-left corner


def thumbnail_geometry(manifest: SlideManifest, level: int | None = None, size: int = THUMB):
    lvl = len(manifest.levels) - 1 if level is None else level
    h, w = manifest.levels[lvl].shape
    scale = size / max(h, w)
    ch = max(1, min(size, round(h * scale)))
    cw = max(1, min(size, round(w * scale)))
    return lvl, (ch, cw), ((size - ch) // 2, (size - cw) // 2)


def resize_rgb(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if img.shape[:2] == tuple(shape):
        return img.copy()
    return np.asarray(Image.fromarray(img).resize((shape[1], shape[0]), Image.BILINEAR))


def resize_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(shape):
        return mask.copy()
    im = Image.fromarray(mask.astype(np.uint8) * 255)
    return np.asarray(im.resize((shape[1], shape[0]), Image.NEAREST)) > 127


def thumbnail(manifest: SlideManifest, level: int | None = None, size: int = THUMB) -> Thumbnail:
    """Square thumbnail of one level (default: the lowest resolution), letterboxed in white."""
    lvl, (ch, cw), (oy, ox) = thumbnail_geometry(manifest, level, size)
    content = resize_rgb(read_level(manifest, lvl), (ch, cw))
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    canvas[oy : oy + ch, ox : ox + cw] = content
    return Thumbnail(canvas, lvl, (ch, cw), (oy, ox))


def project_mask(
    manifest: SlideManifest, thumb_mask: np.ndarray, level: int, thumb_level: int | None = None
) -> np.ndarray:
    """Nearest-neighbour back-projection of a thumbnail mask onto ``level``."""
    size = thumb_mask.shape[0]
    if thumb_mask.shape != (size, size):
        raise DimensionError(f"thumbnail mask must be square, got {thumb_mask.shape}")
    _, (ch, cw), (oy, ox) = thumbnail_geometry(manifest, thumb_level, size)
    h, w = manifest.levels[level].shape
    rows = oy + np.minimum(((np.arange(h) + 0.5) * ch / h).astype(np.int64), ch - 1)
    cols = ox + np.minimum(((np.arange(w) + 0.5) * cw / w).astype(np.int64), cw - 1)
    return np.asarray(thumb_mask, dtype=bool)[np.ix_(rows, cols)]


# --- windows -----------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    level: int
    row: int
    col: int
    size: tuple[int, int] = (WINDOW, WINDOW)
    coverage: float = 0.0

    @property
    def origin(self) -> tuple[int, int]:
        return (self.row, self.col)

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "row": self.row,
            "col": self.col,
            "size": list(self.size),
            "coverage": self.coverage,
        }


def grid_origins(extent: int, window: int, stride: int) -> list[int]:
    """Window starts along one axis; the last one is pulled inward to end at the edge."""
    if extent < window:
        return []
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] + window < extent:
        starts.append(extent - window)
    return starts


def plan_windows(
    manifest: SlideManifest,
    foreground: np.ndarray,
    stride: int = 256,
    min_coverage: float = 0.05,
    level: int | None = None,
    window: int = WINDOW,
    thumb_level: int | None = None,
) -> list[Window]:
    """Sliding windows over ``level`` whose foreground coverage is at least ``min_coverage``.

    ``foreground`` is a thumbnail-aligned mask; windows are returned in
    row-major order of their origins.
    """
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    lvl = manifest.working_level() if level is None else level
    if not np.any(foreground):
        return []
    fg = project_mask(manifest, foreground, lvl, thumb_level)
    integral = np.zeros((fg.shape[0] + 1, fg.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = fg.cumsum(0).cumsum(1)
    h, w = fg.shape
    area = window * window
    out = []
    for r in grid_origins(h, window, stride):
        for c in grid_origins(w, window, stride):
            count = (
                integral[r + window, c + window]
                - integral[r, c + window]
                - integral[r + window, c]
                + integral[r, c]
            )
            cov = count / area
            if cov >= min_coverage:
                out.append(Window(lvl, r, c, (window, window), float(cov)))
    return out


# --- training patches --------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    flips: bool = True
    rot90: bool = True
    scale: tuple[float, float] = (0.8, 1.2)
    aspect: tuple[float, float] = (0.9, 1.1)
    contrast: float = 0.2
    noise_sigma: float = 8.0 / 255.0

    @classmethod
    def none(cls) -> "AugmentSpec":
        return cls(False, False, (1.0, 1.0), (1.0, 1.0), 0.0, 0.0)

    @property
    def geometric_resize(self) -> bool:
        return self.scale != (1.0, 1.0) or self.aspect != (1.0, 1.0)


@dataclass
class PatchSample:
    image: np.ndarray  # (512, 512, 3) uint8
    mask: np.ndarray  # (512, 512) bool
    label: str
    slide_id: str
    window: Window


def patch_label(mask: np.ndarray) -> str:
    return "positive" if mask.mean() >= POSITIVE_LESION_FRACTION else "negative"


def _augment(img, mask, spec: AugmentSpec, rng: np.random.Generator):
    if spec.flips:
        if rng.random() < 0.5:
            img, mask = img[:, ::-1], mask[:, ::-1]
        if rng.random() < 0.5:
            img, mask = img[::-1], mask[::-1]
    if spec.rot90:
        k = int(rng.integers(4))
        img, mask = np.rot90(img, k), np.rot90(mask, k)
    img = img.astype(np.float64)
    if spec.contrast > 0:
        factor = rng.uniform(1 - spec.contrast, 1 + spec.contrast)
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = (img - mean) * factor + mean
    if spec.noise_sigma > 0:
        sigma = rng.uniform(0, spec.noise_sigma) * 255.0
        img = img + rng.normal(0, sigma, img.shape)
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(img), np.ascontiguousarray(mask)


def extract_patches(
    manifest: SlideManifest,
    lesion_mask: np.ndarray | None,
    count: int,
    augment: AugmentSpec | None = None,
    seed: int = 0,
    kind: str = "positive",
    tissue_mask: np.ndarray | None = None,
    level: int | None = None,
    image: np.ndarray | None = None,
    size: int = WINDOW,
) -> list[PatchSample]:
    """Sample ``count`` training patches from one slide.

    ``kind="positive"`` centres crops on lesion pixels and keeps those with at
    least 1% lesion; ``kind="negative"`` centres crops on tissue and keeps
    those with no lesion at all.  Geometric augmentations move image and mask
    together; photometric ones touch the image only.
    """
    lvl = manifest.working_level() if level is None else level
    if kind not in ("positive", "negative"):
        raise ValidationError(f"unknown patch kind {kind!r}")
    spec = augment or AugmentSpec.none()
    img = read_level(manifest, lvl) if image is None else image
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValidationError(f"level {lvl} ({h}x{w}) is smaller than a {size}px patch")
    lesion = np.zeros((h, w), bool) if lesion_mask is None else np.asarray(lesion_mask, bool)
    if lesion.shape != (h, w):
        raise DimensionError(f"lesion mask {lesion.shape} does not match level {lvl} ({h}x{w})")
    if kind == "positive":
        if not lesion.any():
            raise ValidationError(f"slide {manifest.slide_id}: positive patches need a non-empty lesion mask")
        centres = np.flatnonzero(lesion)
    else:
        if tissue_mask is None:
            from .stain import foreground_mask

            tissue_mask = foreground_mask(img)
        centres = np.flatnonzero(tissue_mask)
        if centres.size == 0:
            centres = np.arange(h * w)
    rng = np.random.default_rng(seed)
    out: list[PatchSample] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * max(count, 1):
            raise ValidationError(
                f"slide {manifest.slide_id}: could not find {count} {kind} patches"
            )
        cy, cx = divmod(int(centres[rng.integers(centres.size)]), w)
        if spec.geometric_resize:
            s = rng.uniform(*spec.scale)
            a = rng.uniform(*spec.aspect)
            ch = min(h, int(round(size * s * math.sqrt(a))))
            cw = min(w, int(round(size * s / math.sqrt(a))))
        else:
            ch = cw = size
        r0 = int(np.clip(cy - ch // 2, 0, h - ch))
        c0 = int(np.clip(cx - cw // 2, 0, w - cw))
        crop = img[r0 : r0 + ch, c0 : c0 + cw]
        cmask = lesion[r0 : r0 + ch, c0 : c0 + cw]
        if (ch, cw) != (size, size):
            crop = resize_rgb(np.ascontiguousarray(crop), (size, size))
            cmask = resize_mask(cmask, (size, size))
        crop, cmask = _augment(crop, cmask, spec, rng)
        label = patch_label(cmask)
        if kind == "positive" and label != "positive":
            continue
        if kind == "negative" and cmask.any():
            continue
        out.append(PatchSample(crop, cmask, label, manifest.slide_id, Window(lvl, r0, c0, (ch, cw))))
    return out


# --- stitching ---------------------------------------------------------------


def stitch_heatmap(windows, shape: tuple[int, int]) -> np.ndarray:
    """Mean of overlapping window maps; pixels no window covers stay 0."""
    total = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    for win, seg in windows:
        seg = np.asarray(seg, dtype=np.float64)
        if seg.shape != tuple(win.size):
            raise ValidationError(f"segmentation map {seg.shape} does not match window {win.size}")
        if np.any(seg < 0) or np.any(seg > 1):
            raise ValidationError("segmentation values must lie in [0, 1]")
        r, c = win.row, win.col
        if r < 0 or c < 0 or r + seg.shape[0] > shape[0] or c + seg.shape[1] > shape[1]:
            raise ValidationError(f"window at {(r, c)} falls outside the {shape} heatmap")
        total[r : r + seg.shape[0], c : c + seg.shape[1]] += seg
        count[r : r + seg.shape[0], c : c + seg.shape[1]] += 1
    covered = count > 0
    total[covered] /= count[covered]
    return total
