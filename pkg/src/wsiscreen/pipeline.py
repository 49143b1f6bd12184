"""Training procedures, slide inference and threshold calibration."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError
from .metrics import dice
from .models import (
    BlurConfig,
    BlurNet,
    ForegroundConfig,
    ForegroundNet,
    MultiTaskConfig,
    MultiTaskNet,
    ScreeningConfig,
    ScreeningNet,
    decide,
    select_topk,
    to_input,
)
from .netpbm import write_pgm16
from .slide import (
    AugmentSpec,
    SlideManifest,
    Window,
    extract_patches,
    load_manifest,
    plan_windows,
    read_level,
    read_mask,
    read_region,
    stitch_heatmap,
    thumbnail,
)
from .stain import foreground_mask
from .tensorcore import Adam, Tensor, bce_loss, combined_loss, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainSpec:
    epochs: int = 10
    batch_size: int = 4
    lam: float = 0.01
    lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    seed: int = 0
    test_frac: float = 0.3
    val_frac: float = 0.2
    feature_dim: int = 512
    k: int = 64
    positive_per_slide: int = 2
    negative_per_slide: int = 2
    augment: bool = True


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def split_dataset(entries: list[dict], seed: int, test_frac: float = 0.3, val_frac: float = 0.2) -> dict[str, list[dict]]:
    """Slide-disjoint train/val/test split, stratified by label and fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    out = {"train": [], "val": [], "test": []}
    for label in ("positive", "negative"):
        group = sorted((e for e in entries if e["label"] == label), key=lambda e: e["slide_id"])
        group = [group[i] for i in rng.permutation(len(group))]
        n_test = int(round(len(group) * test_frac))
        n_val = int(round((len(group) - n_test) * val_frac))
        out["test"] += group[:n_test]
        out["val"] += group[n_test : n_test + n_val]
        out["train"] += group[n_test + n_val :]
    for k in out:
        out[k].sort(key=lambda e: e["slide_id"])
    return out


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, size):
        yield order[i : i + size]


def _make_optimizer(net, spec: TrainSpec) -> Adam:
    opt = Adam(net.params, lr=spec.lr)
    opt.state.plateau_factor = spec.plateau_factor
    opt.state.plateau_patience = spec.plateau_patience
    return opt


# --- foreground network ------------------------------------------------------


def foreground_targets(thumbs: np.ndarray) -> np.ndarray:
    """Stain-oracle masks for a stack of thumbnails."""
    return np.stack([foreground_mask(t) for t in thumbs])


def train_foreground(
    train_thumbs: np.ndarray,
    spec: TrainSpec,
    val_thumbs: np.ndarray | None = None,
    config: ForegroundConfig | None = None,
) -> tuple[ForegroundNet, list[dict]]:
    """Fit the foreground net to colour-deconvolution/Otsu masks of the thumbnails."""
    if len(train_thumbs) == 0:
        raise ValidationError("foreground training needs at least one thumbnail")
    net = ForegroundNet(config, seed=spec.seed)
    opt = _make_optimizer(net, spec)
    x_train = to_input(train_thumbs)
    y_train = foreground_targets(train_thumbs)[:, None].astype(np.float64)
    if val_thumbs is not None and len(val_thumbs):
        x_val = to_input(val_thumbs)
        y_val = foreground_targets(val_thumbs)[:, None].astype(np.float64)
    else:
        x_val = y_val = None
    rng = np.random.default_rng(spec.seed)
    history = []
    for epoch in range(spec.epochs):
        losses = []
        for idx in _batches(len(x_train), spec.batch_size, rng):
            opt.zero_grad()
            loss = bce_loss(net.forward(Tensor(x_train[idx]), training=True), y_train[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(idx))
        record = {"epoch": epoch, "loss": sum(losses) / len(x_train), "lr": opt.lr}
        if x_val is not None:
            with no_grad():
                record["val_loss"] = bce_loss(net.forward(Tensor(x_val)), y_val).item()
            opt.observe_validation(record["val_loss"])
        history.append(record)
        log.info("foreground epoch %d: %s", epoch, record)
    return net, history


def pixel_accuracy(net: ForegroundNet, thumbs: np.ndarray) -> float:
    pred = net.predict(thumbs) > 0.5
    return float(np.mean(pred == foreground_targets(thumbs)))


# --- multi-task network ------------------------------------------------------


@dataclass
class SlideData:
    manifest: SlideManifest
    image: np.ndarray
    lesion: np.ndarray | None
    tissue: np.ndarray

    @classmethod
    def load(cls, entry_or_dir) -> "SlideData":
        path = entry_or_dir["dir"] if isinstance(entry_or_dir, dict) else entry_or_dir
        m = load_manifest(path)
        lvl = m.working_level()
        img = read_level(m, lvl)
        lesion = read_mask(m, "lesion", lvl)
        return cls(m, img, lesion, foreground_mask(img))

    @property
    def positive(self) -> bool:
        return self.lesion is not None and bool(self.lesion.any())


def sample_patches(slide: SlideData, spec: TrainSpec, seed: int, augment: bool) -> list:
    aug = AugmentSpec() if augment else AugmentSpec.none()
    out = []
    common = dict(augment=aug, tissue_mask=slide.tissue, image=slide.image, level=slide.manifest.working_level())
    if slide.positive:
        out += extract_patches(slide.manifest, slide.lesion, spec.positive_per_slide, seed=seed, kind="positive", **common)
        n_neg = max(1, spec.negative_per_slide // 2)
    else:
        n_neg = spec.negative_per_slide
    try:
        out += extract_patches(slide.manifest, slide.lesion, n_neg, seed=seed + 1, kind="negative", **common)
    except ValidationError:
        log.debug("slide %s: no lesion-free tissue patch found", slide.manifest.slide_id)
    return out


def _stack(patches):
    x = to_input(np.stack([p.image for p in patches]))
    masks = np.stack([p.mask for p in patches])[:, None].astype(np.float64)
    labels = np.array([[1.0 if p.label == "positive" else 0.0] for p in patches])
    return x, masks, labels


def patch_dice(net: MultiTaskNet, patches, threshold: float = 0.5) -> list[float]:
    """Dice of the thresholded segmentation for every patch that contains lesion."""
    chosen = [p for p in patches if p.mask.any()]
    if not chosen:
        return []
    _, segs, _ = net.predict(np.stack([p.image for p in chosen]))
    return [dice(s > threshold, p.mask) for s, p in zip(segs, chosen)]


def train_multitask(
    train: list[SlideData],
    val: list[SlideData],
    spec: TrainSpec,
    config: MultiTaskConfig | None = None,
) -> tuple[MultiTaskNet, dict]:
    """Minimise lam * L_cls + L_seg over freshly augmented patches each epoch."""
    if not train:
        raise ValidationError("multi-task training needs slides")
    if all(s.positive for s in train) or not any(s.positive for s in train):
        raise ValidationError("multi-task training needs both positive and negative slides")
    cfg = config or MultiTaskConfig(feature_dim=spec.feature_dim)
    net = MultiTaskNet(cfg, seed=spec.seed)
    opt = _make_optimizer(net, spec)
    val_patches = []
    for i, s in enumerate(val):
        val_patches += sample_patches(s, spec, _seed(spec.seed, 999, i), augment=False)
    steps, epochs = [], []
    for epoch in range(spec.epochs):
        patches = []
        for i, s in enumerate(train):
            patches += sample_patches(s, spec, _seed(spec.seed, epoch, i), augment=spec.augment)
        x, masks, labels = _stack(patches)
        rng = np.random.default_rng(_seed(spec.seed, epoch, 10**6))
        for idx in _batches(len(patches), spec.batch_size, rng):
            opt.zero_grad()
            prob, seg, _ = net.forward(Tensor(x[idx]), training=True)
            l_cls = bce_loss(prob, labels[idx])
            l_seg = bce_loss(seg, masks[idx])
            total = combined_loss(l_cls, l_seg, spec.lam)
            total.backward()
            opt.step()
            steps.append({"epoch": epoch, "cls": l_cls.item(), "seg": l_seg.item(), "total": total.item()})
        record = {
            "epoch": epoch,
            "loss": float(np.mean([s["total"] for s in steps if s["epoch"] == epoch])),
            "lr": opt.lr,
        }
        if val_patches:
            vx, vm, vl = _stack(val_patches)
            with no_grad():
                vloss = 0.0
                for idx in _batches(len(val_patches), spec.batch_size, None):
                    p, s, _ = net.forward(Tensor(vx[idx]))
                    vloss += combined_loss(bce_loss(p, vl[idx]), bce_loss(s, vm[idx]), spec.lam).item() * len(idx)
            record["val_loss"] = vloss / len(val_patches)
            d = patch_dice(net, val_patches)
            record["val_dice"] = float(np.mean(d)) if d else None
            opt.observe_validation(record["val_loss"])
        epochs.append(record)
        log.info("multitask epoch %d: %s", epoch, record)
    return net, {"steps": steps, "epochs": epochs}


# --- windows, bags and slide screening ---------------------------------------


@dataclass
class InferConfig:
    threshold: float = 0.74
    stride: int = 256
    min_coverage: float = 0.05
    batch_size: int = 4
    blur_threshold: float = 0.5


@dataclass
class Models:
    foreground: ForegroundNet
    multitask: MultiTaskNet
    screening: ScreeningNet | None = None
    blur: BlurNet | None = None

    @classmethod
    def load(cls, ckpt_dir) -> "Models":
        d = Path(ckpt_dir)
        required = {"foreground": ForegroundNet, "multitask": MultiTaskNet, "screening": ScreeningNet}
        loaded = {}
        for name, kind in required.items():
            path = d / f"{name}.ckpt"
            if not path.is_file():
                raise ConfigurationError(f"missing checkpoint {path}")
            loaded[name] = kind.load(path)
        blur = BlurNet.load(d / "blur.ckpt") if (d / "blur.ckpt").is_file() else None
        return cls(blur=blur, **loaded)


@dataclass
class WindowAnalysis:
    windows: list[Window]
    probs: np.ndarray
    segs: np.ndarray
    features: np.ndarray
    evaluated: int = 0


def analyse_windows(manifest: SlideManifest, models: Models, cfg: InferConfig, thumb=None) -> WindowAnalysis:
    """Foreground net on the thumbnail, then the multi-task net on every planned window."""
    thumb = thumb or thumbnail(manifest)
    fg = models.foreground.predict(thumb.image)[0] > 0.5
    windows = plan_windows(manifest, fg, cfg.stride, cfg.min_coverage, thumb_level=thumb.source_level)
    d = models.multitask.config.feature_dim
    size = models.multitask.config.input_size
    if not windows:
        return WindowAnalysis([], np.zeros(0), np.zeros((0, size, size)), np.zeros((0, d)))
    probs, segs, feats = [], [], []
    evaluated = 0
    for i in range(0, len(windows), cfg.batch_size):
        chunk = windows[i : i + cfg.batch_size]
        imgs = np.stack([read_region(manifest, w.level, w.origin, w.size) for w in chunk])
        p, s, f = models.multitask.predict(imgs, batch_size=cfg.batch_size)
        evaluated += len(chunk)
        probs.append(p)
        segs.append(s)
        feats.append(f)
    return WindowAnalysis(windows, np.concatenate(probs), np.concatenate(segs), np.concatenate(feats), evaluated)


@dataclass
class ScreeningResult:
    slide_id: str
    status: str
    slide_prob: float | None
    decision: str | None
    threshold: float
    top_windows: list[tuple[Window, float]] = field(default_factory=list)
    heatmap: str | None = None
    blur_prob: float | None = None
    n_windows: int = 0

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "status": self.status,
            "slide_prob": self.slide_prob,
            "decision": self.decision,
            "threshold": self.threshold,
            "blur_prob": self.blur_prob,
            "n_windows": self.n_windows,
            "top_windows": [{**w.to_json(), "class_prob": p} for w, p in self.top_windows],
            "heatmap": self.heatmap,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def infer_slide(
    manifest: SlideManifest,
    models: Models,
    cfg: InferConfig | None = None,
    heatmap_path=None,
) -> tuple[ScreeningResult, np.ndarray | None]:
    """Blur gate, foreground, windowed multi-task pass, top-k screening, heatmap."""
    cfg = cfg or InferConfig()
    if models.screening is None:
        raise ConfigurationError("slide screening needs a screening checkpoint")
    thumb = thumbnail(manifest)
    blur_prob = None
    if models.blur is not None:
        blur_prob = float(models.blur.predict(thumb.image)[0])
        if blur_prob > cfg.blur_threshold:
            return ScreeningResult(manifest.slide_id, "blurred", None, None, cfg.threshold, blur_prob=blur_prob), None
    analysis = analyse_windows(manifest, models, cfg, thumb)
    level = manifest.working_level()
    shape = manifest.levels[level].shape
    if not analysis.windows:
        log.warning("slide %s: no tissue windows; reporting negative", manifest.slide_id)
        result = ScreeningResult(manifest.slide_id, "no_tissue", 0.0, "negative", cfg.threshold, blur_prob=blur_prob)
        heat = np.zeros(shape)
    else:
        bag, order = select_topk(analysis.probs, analysis.features, models.screening.config.k)
        with no_grad():
            slide_prob = float(models.screening.forward(Tensor(bag)).data[0, 0])
        result = ScreeningResult(
            manifest.slide_id,
            "ok",
            slide_prob,
            decide(slide_prob, cfg.threshold),
            cfg.threshold,
            [(analysis.windows[i], float(analysis.probs[i])) for i in order],
            blur_prob=blur_prob,
            n_windows=analysis.evaluated,
        )
        heat = stitch_heatmap(zip(analysis.windows, analysis.segs), shape)
    if heatmap_path is not None:
        write_pgm16(heatmap_path, heat)
        result.heatmap = str(heatmap_path)
    return result, heat


# --- screening head ----------------------------------------------------------


@dataclass
class Bag:
    slide_id: str
    features: np.ndarray  # top-k rows, already ordered
    label: float


def build_bag(manifest: SlideManifest, models: Models, cfg: InferConfig, k: int) -> Bag | None:
    analysis = analyse_windows(manifest, models, cfg)
    if not analysis.windows:
        return None
    rows, _ = select_topk(analysis.probs, analysis.features, k)
    return Bag(manifest.slide_id, rows, 1.0 if manifest.label == "positive" else 0.0)


def train_screening(
    bags: list[Bag | None],
    spec: TrainSpec,
    val_bags: list[Bag | None] = (),
    config: ScreeningConfig | None = None,
) -> tuple[ScreeningNet, dict]:
    """BCE on slide labels over top-k bags; bags of slides without windows are skipped."""
    usable = [b for b in bags if b is not None]
    skipped = len(bags) - len(usable)
    if skipped:
        log.warning("%d slide(s) without tissue windows excluded from screening training", skipped)
    if not usable:
        raise ValidationError("screening training needs at least one slide with windows")
    labels = {b.label for b in usable}
    if len(labels) < 2:
        raise ValidationError("screening training needs both positive and negative slides")
    d = usable[0].features.shape[1]
    cfg = config or ScreeningConfig(feature_dim=d, k=spec.k)
    net = ScreeningNet(cfg, seed=spec.seed)
    opt = _make_optimizer(net, spec)
    val = [b for b in val_bags if b is not None]
    rng = np.random.default_rng(spec.seed)
    history = []
    for epoch in range(spec.epochs):
        total = 0.0
        for i in rng.permutation(len(usable)):
            b = usable[i]
            opt.zero_grad()
            loss = bce_loss(net.forward(Tensor(b.features[: cfg.k])), np.array([[b.label]]))
            loss.backward()
            opt.step()
            total += loss.item()
        record = {"epoch": epoch, "loss": total / len(usable), "lr": opt.lr}
        if val:
            with no_grad():
                record["val_loss"] = float(
                    np.mean([bce_loss(net.forward(Tensor(b.features[: cfg.k])), np.array([[b.label]])).item() for b in val])
                )
            opt.observe_validation(record["val_loss"])
        history.append(record)
    return net, {"epochs": history, "skipped": skipped}


# --- blur detector -----------------------------------------------------------


def train_blur(
    thumbs: np.ndarray, labels: np.ndarray, spec: TrainSpec, config: BlurConfig | None = None
) -> tuple[BlurNet, list[dict]]:
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if len(thumbs) == 0 or len(set(labels.ravel())) < 2:
        raise ValidationError("blur training needs sharp and blurred thumbnails")
    net = BlurNet(config, seed=spec.seed)
    opt = _make_optimizer(net, spec)
    thumbs = np.asarray(thumbs)
    rng = np.random.default_rng(spec.seed)
    history = []
    for epoch in range(spec.epochs):
        total = 0.0
        for idx in _batches(len(thumbs), spec.batch_size, rng):
            opt.zero_grad()
            loss = bce_loss(net.forward(Tensor(to_input(thumbs[idx])), training=True), labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "loss": total / len(thumbs), "lr": opt.lr})
    # running BN averages lag the fast-moving weights; re-estimate them once at the end
    net.recompute_bn_stats(to_input(thumbs[idx]) for idx in _batches(len(thumbs), spec.batch_size, None))
    return net, history


# --- threshold calibration ---------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    threshold: float | None
    sensitivity: float | None
    specificity: float | None

    @property
    def attainable(self) -> bool:
        return self.threshold is not None


def calibrate_threshold(val_results, min_sensitivity: float) -> Calibration:
    """Highest-specificity cut among score midpoints meeting ``min_sensitivity``.

    Ties on specificity go to the higher threshold.  Returns a Calibration
    with ``threshold=None`` when no midpoint reaches the sensitivity floor.
    """
    scores = np.array([float(s) for s, _ in val_results])
    labels = np.array([bool(y) for _, y in val_results])
    if labels.all() or not labels.any():
        raise ValidationError("calibration needs both positive and negative slides")
    uniq = np.unique(scores)
    best = Calibration(None, None, None)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    for t in (uniq[:-1] + uniq[1:]) / 2:
        pred = scores > t
        sens = float((pred & labels).sum() / n_pos)
        spec = float((~pred & ~labels).sum() / n_neg)
        if sens < min_sensitivity:
            continue
        if best.threshold is None or spec >= best.specificity:
            best = Calibration(float(t), sens, spec)
    return best


def save_history(path, history) -> None:
    Path(path).write_text(json.dumps(history, indent=1, sort_keys=True))


def spec_dict(spec: TrainSpec) -> dict:
    return asdict(spec)


# --- end-to-end experiment ---------------------------------------------------


def thumbnails_of(entries: list[dict]) -> np.ndarray:
    return np.stack([thumbnail(load_manifest(e["dir"])).image for e in entries])


def top_decile_in_lesion(heat: np.ndarray, lesion: np.ndarray, tissue: np.ndarray) -> float:
    """Fraction of the top-10% heatmap pixels (ranked over tissue) that lie in the lesion."""
    vals = heat[tissue]
    if vals.size == 0:
        return 0.0
    n = max(1, int(np.ceil(0.1 * vals.size)))
    order = np.argsort(-vals, kind="stable")[:n]
    return float(lesion[tissue][order].mean())


def run_experiment(index, out_dir, spec: TrainSpec, *, min_sensitivity: float = 0.95,
                   fg_epochs: int = 8, screen_epochs: int = 60, infer: InferConfig | None = None) -> dict:
    """Split, train the three networks, calibrate on validation, screen the test slides.

    Writes ``foreground.ckpt``, ``multitask.ckpt``, ``screening.ckpt``, one
    ``<slide>.json`` + ``<slide>.pgm`` per test slide and ``report.json``.
    """
    from .metrics import screening_report

    from .synthgen import read_index

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = [e for e in read_index(index) if not e.get("blurred")]
    split = split_dataset(entries, spec.seed, spec.test_frac, spec.val_frac)
    infer = infer or InferConfig()

    fg_spec = TrainSpec(**{**asdict(spec), "epochs": fg_epochs})
    fg_net, fg_hist = train_foreground(thumbnails_of(split["train"]), fg_spec, thumbnails_of(split["val"]))
    fg_net.save(out / "foreground.ckpt")

    train = [SlideData.load(e) for e in split["train"]]
    val = [SlideData.load(e) for e in split["val"]]
    mt_net, mt_hist = train_multitask(train, val, spec)
    mt_net.save(out / "multitask.ckpt")
    del train

    models = Models(fg_net, mt_net)
    bags = [build_bag(load_manifest(e["dir"]), models, infer, spec.k) for e in split["train"]]
    val_bags = [build_bag(load_manifest(e["dir"]), models, infer, spec.k) for e in split["val"]]
    sc_spec = TrainSpec(**{**asdict(spec), "epochs": screen_epochs})
    sc_net, sc_hist = train_screening(bags, sc_spec, val_bags)
    val_scores = []
    for b in val_bags:
        if b is not None:
            with no_grad():
                val_scores.append((float(sc_net.forward(Tensor(b.features)).data[0, 0]), b.label > 0.5))
    calib = calibrate_threshold(val_scores, min_sensitivity)
    threshold = calib.threshold if calib.attainable else infer.threshold
    sc_net.save(out / "screening.ckpt", meta={"threshold": threshold})
    models.screening = sc_net

    cfg = InferConfig(**{**asdict(infer), "threshold": threshold})
    probs, labels, localisation = [], [], []
    for e in split["test"]:
        m = load_manifest(e["dir"])
        result, heat = infer_slide(m, models, cfg, heatmap_path=out / f"{m.slide_id}.pgm")
        result.heatmap = f"{m.slide_id}.pgm"  # relative to the result file, so runs compare byte-for-byte
        (out / f"{m.slide_id}.json").write_text(result.dumps())
        probs.append(result.slide_prob if result.slide_prob is not None else 0.0)
        labels.append(m.label == "positive")
        if m.label == "positive" and heat is not None:
            lvl = m.working_level()
            img = read_level(m, lvl)
            localisation.append(top_decile_in_lesion(heat, read_mask(m, "lesion", lvl), foreground_mask(img)))

    test_patches = []
    for i, e in enumerate(split["test"]):
        test_patches += sample_patches(SlideData.load(e), spec, _seed(spec.seed, 7777, i), augment=False)
    dices = patch_dice(mt_net, test_patches)
    report = screening_report(np.array(probs), np.array(labels), threshold, dices)
    report.update(
        localisation_mean=float(np.mean(localisation)) if localisation else None,
        localisation_min=float(np.min(localisation)) if localisation else None,
        calibration={"threshold": calib.threshold, "sensitivity": calib.sensitivity, "specificity": calib.specificity},
        split={k: [e["slide_id"] for e in v] for k, v in split.items()},
        skipped_bags=sc_hist["skipped"],
    )
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    save_history(out / "history.json", {"foreground": fg_hist, "multitask": mt_hist, "screening": sc_hist["epochs"]})
    return report
