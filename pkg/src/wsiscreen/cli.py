"""``wsiscreen`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import SlideIOError, ValidationError, WsiScreenError

log = logging.getLogger("wsiscreen")


def _gen_synth(args):
    from .synthgen import gen_dataset

    index = gen_dataset(args.slides, args.positive_frac, args.seed, args.out, blur_frac=args.blur_frac)
    print(index)


def _refine(args):
    from .netpbm import read_pbm, write_pbm
    from .slide import load_manifest, read_level
    from .stain import foreground_mask, refine_annotation

    m = load_manifest(args.slide)
    manual = read_pbm(args.manual)
    level = args.level
    refined = refine_annotation(manual, foreground_mask(read_level(m, level)))
    write_pbm(args.out, refined)
    print(f"{int(refined.sum())} of {int(manual.sum())} annotated pixels kept")


def _foreground(args):
    from .models import ForegroundNet
    from .netpbm import write_pbm
    from .slide import load_manifest, read_level, thumbnail
    from .stain import foreground_mask

    m = load_manifest(args.slide)
    if args.net:
        mask = ForegroundNet.load(args.net).predict(thumbnail(m).image)[0] > 0.5
    else:
        level = len(m.levels) - 1 if args.level is None else args.level
        mask = foreground_mask(read_level(m, level))
    write_pbm(args.out, mask)


def _train(args):
    from . import pipeline as pl
    from .synthgen import read_index

    spec = pl.TrainSpec(
        epochs=args.epochs,
        seed=args.seed,
        lam=args.lam,
        k=args.k,
        feature_dim=args.feature_dim,
        lr=args.lr,
    )
    entries = [e for e in read_index(args.data) if not e.get("blurred")]
    split = pl.split_dataset(entries, spec.seed, spec.test_frac, spec.val_frac)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.net == "foreground":
        net, hist = pl.train_foreground(pl.thumbnails_of(split["train"]), spec, pl.thumbnails_of(split["val"]))
        net.save(out)
    elif args.net == "multitask":
        train = [pl.SlideData.load(e) for e in split["train"]]
        val = [pl.SlideData.load(e) for e in split["val"]]
        net, hist = pl.train_multitask(train, val, spec)
        net.save(out)
    elif args.net == "blur":
        from .slide import load_manifest, thumbnail

        all_entries = read_index(args.data)
        thumbs = np.stack([thumbnail(load_manifest(e["dir"])).image for e in all_entries])
        labels = np.array([float(e.get("blurred", False)) for e in all_entries])
        net, hist = pl.train_blur(thumbs, labels, spec)
        net.save(out)
    else:
        from .models import ForegroundNet, MultiTaskNet

        ckpt_dir = Path(args.ckpt_dir) if args.ckpt_dir else out.parent
        models = pl.Models(ForegroundNet.load(ckpt_dir / "foreground.ckpt"), MultiTaskNet.load(ckpt_dir / "multitask.ckpt"))
        from .slide import load_manifest

        cfg = pl.InferConfig()
        bags = [pl.build_bag(load_manifest(e["dir"]), models, cfg, spec.k) for e in split["train"]]
        val_bags = [pl.build_bag(load_manifest(e["dir"]), models, cfg, spec.k) for e in split["val"]]
        net, hist = pl.train_screening(bags, spec, val_bags)
        meta = {}
        if args.min_sensitivity is not None:
            scores = [(float(net.forward(pl.Tensor(b.features)).data[0, 0]), b.label > 0.5) for b in val_bags if b]
            calib = pl.calibrate_threshold(scores, args.min_sensitivity)
            if not calib.attainable:
                log.warning("sensitivity %.3f is unattainable on validation; keeping the default threshold",
                            args.min_sensitivity)
            else:
                meta["threshold"] = calib.threshold
        net.save(out, meta=meta)
    pl.save_history(out.with_suffix(".log.json"), hist)
    print(out)


def _screen(args):
    from .pipeline import InferConfig, Models, infer_slide
    from .slide import load_manifest

    models = Models.load(args.ckpt_dir)
    threshold = args.threshold
    if threshold is None:
        threshold = models.screening.meta.get("threshold", 0.74)
    m = load_manifest(args.slide)
    result, _ = infer_slide(m, models, InferConfig(threshold=threshold), heatmap_path=args.heatmap)
    text = result.dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)


def _eval(args):
    from .metrics import dice, screening_report
    from .netpbm import read_pgm16
    from .slide import load_manifest, read_mask
    from .synthgen import read_index

    truth = {e["slide_id"]: e for e in read_index(args.truth)}
    probs, labels, dices, thresholds = [], [], [], set()
    for path in sorted(Path(args.pred).glob("*.json")):
        doc = json.loads(path.read_text())
        if "slide_id" not in doc or doc["slide_id"] not in truth:
            continue
        if doc["status"] == "blurred":
            continue
        e = truth[doc["slide_id"]]
        probs.append(doc["slide_prob"])
        labels.append(e["label"] == "positive")
        thresholds.add(doc["threshold"])
        heat_path = Path(args.pred) / doc["heatmap"] if doc.get("heatmap") else None
        if e["label"] == "positive" and heat_path is not None and heat_path.is_file():
            m = load_manifest(e["dir"])
            heat = read_pgm16(heat_path) > 0.5
            lesion = read_mask(m, "lesion", m.working_level())
            if lesion is not None and lesion.shape == heat.shape:
                dices.append(dice(heat, lesion))
    if not probs:
        raise ValidationError(f"no screening results for indexed slides in {args.pred}")
    if len(thresholds) != 1:
        raise ValidationError(f"results use differing thresholds {sorted(thresholds)}")
    report = screening_report(np.array(probs), np.array(labels), thresholds.pop(), dices)
    Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsiscreen", description="Whole-slide screening toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic slide dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--slides", type=int, default=20)
    g.add_argument("--positive-frac", type=float, default=0.5)
    g.add_argument("--blur-frac", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_gen_synth)

    r = sub.add_parser("refine-anno", help="intersect a manual annotation with the tissue mask")
    r.add_argument("--slide", required=True)
    r.add_argument("--manual", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--level", type=int, default=0)
    r.set_defaults(func=_refine)

    f = sub.add_parser("foreground", help="tissue mask of a slide")
    f.add_argument("--slide", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--net", help="foreground checkpoint; omit for the stain oracle")
    f.add_argument("--level", type=int)
    f.set_defaults(func=_foreground)

    t = sub.add_parser("train", help="train one network")
    t.add_argument("net", choices=["foreground", "multitask", "screening", "blur"])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lambda", dest="lam", type=float, default=0.01)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--k", type=int, default=64)
    t.add_argument("--feature-dim", type=int, default=512)
    t.add_argument("--ckpt-dir", help="screening: directory holding foreground.ckpt and multitask.ckpt")
    t.add_argument("--min-sensitivity", type=float, help="screening: calibrate the threshold on validation")
    t.set_defaults(func=_train)

    s = sub.add_parser("screen", help="screen one slide")
    s.add_argument("--slide", required=True)
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--threshold", type=float, help="default: calibrated value stored with the screening checkpoint, else 0.74")
    s.add_argument("--out")
    s.add_argument("--heatmap")
    s.set_defaults(func=_screen)

    e = sub.add_parser("eval", help="score screening results against a dataset index")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except WsiScreenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return SlideIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
