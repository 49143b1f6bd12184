import json

import numpy as np
import pytest

from wsiscreen import cli
from wsiscreen.errors import ConfigurationError, ValidationError
from wsiscreen.models import ScreeningConfig, ScreeningNet
from wsiscreen.pipeline import (
    Bag,
    InferConfig,
    Models,
    SlideData,
    TrainSpec,
    calibrate_threshold,
    infer_slide,
    pixel_accuracy,
    split_dataset,
    top_decile_in_lesion,
    train_foreground,
    train_multitask,
    train_screening,
)
from wsiscreen.netpbm import read_pbm, read_pgm16, write_pbm
from wsiscreen.slide import plan_windows, write_slide
from wsiscreen.synthgen import GenSpec, gen_dataset, gen_slide, read_index, render_thumbnail
from stubs import CountingNet, stub_models
from wsiscreen.tensorcore import Tensor, bce_loss

SMALL = dict(size=(512, 512), tile_size=256)


def brute_calibration(pairs, min_sens):
    scores = sorted({s for s, _ in pairs})
    best = None
    for lo, hi in zip(scores, scores[1:]):
        t = (lo + hi) / 2
        tp = sum(1 for s, y in pairs if s > t and y)
        fn = sum(1 for s, y in pairs if s <= t and y)
        tn = sum(1 for s, y in pairs if s <= t and not y)
        fp = sum(1 for s, y in pairs if s > t and not y)
        sens, spec = tp / (tp + fn), tn / (tn + fp)
        if sens >= min_sens and (best is None or spec > best[2] or (spec == best[2] and t > best[0])):
            best = (t, sens, spec)
    return best


class TestSplit:
    def entries(self, n=40):
        return [{"slide_id": f"s{i:03d}", "label": "positive" if i % 2 else "negative"} for i in range(n)]

    def test_disjoint_and_complete(self):
        sp = split_dataset(self.entries(), seed=3, test_frac=0.3)
        ids = [e["slide_id"] for part in sp.values() for e in part]
        assert len(ids) == len(set(ids)) == 40

    def test_stratified(self):
        sp = split_dataset(self.entries(), seed=3, test_frac=0.25)
        assert sum(e["label"] == "positive" for e in sp["test"]) == 5
        assert len(sp["test"]) == 10

    def test_seeded(self):
        a = split_dataset(self.entries(), seed=5)
        assert a == split_dataset(list(reversed(self.entries())), seed=5)
        assert a != split_dataset(self.entries(), seed=6)


class TestCalibration:
    def test_separable_picks_highest(self):
        c = calibrate_threshold([(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)], 1.0)
        assert c.threshold == pytest.approx(0.5) and c.specificity == 1.0

    def test_interleaved_negative(self):
        pairs = [(0.3, 1), (0.5, 0), (0.6, 1), (0.9, 1), (0.1, 0), (0.2, 0)]
        c = calibrate_threshold(pairs, 1.0)
        assert (c.threshold, c.sensitivity, c.specificity) == pytest.approx(brute_calibration(pairs, 1.0))
        assert c.specificity < 1

    def test_random_vs_brute_force(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 30))
            labels = np.arange(n) % 2
            rng.shuffle(labels)
            pairs = [(float(s), int(y)) for s, y in zip(rng.integers(0, 10, n) / 10, labels)]
            target = float(rng.choice([0.5, 0.8, 0.95, 1.0]))
            c = calibrate_threshold(pairs, target)
            ref = brute_calibration(pairs, target)
            if ref is None:
                assert not c.attainable
            else:
                assert (c.threshold, c.sensitivity, c.specificity) == pytest.approx(ref, abs=1e-15)

    def test_unattainable(self):
        c = calibrate_threshold([(0.1, 1), (0.5, 0), (0.9, 1)], 1.0)
        assert not c.attainable and c.threshold is None

    def test_single_class(self):
        with pytest.raises(ValidationError):
            calibrate_threshold([(0.2, 1), (0.4, 1)], 0.9)


@pytest.fixture(scope="module")
def thumbs():
    specs = [GenSpec(seed=100 + i, lesion_present=bool(i % 2), n_tissue_blobs=2 + i % 3, **SMALL) for i in range(60)]
    return np.stack([render_thumbnail(s) for s in specs])


@pytest.fixture(scope="module")
def fg_trained(thumbs):
    spec = TrainSpec(epochs=6, seed=0)
    return train_foreground(thumbs[:50], spec)


class TestForegroundTraining:
    def test_loss_decreases(self, fg_trained):
        losses = [r["loss"] for r in fg_trained[1][:5]]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_agrees_with_stain_oracle(self, fg_trained, thumbs):
        assert pixel_accuracy(fg_trained[0], thumbs[50:]) >= 0.95

    def test_white_is_background(self, fg_trained):
        assert fg_trained[0].predict(np.full((1, 512, 512, 3), 255, np.uint8)).mean() < 0.1

    def test_reproducible(self, thumbs, fg_trained):
        _, hist = train_foreground(thumbs[:50], TrainSpec(epochs=6, seed=0))
        assert abs(hist[-1]["loss"] - fg_trained[1][-1]["loss"]) <= 1e-9

    def test_empty(self):
        with pytest.raises(ValidationError):
            train_foreground(np.zeros((0, 512, 512, 3), np.uint8), TrainSpec())


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    index = gen_dataset(4, 0.5, 2, root, base=GenSpec(**SMALL))
    return read_index(index)


class TestMultiTaskTraining:
    def test_loss_bookkeeping_and_logs(self, tiny_dataset):
        slides = [SlideData.load(e) for e in tiny_dataset]
        spec = TrainSpec(epochs=1, feature_dim=8, positive_per_slide=1, negative_per_slide=1)
        _, hist = train_multitask(slides[:3], slides[3:], spec)
        assert hist["steps"]
        for s in hist["steps"]:
            assert abs(s["total"] - (0.01 * s["cls"] + s["seg"])) <= 1e-12
        assert "val_dice" in hist["epochs"][0] and "lr" in hist["epochs"][0]

    def test_single_class(self, tiny_dataset):
        slides = [SlideData.load(e) for e in tiny_dataset if e["label"] == "negative"]
        with pytest.raises(ValidationError):
            train_multitask(slides, [], TrainSpec(epochs=1, feature_dim=8))


class TestScreeningTraining:
    def test_identical_rows_same_loss(self, rng):
        net = ScreeningNet(ScreeningConfig(feature_dim=5, hidden=4, k=8))
        row = rng.normal(size=(1, 5))
        a = bce_loss(net.forward(Tensor(row)), np.ones((1, 1))).item()
        assert bce_loss(net.forward(Tensor(np.repeat(row, 8, 0))), np.ones((1, 1))).item() == a

    def make_bags(self, rng, n=20):
        bags = []
        for i in range(n):
            label = float(i % 2)
            feats = rng.normal(size=(int(rng.integers(1, 6)), 6)) + 2.0 * label
            bags.append(Bag(f"s{i}", feats, label))
        return bags

    def test_learns_and_counts_skipped(self, rng):
        bags = self.make_bags(rng) + [None, None]
        net, hist = train_screening(bags, TrainSpec(epochs=30, k=8, seed=1))
        assert hist["skipped"] == 2
        correct = [(net.forward(Tensor(b.features)).data[0, 0] > 0.5) == (b.label > 0.5) for b in self.make_bags(rng)]
        assert np.mean(correct) >= 0.9

    def test_deterministic(self, rng):
        bags = self.make_bags(rng)
        a, _ = train_screening(bags, TrainSpec(epochs=3, k=8, seed=4))
        b, _ = train_screening(bags, TrainSpec(epochs=3, k=8, seed=4))
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()

    def test_no_usable_bags(self):
        with pytest.raises(ValidationError):
            train_screening([None], TrainSpec())


@pytest.fixture(scope="module")
def slide_1024(tmp_path_factory):
    root = tmp_path_factory.mktemp("slide")
    m, lesion, _ = gen_slide(GenSpec(slide_id="p", lesion_present=True, seed=21), root / "p")
    return m


class TestInference:
    def test_pipeline_and_counter(self, slide_1024, tmp_path):
        models = stub_models()
        counter = CountingNet(models.multitask)
        models.multitask = counter
        result, heat = infer_slide(slide_1024, models, InferConfig(threshold=0.5), heatmap_path=tmp_path / "h.pgm")
        plan = plan_windows(slide_1024, np.ones((512, 512), bool), thumb_level=1)
        assert result.status == "ok"
        assert counter.calls == len(plan) == result.n_windows == 9
        probs = [p for _, p in result.top_windows]
        assert probs == sorted(probs, reverse=True)
        assert result.decision == ("positive" if result.slide_prob > 0.5 else "negative")
        stored = read_pgm16(tmp_path / "h.pgm")
        assert np.abs(stored - heat).max() <= 0.5 / 65535 + 1e-12

    def test_json_deterministic(self, slide_1024, tmp_path):
        models = stub_models()
        a, _ = infer_slide(slide_1024, models, heatmap_path=tmp_path / "a.pgm")
        b, _ = infer_slide(slide_1024, models, heatmap_path=tmp_path / "a.pgm")
        assert a.dumps() == b.dumps()
        assert (tmp_path / "a.pgm").read_bytes()

    def test_blurred(self, slide_1024):
        result, heat = infer_slide(slide_1024, stub_models(blur_bias=10.0))
        assert result.status == "blurred" and result.decision is None and heat is None
        assert result.to_json()["slide_prob"] is None

    def test_sharp_passes_gate(self, slide_1024):
        assert infer_slide(slide_1024, stub_models(blur_bias=-10.0))[0].status == "ok"

    def test_no_tissue(self, tmp_path):
        img = np.full((1024, 1024, 3), 255, np.uint8)
        m = write_slide(tmp_path / "w", "w", [img, img[::4, ::4].copy()])
        result, _ = infer_slide(m, stub_models(fg_bias=-10.0))
        assert (result.status, result.decision, result.slide_prob) == ("no_tissue", "negative", 0.0)

    def test_missing_checkpoint(self, tmp_path):
        stub_models().foreground.save(tmp_path / "foreground.ckpt")
        with pytest.raises(ConfigurationError):
            Models.load(tmp_path)

    def test_screening_required(self, slide_1024):
        models = stub_models()
        models.screening = None
        with pytest.raises(ConfigurationError):
            infer_slide(slide_1024, models)


def test_top_decile_in_lesion():
    heat = np.arange(100, dtype=float).reshape(10, 10)
    tissue = np.ones((10, 10), bool)
    lesion = np.zeros((10, 10), bool)
    lesion[0] = True
    assert top_decile_in_lesion(heat, lesion, tissue) == 0.0
    lesion[9, :5] = True
    assert top_decile_in_lesion(heat, lesion, tissue) == 0.5
    lesion[9] = True
    assert top_decile_in_lesion(heat, lesion, tissue) == 1.0


class TestCli:
    def test_gen_and_foreground(self, tmp_path, capsys):
        assert cli.main(["gen-synth", "--out", str(tmp_path / "d"), "--slides", "2", "--seed", "1"]) == 0
        entries = read_index(tmp_path / "d")
        slide = entries[0]["dir"]
        assert cli.main(["foreground", "--slide", slide, "--out", str(tmp_path / "fg.pbm")]) == 0
        fg = read_pbm(tmp_path / "fg.pbm")
        assert fg.shape == (256, 256) and fg.any()

    def test_refine(self, tmp_path, slide_1024):
        manual = np.zeros((1024, 1024), bool)
        manual[:, :600] = True
        write_pbm(tmp_path / "manual.pbm", manual)
        args = ["refine-anno", "--slide", str(slide_1024.root), "--manual", str(tmp_path / "manual.pbm"),
                "--out", str(tmp_path / "ref.pbm")]
        assert cli.main(args) == 0
        refined = read_pbm(tmp_path / "ref.pbm")
        assert not (refined & ~manual).any() and refined.any()

    def test_screen_and_eval(self, tmp_path, slide_1024):
        models = stub_models()
        ck = tmp_path / "ck"
        ck.mkdir()
        models.foreground.save(ck / "foreground.ckpt")
        models.multitask.save(ck / "multitask.ckpt")
        models.screening.save(ck / "screening.ckpt", meta={"threshold": 0.3})
        out = tmp_path / "pred"
        out.mkdir()
        args = ["screen", "--slide", str(slide_1024.root), "--ckpt-dir", str(ck),
                "--out", str(out / "p.json"), "--heatmap", str(out / "p.pgm")]
        assert cli.main(args) == 0
        doc = json.loads((out / "p.json").read_text())
        assert doc["threshold"] == 0.3 and doc["status"] == "ok" and len(doc["top_windows"]) == 9
        (tmp_path / "index.jsonl").write_text(
            json.dumps({"slide_id": "p", "label": "positive", "path": str(slide_1024.root)}) + "\n"
        )
        assert cli.main(["eval", "--pred", str(out), "--truth", str(tmp_path / "index.jsonl"),
                         "--out", str(tmp_path / "r.json")]) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["n_pos"] == 1 and report["n_neg"] == 0 and report["roc_auc"] is None

    def test_exit_codes(self, tmp_path):
        assert cli.main(["foreground", "--slide", str(tmp_path / "missing"), "--out", str(tmp_path / "x.pbm")]) == 3
        assert cli.main(["gen-synth", "--out", str(tmp_path / "d"), "--slides", "1"]) == 2
        (tmp_path / "ck").mkdir()
        assert cli.main(["screen", "--slide", str(tmp_path), "--ckpt-dir", str(tmp_path / "ck")]) == 4
