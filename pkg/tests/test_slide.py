import json

import numpy as np
import pytest

from wsiscreen.errors import RangeError, SlideIOError, ValidationError
from wsiscreen.slide import (
    AugmentSpec,
    Window,
    extract_patches,
    grid_origins,
    load_manifest,
    plan_windows,
    project_mask,
    read_level,
    read_region,
    stitch_heatmap,
    thumbnail,
    write_slide,
)


def random_slide(tmp_path, rng, shape=(300, 200), tile=64, name="s"):
    img = rng.integers(0, 256, (*shape, 3), dtype=np.uint8)
    small = img[::4, ::4].copy()
    m = write_slide(tmp_path / name, name, [img, small], tile_size=tile)
    return m, img


def constant_slide(tmp_path, shape, value=200, name="c"):
    img = np.full((*shape, 3), value, np.uint8)
    return write_slide(tmp_path / name, name, [img, img[::4, ::4].copy()], tile_size=256)


class TestReader:
    def test_full_level_identity(self, tmp_path, rng):
        m, img = random_slide(tmp_path, rng)
        np.testing.assert_array_equal(read_region(m, 0, (0, 0), img.shape[:2]), img)
        np.testing.assert_array_equal(read_level(load_manifest(tmp_path / "s"), 0), img)

    def test_straddles_four_tiles(self, tmp_path, rng):
        m, img = random_slide(tmp_path, rng)
        np.testing.assert_array_equal(read_region(m, 0, (50, 40), (30, 50)), img[50:80, 40:90])

    def test_random_crops(self, tmp_path, rng):
        m, img = random_slide(tmp_path, rng)
        for _ in range(200):
            r, c = rng.integers(0, 300), rng.integers(0, 200)
            h, w = rng.integers(1, 301 - r), rng.integers(1, 201 - c)
            np.testing.assert_array_equal(read_region(m, 0, (r, c), (h, w)), img[r : r + h, c : c + w])

    def test_repeatable(self, tmp_path, rng):
        m, _ = random_slide(tmp_path, rng)
        a = read_region(m, 1, (3, 5), (20, 20))
        np.testing.assert_array_equal(a, read_region(m, 1, (3, 5), (20, 20)))

    @pytest.mark.parametrize("origin,size", [((300, 0), (1, 1)), ((0, 190), (5, 20)), ((-1, 0), (2, 2))])
    def test_out_of_bounds(self, tmp_path, rng, origin, size):
        m, _ = random_slide(tmp_path, rng)
        with pytest.raises(RangeError):
            read_region(m, 0, origin, size)

    def test_missing_tile_named(self, tmp_path, rng):
        m, _ = random_slide(tmp_path, rng)
        m.tile_path(0, 1, 1).unlink()
        with pytest.raises(SlideIOError, match="r1_c1"):
            load_manifest(tmp_path / "s")

    def test_corrupt_tile(self, tmp_path, rng):
        m, _ = random_slide(tmp_path, rng)
        m.tile_path(0, 0, 0).write_bytes(b"P6\n64 64\n255\nshort")
        with pytest.raises(SlideIOError, match="r0_c0"):
            read_region(m, 0, (0, 0), (2, 2))

    def test_bad_manifest(self, tmp_path, rng):
        random_slide(tmp_path, rng)
        path = tmp_path / "s" / "slide.json"
        doc = json.loads(path.read_text())
        doc["levels"] = []
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            load_manifest(tmp_path / "s")


class TestThumbnail:
    def test_square_no_letterbox(self, tmp_path):
        th = thumbnail(constant_slide(tmp_path, (1024, 1024)))
        assert th.offset == (0, 0) and th.content_shape == (512, 512)

    def test_letterbox_2_to_1(self, tmp_path):
        th = thumbnail(constant_slide(tmp_path, (512, 1024), value=100))
        assert th.content_shape == (256, 512)
        assert th.offset == (128, 0)
        assert (th.image[:128] == 255).all() and (th.image[384:] == 255).all()
        assert (th.image[128:384] == 100).all()

    def test_constant(self, tmp_path):
        th = thumbnail(constant_slide(tmp_path, (1024, 1024), value=77))
        assert (th.image == 77).all()


class TestPlan:
    def test_grid_origins(self):
        assert grid_origins(1024, 512, 256) == [0, 256, 512]
        assert grid_origins(1100, 512, 256) == [0, 256, 512, 588]
        assert grid_origins(400, 512, 256) == []

    def test_empty(self, tmp_path):
        assert plan_windows(constant_slide(tmp_path, (1024, 1024)), np.zeros((512, 512), bool)) == []

    def test_nine_windows(self, tmp_path):
        wins = plan_windows(constant_slide(tmp_path, (1024, 1024)), np.ones((512, 512), bool))
        assert [(w.row, w.col) for w in wins] == [(r, c) for r in (0, 256, 512) for c in (0, 256, 512)]
        assert all(w.coverage == 1.0 for w in wins)

    @pytest.mark.parametrize("radius", [40, 120, 200])
    def test_disc_vs_brute_force(self, tmp_path, radius):
        m = constant_slide(tmp_path, (1024, 1536))
        th = thumbnail(m)
        yy, xx = np.mgrid[:512, :512]
        fg = (yy - 300) ** 2 + (xx - 200) ** 2 < radius**2
        full = project_mask(m, fg, 0, th.source_level)
        expected = []
        for r in grid_origins(1024, 512, 256):
            for c in grid_origins(1536, 512, 256):
                cov = full[r : r + 512, c : c + 512].sum() / 512**2
                if cov >= 0.05:
                    expected.append((r, c))
        got = plan_windows(m, fg, thumb_level=th.source_level)
        assert [(w.row, w.col) for w in got] == expected

    def test_invariant_to_tile_layout(self, tmp_path, rng):
        img = rng.integers(0, 256, (1024, 1024, 3), dtype=np.uint8)
        fg = rng.random((512, 512)) < 0.03
        plans = []
        for tile in (128, 256, 512):
            m = write_slide(tmp_path / f"t{tile}", "t", [img, img[::4, ::4].copy()], tile_size=tile)
            plans.append(plan_windows(m, fg))
        assert plans[0] == plans[1] == plans[2]


class TestPatches:
    @pytest.fixture
    def lesion_slide(self, tmp_path, rng):
        img = rng.integers(0, 256, (1024, 1024, 3), dtype=np.uint8)
        lesion = np.zeros((1024, 1024), bool)
        lesion[300:600, 350:700] = True
        m = write_slide(tmp_path / "l", "l", [img, img[::4, ::4].copy()], tile_size=256)
        return m, img, lesion

    def test_unaugmented_crops_exact(self, lesion_slide):
        m, img, lesion = lesion_slide
        for p in extract_patches(m, lesion, 5, AugmentSpec.none(), seed=3):
            w = p.window
            np.testing.assert_array_equal(p.image, img[w.row : w.row + 512, w.col : w.col + 512])
            np.testing.assert_array_equal(p.mask, lesion[w.row : w.row + 512, w.col : w.col + 512])
            assert p.label == "positive"

    def test_flip_consistency(self, lesion_slide):
        m, img, lesion = lesion_slide
        spec = AugmentSpec(flips=True, rot90=True, scale=(1, 1), aspect=(1, 1), contrast=0.0, noise_sigma=0.0)
        for p in extract_patches(m, lesion, 8, spec, seed=5):
            w = p.window
            crop = img[w.row : w.row + 512, w.col : w.col + 512]
            cmask = lesion[w.row : w.row + 512, w.col : w.col + 512]
            found = False
            for k in range(4):
                for flip in (False, True):
                    for vflip in (False, True):
                        a, b = crop, cmask
                        if flip:
                            a, b = a[:, ::-1], b[:, ::-1]
                        if vflip:
                            a, b = a[::-1], b[::-1]
                        a, b = np.rot90(a, k), np.rot90(b, k)
                        if np.array_equal(a, p.image):
                            assert np.array_equal(b, p.mask)
                            found = True
            assert found

    def test_benign_slide(self, lesion_slide):
        m, _, _ = lesion_slide
        for p in extract_patches(m, None, 3, AugmentSpec(), seed=1, kind="negative"):
            assert not p.mask.any() and p.label == "negative"

    def test_positive_needs_lesion(self, lesion_slide):
        m, _, _ = lesion_slide
        with pytest.raises(ValidationError):
            extract_patches(m, np.zeros((1024, 1024), bool), 1)

    def test_seeded(self, lesion_slide):
        m, _, lesion = lesion_slide
        a = extract_patches(m, lesion, 3, AugmentSpec(), seed=9)
        b = extract_patches(m, lesion, 3, AugmentSpec(), seed=9)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()


class TestStitch:
    def test_single(self, rng):
        seg = rng.random((4, 4))
        heat = stitch_heatmap([(Window(0, 2, 3, (4, 4)), seg)], (10, 10))
        np.testing.assert_array_equal(heat[2:6, 3:7], seg)
        heat[2:6, 3:7] = 0
        assert not heat.any()

    def test_half_overlap(self):
        heat = stitch_heatmap(
            [(Window(0, 0, 0, (4, 4)), np.full((4, 4), 0.2)), (Window(0, 0, 2, (4, 4)), np.full((4, 4), 0.8))], (4, 6)
        )
        np.testing.assert_allclose(heat[:, 2:4], 0.5, rtol=0, atol=1e-15)
        assert (heat[:, :2] == 0.2).all() and (heat[:, 4:] == 0.8).all()

    def test_empty(self):
        assert not stitch_heatmap([], (5, 5)).any()

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            stitch_heatmap([(Window(0, 0, 0, (4, 4)), np.zeros((3, 4)))], (8, 8))
