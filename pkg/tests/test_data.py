"""Synthetic scenes, netpbm files, augmentation and segmentation metrics."""

import os

import numpy as np
import pytest
from oracles import miou_ref

from contextnet.data import (AugmentConfig, VOID_LABEL, augment, class_color,
                             colorize_mask, compute_miou, confusion_update,
                             default_palette, downsample_labels,
                             generate_synthetic_dataset, hsv_to_rgb,
                             load_dataset, load_palette, load_pgm, load_ppm,
                             load_sample, new_confusion, render_scene,
                             rgb_to_hsv, save_dataset, save_palette, save_pgm,
                             save_ppm)
from contextnet.errors import DataError

IDENTITY_AUG = AugmentConfig(scale_range=(1.0, 1.0), flip_prob=0.0, hue=0.0,
                             saturation=(1.0, 1.0), brightness=(1.0, 1.0),
                             contrast=(1.0, 1.0))


class TestSyntheticScenes:
    def test_shapes_dtypes_ranges(self):
        samples = generate_synthetic_dataset(3, 32, 48, 5, seed=0)
        assert len(samples) == 3
        for s in samples:
            assert s.image.shape == (1, 32, 48, 3)
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.labels.shape == (32, 48)
            assert s.labels.dtype == np.int32
            present = np.unique(s.labels)
            assert present.min() >= 0 and present.max() < 5

    def test_seeded_and_per_sample_deterministic(self):
        a = generate_synthetic_dataset(4, 16, 16, 3, seed=7)
        b = generate_synthetic_dataset(2, 16, 16, 3, seed=7)
        # sample i depends on (seed, i) only, not on how many are drawn
        np.testing.assert_array_equal(a[1].image, b[1].image)
        np.testing.assert_array_equal(a[1].labels, b[1].labels)
        c = generate_synthetic_dataset(4, 16, 16, 3, seed=8)
        assert not np.array_equal(a[0].labels, c[0].labels)

    def test_scene_record_rerenders_labels_exactly(self):
        # the stored image adds sigma=0.015 sensor noise on top of the
        # rendered scene; the geometry (labels) must reproduce exactly
        for s in generate_synthetic_dataset(4, 24, 40, 4, seed=3):
            assert s.scene is not None
            img, lab = render_scene(s.scene, 24, 40)
            np.testing.assert_array_equal(lab, s.labels)
            diff = np.abs(img[None].astype(np.float32) - s.image)
            assert 0.0 < diff.max() < 0.1
            assert diff.mean() < 0.02

    def test_every_foreground_class_appears_somewhere(self):
        samples = generate_synthetic_dataset(16, 32, 32, 4, seed=1)
        seen = set()
        for s in samples:
            seen.update(np.unique(s.labels).tolist())
        assert seen == {0, 1, 2, 3}

    def test_hsv_rgb_round_trip(self):
        rng = np.random.default_rng(0)
        rgb = rng.uniform(0, 1, (13, 7, 3))
        h, s, v = rgb_to_hsv(rgb)
        back = hsv_to_rgb(h, s, v)
        assert np.max(np.abs(back - rgb)) < 1e-12

    def test_class_colors_are_distinct(self):
        colors = [class_color(k, 6) for k in range(1, 6)]
        assert len({tuple(np.round(c, 6)) for c in colors}) == 5


class TestNetpbm:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        path = str(tmp_path / "x.ppm")
        save_ppm(path, img)
        np.testing.assert_array_equal(load_ppm(path), img)

    def test_pgm_round_trip(self, tmp_path):
        lab = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path = str(tmp_path / "x.pgm")
        save_pgm(path, lab)
        np.testing.assert_array_equal(load_pgm(path), lab)

    def test_hand_assembled_file_with_comments(self, tmp_path):
        # 2x2 P6, maxval 255, pixel bytes 0..11, comment in the header
        raw = b"P6\n# a comment\n2 2\n255\n" + bytes(range(12))
        path = str(tmp_path / "hand.ppm")
        with open(path, "wb") as f:
            f.write(raw)
        img = load_ppm(path)
        expected = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
        np.testing.assert_array_equal(img, expected)

    def test_wrong_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.ppm")
        with open(path, "wb") as f:
            f.write(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(DataError, match="P6"):
            load_ppm(path)

    def test_truncated_pixels_rejected(self, tmp_path):
        path = str(tmp_path / "short.ppm")
        with open(path, "wb") as f:
            f.write(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(DataError):
            load_ppm(path)

    def test_unsupported_maxval_rejected(self, tmp_path):
        path = str(tmp_path / "deep.ppm")
        with open(path, "wb") as f:
            f.write(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(DataError):
            load_ppm(path)

    def test_load_sample_checks_sizes_and_labels(self, tmp_path):
        img = np.zeros((4, 4, 3), np.uint8)
        save_ppm(str(tmp_path / "a.ppm"), img)
        save_pgm(str(tmp_path / "a.pgm"), np.zeros((3, 4), np.uint8))
        with pytest.raises(DataError, match="differ"):
            load_sample(str(tmp_path / "a.ppm"), str(tmp_path / "a.pgm"))
        save_pgm(str(tmp_path / "b.pgm"), np.full((4, 4), 9, np.uint8))
        with pytest.raises(DataError, match="outside"):
            load_sample(str(tmp_path / "a.ppm"), str(tmp_path / "b.pgm"),
                        num_classes=4)

    def test_dataset_round_trip(self, tmp_path):
        samples = generate_synthetic_dataset(3, 16, 24, 4, seed=11)
        d = str(tmp_path / "ds")
        save_dataset(d, samples)
        loaded = load_dataset(d, num_classes=4)
        assert len(loaded) == 3
        for orig, back in zip(samples, loaded):
            np.testing.assert_array_equal(back.labels, orig.labels)
            # images pass through uint8 quantization once
            q = np.clip(np.round(orig.image * 255), 0, 255) / 255.0
            assert np.max(np.abs(back.image - q.astype(np.float32))) < 1e-7

    def test_missing_labels_reported(self, tmp_path):
        samples = generate_synthetic_dataset(1, 8, 8, 3, seed=0)
        d = str(tmp_path / "ds")
        save_dataset(d, samples)
        os.remove(os.path.join(d, "labels", os.listdir(
            os.path.join(d, "labels"))[0]))
        with pytest.raises(DataError, match="missing labels"):
            load_dataset(d)


class TestPalette:
    def test_round_trip(self, tmp_path):
        pal = default_palette(5)
        assert pal.shape == (5, 3) and pal.dtype == np.uint8
        path = str(tmp_path / "pal.txt")
        save_palette(path, pal)
        np.testing.assert_array_equal(load_palette(path), pal)

    def test_colorize_maps_classes_and_void(self):
        pal = default_palette(3)
        labels = np.array([[0, 1], [2, VOID_LABEL]], np.int32)
        rgb = colorize_mask(labels, pal)
        np.testing.assert_array_equal(rgb[0, 0], pal[0])
        np.testing.assert_array_equal(rgb[1, 0], pal[2])
        np.testing.assert_array_equal(rgb[1, 1], (0, 0, 0))

    def test_colorize_rejects_out_of_range(self):
        with pytest.raises(DataError):
            colorize_mask(np.array([[7]]), default_palette(3))


class TestAugment:
    def sample(self, seed=0):
        return generate_synthetic_dataset(1, 20, 28, 4, seed=seed)[0]

    def test_inactive_config_is_exact_identity(self):
        s = self.sample()
        out = augment(s, IDENTITY_AUG, np.random.default_rng(0))
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.labels, s.labels)

    def test_forced_flip_twice_restores(self):
        cfg = AugmentConfig(scale_range=(1.0, 1.0), flip_prob=1.0, hue=0.0,
                            saturation=(1.0, 1.0), brightness=(1.0, 1.0),
                            contrast=(1.0, 1.0))
        s = self.sample()
        once = augment(s, cfg, np.random.default_rng(0))
        twice = augment(once, cfg, np.random.default_rng(1))
        assert not np.array_equal(once.labels, s.labels) or \
            np.array_equal(s.labels, s.labels[:, ::-1])
        np.testing.assert_array_equal(twice.image, s.image)
        np.testing.assert_array_equal(twice.labels, s.labels)

    def test_output_size_and_label_validity(self):
        s = self.sample()
        rng = np.random.default_rng(5)
        for _ in range(10):
            out = augment(s, AugmentConfig(), rng)
            assert out.image.shape == s.image.shape
            assert out.labels.shape == s.labels.shape
            vals = set(np.unique(out.labels).tolist()) - {VOID_LABEL}
            assert all(0 <= v < 4 for v in vals)
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0

    def test_seeded_reproducibility(self):
        s = self.sample()
        a = augment(s, AugmentConfig(), np.random.default_rng(42))
        b = augment(s, AugmentConfig(), np.random.default_rng(42))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_input_not_modified(self):
        s = self.sample()
        img = s.image.copy()
        lab = s.labels.copy()
        augment(s, AugmentConfig(), np.random.default_rng(0))
        np.testing.assert_array_equal(s.image, img)
        np.testing.assert_array_equal(s.labels, lab)


class TestLabelDownsample:
    def test_center_offset_fixture(self):
        lab = np.arange(16, dtype=np.int32).reshape(1, 4, 4)
        out = downsample_labels(lab, 2)
        # factor 2 samples the pixel at offset 1 inside each 2x2 cell
        np.testing.assert_array_equal(out[0], [[5, 7], [13, 15]])

    def test_factor_one_is_identity(self):
        lab = np.arange(6, dtype=np.int32).reshape(1, 2, 3)
        np.testing.assert_array_equal(downsample_labels(lab, 1), lab)

    def test_void_survives(self):
        lab = np.full((1, 4, 4), VOID_LABEL, np.int32)
        assert np.all(downsample_labels(lab, 2) == VOID_LABEL)


class TestConfusionAndMiou:
    def test_update_hand_case(self):
        cm = new_confusion(3)
        pred = np.array([[0, 1], [2, 2]], np.int32)
        labels = np.array([[0, 1], [1, VOID_LABEL]], np.int32)
        confusion_update(cm, pred, labels)
        expected = np.zeros((3, 3), np.int64)
        expected[0, 0] = 1   # truth 0 predicted 0
        expected[1, 1] = 1   # truth 1 predicted 1
        expected[1, 2] = 1   # truth 1 predicted 2
        np.testing.assert_array_equal(cm, expected)

    def test_updates_accumulate(self):
        cm = new_confusion(2)
        pred = np.array([[0, 1]], np.int32)
        labels = np.array([[1, 1]], np.int32)
        confusion_update(cm, pred, labels)
        confusion_update(cm, pred, labels)
        np.testing.assert_array_equal(cm, [[0, 0], [2, 2]])

    def test_perfect_prediction(self):
        cm = np.diag([5, 3, 2]).astype(np.int64)
        ious, miou = compute_miou(cm)
        np.testing.assert_array_equal(ious, [1.0, 1.0, 1.0])
        assert miou == 1.0

    def test_absent_class_is_nan_and_excluded(self):
        cm = np.array([[4, 0, 0], [1, 3, 0], [0, 0, 0]], np.int64)
        ious, miou = compute_miou(cm)
        assert np.isnan(ious[2])
        assert abs(miou - (4 / 5 + 3 / 4) / 2) < 1e-12

    def test_matches_rational_oracle_on_random_matrices(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            c = int(rng.integers(2, 6))
            cm = rng.integers(0, 20, (c, c)).astype(np.int64)
            _, miou = compute_miou(cm)
            ref = miou_ref(cm)
            if np.isnan(ref):
                assert np.isnan(miou)
            else:
                assert abs(miou - ref) < 1e-12

    def test_all_empty_matrix(self):
        _, miou = compute_miou(new_confusion(4))
        assert np.isnan(miou)
