"""Loading, pairing, cropping and batching contracts."""

import os

import numpy as np
import pytest
from PIL import Image as PILImage

from daefuse.data import (
    Image,
    ImagePair,
    load_image,
    load_pair_dataset,
    load_video_sequence,
    make_batches,
    random_crop_pair,
    reflect_pad,
    save_image,
)
from daefuse.errors import (
    CropError,
    EmptyDatasetError,
    InvalidImageError,
    NotFoundError,
    PairingError,
    RegistrationError,
    UnsupportedFormatError,
)

from conftest import tiny_config, write_gray_png


class TestLoadImage:
    def test_white_8bit_normalizes_to_one(self, tmp_path):
        path = tmp_path / "white.png"
        write_gray_png(path, np.full((4, 4), 255))
        img = load_image(str(path))
        assert np.all(img.pixels == 1.0)

    def test_black_8bit_normalizes_to_zero(self, tmp_path):
        path = tmp_path / "black.png"
        write_gray_png(path, np.zeros((4, 4)))
        assert np.all(load_image(str(path)).pixels == 0.0)

    def test_rgb_red_uses_bt601_luma(self, tmp_path):
        path = tmp_path / "red.png"
        rgb = np.zeros((2, 2, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        PILImage.fromarray(rgb, mode="RGB").save(path)
        img = load_image(str(path))
        # hand value: 0.299*1 + 0.587*0 + 0.114*0
        assert abs(float(img.pixels[0, 0]) - 0.299) < 1e-3

    def test_16bit_scaled_by_type_max(self, tmp_path):
        path = tmp_path / "deep.png"
        arr = np.array([[0, 32768], [65535, 1000]], dtype=np.uint16)
        PILImage.fromarray(arr).save(path)
        img = load_image(str(path))
        expect = arr.astype(np.float64) / 65535.0
        assert np.allclose(img.pixels, expect, atol=1e-7)

    def test_missing_file(self, tmp_path):
        with pytest.raises(NotFoundError):
            load_image(str(tmp_path / "nope.png"))

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not a raster")
        with pytest.raises(UnsupportedFormatError):
            load_image(str(path))

    def test_roundtrip_via_save(self, tmp_path):
        rng = np.random.default_rng(0)
        img = Image((rng.integers(0, 256, (9, 7)) / 255.0).astype(np.float32), "x")
        save_image(img, str(tmp_path / "x.png"))
        back = load_image(str(tmp_path / "x.png"))
        assert np.allclose(back.pixels, img.pixels, atol=1 / 510)


class TestImageInvariants:
    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidImageError):
            Image(np.array([[0.0, 1.5]], dtype=np.float32))

    def test_rejects_negative(self):
        with pytest.raises(InvalidImageError):
            Image(np.array([[-0.1, 0.5]], dtype=np.float32))

    def test_rejects_empty(self):
        with pytest.raises(InvalidImageError):
            Image(np.zeros((0, 4), dtype=np.float32))

    def test_pair_requires_registration(self):
        a = Image(np.zeros((4, 4), dtype=np.float32))
        b = Image(np.zeros((4, 5), dtype=np.float32))
        with pytest.raises(RegistrationError):
            ImagePair(a, b)


class TestPairDataset:
    def _write(self, root, side, names, size=(6, 6)):
        os.makedirs(os.path.join(root, side), exist_ok=True)
        for n in names:
            write_gray_png(
                os.path.join(root, side, n), np.zeros(size, dtype=np.uint8)
            )

    def test_lexicographic_pairing(self, tmp_path):
        self._write(str(tmp_path), "a", ["y.png", "x.png"])
        self._write(str(tmp_path), "b", ["x.png", "y.png"])
        pairs = load_pair_dataset(str(tmp_path))
        assert [p.modality_a.source_id for p in pairs] == ["x.png", "y.png"]

    def test_unmatched_name_reported(self, tmp_path):
        self._write(str(tmp_path), "a", ["x.png"])
        self._write(str(tmp_path), "b", [])
        with pytest.raises(PairingError, match="x.png"):
            load_pair_dataset(str(tmp_path))

    def test_dimension_mismatch(self, tmp_path):
        self._write(str(tmp_path), "a", ["x.png"], size=(64, 64))
        self._write(str(tmp_path), "b", ["x.png"], size=(64, 32))
        with pytest.raises(RegistrationError):
            load_pair_dataset(str(tmp_path))

    def test_empty_dataset(self, tmp_path):
        self._write(str(tmp_path), "a", [])
        self._write(str(tmp_path), "b", [])
        with pytest.raises(EmptyDatasetError):
            load_pair_dataset(str(tmp_path))


def _random_pair(rng, h, w):
    a = Image(rng.random((h, w), dtype=np.float32))
    b = Image(rng.random((h, w), dtype=np.float32))
    return ImagePair(a, b)


class TestRandomCrop:
    def test_single_offset_returns_identity(self):
        rng = np.random.default_rng(1)
        pair = _random_pair(rng, 128, 128)
        ca, cb = random_crop_pair(pair, 128, np.random.default_rng(0))
        assert np.array_equal(ca.pixels, pair.modality_a.pixels)
        assert np.array_equal(cb.pixels, pair.modality_b.pixels)

    def test_two_offsets_share_row(self):
        rng = np.random.default_rng(2)
        pair = _random_pair(rng, 129, 128)
        for seed in range(8):
            ca, cb = random_crop_pair(pair, 128, np.random.default_rng(seed))
            rows = [
                r
                for r in (0, 1)
                if np.array_equal(ca.pixels, pair.modality_a.pixels[r : r + 128])
            ]
            assert len(rows) == 1
            assert np.array_equal(cb.pixels, pair.modality_b.pixels[rows[0] : rows[0] + 128])

    def test_seed_determinism(self):
        pair = _random_pair(np.random.default_rng(3), 256, 256)
        c1 = random_crop_pair(pair, 128, np.random.default_rng(42))
        c2 = random_crop_pair(pair, 128, np.random.default_rng(42))
        assert np.array_equal(c1[0].pixels, c2[0].pixels)
        assert np.array_equal(c1[1].pixels, c2[1].pixels)

    def test_registration_property(self):
        # For any seed, both modalities are cut at the same offset.
        base = np.add.outer(np.arange(40), np.arange(40)).astype(np.float32)
        base /= base.max()
        pair = ImagePair(Image(base), Image(1.0 - base))
        for seed in range(20):
            ca, cb = random_crop_pair(pair, 17, np.random.default_rng(seed))
            assert np.allclose(ca.pixels + cb.pixels, 1.0, atol=1e-6)

    def test_too_small_raises(self):
        pair = _random_pair(np.random.default_rng(4), 16, 16)
        with pytest.raises(CropError):
            random_crop_pair(pair, 17, np.random.default_rng(0))


class TestMakeBatches:
    def test_batch_sizes_33_over_16(self):
        rng = np.random.default_rng(5)
        pairs = [_random_pair(rng, 16, 16) for _ in range(33)]
        cfg = tiny_config(batch_size=16, crop_size=16)
        sizes = [b.batch_size for b in make_batches(pairs, cfg, np.random.default_rng(0))]
        assert sizes == [16, 16, 1]

    def test_exact_batch(self):
        rng = np.random.default_rng(6)
        pairs = [_random_pair(rng, 16, 16) for _ in range(16)]
        cfg = tiny_config(batch_size=16, crop_size=16)
        sizes = [b.batch_size for b in make_batches(pairs, cfg, np.random.default_rng(0))]
        assert sizes == [16]

    def test_shuffle_determinism(self):
        rng = np.random.default_rng(7)
        pairs = [_random_pair(rng, 20, 20) for _ in range(9)]
        cfg = tiny_config(batch_size=4, crop_size=16)
        run1 = [
            p.pixels
            for b in make_batches(pairs, cfg, np.random.default_rng(3))
            for p in b.patches_a
        ]
        run2 = [
            p.pixels
            for b in make_batches(pairs, cfg, np.random.default_rng(3))
            for p in b.patches_a
        ]
        assert all(np.array_equal(x, y) for x, y in zip(run1, run2))

    def test_epoch_coverage(self):
        # Every source id appears exactly once per epoch.
        rng = np.random.default_rng(8)
        pairs = []
        for i in range(10):
            a = Image(rng.random((16, 16), dtype=np.float32), f"s{i}")
            b = Image(rng.random((16, 16), dtype=np.float32), f"s{i}")
            pairs.append(ImagePair(a, b))
        cfg = tiny_config(batch_size=3, crop_size=16)
        seen = [
            p.source_id
            for b in make_batches(pairs, cfg, np.random.default_rng(0))
            for p in b.patches_a
        ]
        assert sorted(seen) == sorted(p.modality_a.source_id for p in pairs)

    def test_small_images_are_reflect_padded(self):
        rng = np.random.default_rng(9)
        pairs = [_random_pair(rng, 10, 10)]
        cfg = tiny_config(batch_size=1, crop_size=16)
        (batch,) = list(make_batches(pairs, cfg, np.random.default_rng(0)))
        assert batch.patches_a[0].pixels.shape == (16, 16)

    def test_empty_raises(self):
        cfg = tiny_config()
        with pytest.raises(EmptyDatasetError):
            list(make_batches([], cfg, np.random.default_rng(0)))

    def test_normalization_closure(self):
        rng = np.random.default_rng(10)
        pairs = [_random_pair(rng, 12, 12) for _ in range(3)]
        cfg = tiny_config(batch_size=2, crop_size=16)
        for batch in make_batches(pairs, cfg, np.random.default_rng(1)):
            for p in batch.patches_a + batch.patches_b:
                assert p.pixels.min() >= 0.0 and p.pixels.max() <= 1.0


class TestVideoSequence:
    def _write_frames(self, root, n, size=(8, 8), bad_frame=None):
        os.makedirs(root, exist_ok=True)
        for i in range(n):
            s = size if i != bad_frame else (size[0] + 2, size[1])
            write_gray_png(os.path.join(root, f"{i:04d}.png"), np.zeros(s))

    def test_three_frames(self, tmp_path):
        self._write_frames(str(tmp_path / "a"), 3)
        self._write_frames(str(tmp_path / "b"), 3)
        seq = load_video_sequence(str(tmp_path / "a"), str(tmp_path / "b"))
        assert len(seq) == 3

    def test_dimension_drift_names_frame(self, tmp_path):
        self._write_frames(str(tmp_path / "a"), 3, bad_frame=2)
        self._write_frames(str(tmp_path / "b"), 3)
        with pytest.raises(RegistrationError, match="frame 2"):
            load_video_sequence(str(tmp_path / "a"), str(tmp_path / "b"))

    def test_count_mismatch(self, tmp_path):
        self._write_frames(str(tmp_path / "a"), 3)
        self._write_frames(str(tmp_path / "b"), 2)
        with pytest.raises(PairingError):
            load_video_sequence(str(tmp_path / "a"), str(tmp_path / "b"))

    def test_empty(self, tmp_path):
        os.makedirs(tmp_path / "a")
        os.makedirs(tmp_path / "b")
        with pytest.raises(EmptyDatasetError):
            load_video_sequence(str(tmp_path / "a"), str(tmp_path / "b"))


def test_reflect_pad_shape_and_content():
    img = Image(np.array([[0.0, 0.25], [0.5, 1.0]], dtype=np.float32))
    padded = reflect_pad(img, 4, 4)
    assert padded.pixels.shape == (4, 4)
    assert np.array_equal(padded.pixels[:2, :2], img.pixels)
