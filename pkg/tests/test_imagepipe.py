import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xmatch.errors import DataError, FormatError, InputError
from xmatch.imagepipe import (
    AugmentConfig,
    DatasetStats,
    ManifestRecord,
    augment,
    channel_stats,
    denormalize,
    eval_transform,
    hflip,
    load_image,
    normalize,
    read_manifest,
    read_ppm,
    resize,
    write_manifest,
    write_ppm,
)


def test_pixel_at_mean_normalizes_to_zero():
    img = np.full((2, 2, 3), 0.3, dtype=np.float32)
    np.testing.assert_allclose(normalize(img, (0.3, 0.3, 0.3), (1, 1, 1)), 0.0, atol=1e-7)


def test_normalize_inverts():
    img = np.random.default_rng(0).random((4, 3, 3)).astype(np.float32)
    mean, std = (0.4, 0.5, 0.6), (0.2, 0.3, 0.25)
    np.testing.assert_allclose(denormalize(normalize(img, mean, std), mean, std), img, atol=1e-6)


def test_hflip_is_an_involution():
    img = np.random.default_rng(1).random((5, 4, 3))
    np.testing.assert_array_equal(hflip(hflip(img)), img)


def test_crop_origin_covers_full_pad_range():
    cfg = AugmentConfig(pad=10, hflip_prob=0.0, mean=(0, 0, 0), std=(1, 1, 1))
    img = np.ones((384, 128, 3), dtype=np.float32)
    rng = np.random.default_rng(0)
    tops, lefts = set(), set()
    for _ in range(600):
        out = augment(img, cfg, rng)
        assert out.shape == (384, 128, 3)
        # zero rows/cols reveal where the window sat inside the padded frame
        rows = np.flatnonzero(out[:, 64, 0])
        cols = np.flatnonzero(out[192, :, 0])
        tops.add(10 - rows[0] if rows[0] > 0 else 10 + (383 - rows[-1]))
        lefts.add(10 - cols[0] if cols[0] > 0 else 10 + (127 - cols[-1]))
    assert tops == set(range(21)) and lefts == set(range(21))


def test_augment_reproducible_with_same_stream():
    cfg = AugmentConfig(pad=3)
    img = np.random.default_rng(2).random((96, 32, 3)).astype(np.float32)
    a = augment(img, cfg, np.random.default_rng(9))
    b = augment(img, cfg, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_flip_probability_extremes():
    img = np.random.default_rng(3).random((6, 5, 3)).astype(np.float32)
    never = AugmentConfig(pad=0, hflip_prob=0.0, mean=(0, 0, 0), std=(1, 1, 1))
    always = AugmentConfig(pad=0, hflip_prob=1.0, mean=(0, 0, 0), std=(1, 1, 1))
    np.testing.assert_array_equal(augment(img, never, np.random.default_rng(0)), img)
    np.testing.assert_array_equal(augment(img, always, np.random.default_rng(0)), img[:, ::-1])


def test_invalid_augment_config():
    with pytest.raises(InputError):
        AugmentConfig(hflip_prob=1.5)
    with pytest.raises(InputError):
        AugmentConfig(std=(1.0, 0.0, 1.0))


def test_two_pixel_column_becomes_ramp():
    col = np.array([0.0, 1.0], dtype=np.float32).reshape(2, 1, 1).repeat(3, axis=2)
    out = resize(col, (4, 1))[:, 0, 0]
    # half-pixel bilinear weights, see tests/oracles/reference_values.py
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-7)


@given(st.floats(0, 1), st.integers(1, 40), st.integers(1, 40))
def test_constant_image_stays_constant(c, h, w):
    img = np.full((2, 2, 3), c, dtype=np.float32)
    np.testing.assert_allclose(resize(img, (h, w)), np.float32(c), atol=1e-6)


def test_resize_to_same_size_is_identity():
    img = np.random.default_rng(4).random((7, 5, 3)).astype(np.float32)
    np.testing.assert_array_equal(resize(img, (7, 5)), img)


def test_resize_rejects_empty():
    with pytest.raises(InputError):
        resize(np.zeros((0, 3, 3)), (4, 4))


def test_ppm_round_trip_and_plain_format(tmp_path):
    img = np.random.default_rng(5).random((6, 4, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    np.testing.assert_allclose(back, np.rint(img * 255) / 255, atol=1e-6)
    (tmp_path / "b.ppm").write_text("P3\n# comment\n2 1\n255\n255 0 0  0 0 255\n")
    np.testing.assert_array_equal(read_ppm(tmp_path / "b.ppm")[0], [[1, 0, 0], [0, 0, 1]])
    (tmp_path / "c.ppm").write_bytes(b"GIF89a")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "c.ppm")


def test_eval_path_is_deterministic(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.random.default_rng(6).random((20, 10, 3)))
    cfg = AugmentConfig()
    a = eval_transform(load_image(tmp_path / "a.ppm", (96, 32)), cfg)
    b = eval_transform(load_image(tmp_path / "a.ppm", (96, 32)), cfg)
    assert a.shape == (96, 32, 3) and a.tobytes() == b.tobytes()


def test_channel_stats():
    imgs = [np.zeros((2, 2, 3)), np.ones((2, 2, 3))]
    mean, std = channel_stats(imgs)
    np.testing.assert_allclose(mean, [0.5] * 3)
    np.testing.assert_allclose(std, [0.5] * 3)
    with pytest.raises(DataError):
        channel_stats([])


def test_manifest_and_stats_round_trip(tmp_path):
    recs = [ManifestRecord(1, "images/a.ppm", "a man in red", "train"), ManifestRecord(2, "b.ppm", "x", "test")]
    write_manifest(tmp_path / "m.tsv", recs)
    assert read_manifest(tmp_path / "m.tsv") == recs
    (tmp_path / "bad.tsv").write_text("1\tonly-two\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.tsv")
    stats = DatasetStats([0.1, 0.2, 0.3], [0.4, 0.5, 0.6])
    stats.save(tmp_path / "s.json")
    assert DatasetStats.load(tmp_path / "s.json") == stats
