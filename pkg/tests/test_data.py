import hashlib

import numpy as np
import pytest

from lcanet import pnm
from lcanet.data import (AugmentConfig, Sample, augment, batches, choose_crop, contrast, gen_synthetic,
                         load_dataset, load_sample, read_manifest, read_stats, subtract_mean, synth_sample)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_layout(small_dataset):
    ids = read_manifest(small_dataset)
    assert ids == [f"{i:05d}" for i in range(6)]
    for i in ids:
        assert (small_dataset / "images" / f"{i}.ppm").read_bytes()[:2] == b"P6"
        assert (small_dataset / "masks" / f"{i}.pgm").read_bytes()[:2] == b"P5"
    assert (small_dataset / "stats.txt").read_text().startswith("mean=")


def test_generation_is_byte_reproducible(tmp_path, small_dataset):
    again = gen_synthetic(tmp_path / "again", 6, size=64, seed=3)
    assert digest(again) == digest(small_dataset)
    other = gen_synthetic(tmp_path / "other", 6, size=64, seed=4)
    assert digest(other) != digest(small_dataset)


def test_sample_depends_only_on_seed_and_index():
    a = synth_sample(9, 17, 32)
    b = synth_sample(9, 17, 32)
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_generated_samples_meet_contract(small_dataset):
    samples = load_dataset(small_dataset)
    means = []
    for s in samples:
        s.check()
        assert set(np.unique(s.mask)) == {0.0, 1.0}
        img = s.image
        fg, bg = img[:, s.mask[0] > 0.5], img[:, s.mask[0] < 0.5]
        assert np.abs(fg.mean(axis=1) - bg.mean(axis=1)).max() >= 0.2
        means.append(img.astype(np.float64).mean(axis=(1, 2)))
    np.testing.assert_allclose(read_stats(small_dataset), np.mean(means, axis=0), rtol=1e-7)


def test_sample_check_rejects_degenerate_masks():
    mask = np.zeros((1, 16, 16), np.float32)
    mask[0, :5, :5] = 1
    with pytest.raises(ValueError):
        Sample(np.zeros((3, 16, 16)), mask, "x").check()


def test_bad_size_rejected():
    with pytest.raises(ValueError):
        synth_sample(0, 0, 48)


def test_load_sample_round_trip(tmp_path, rng):
    image = rng.integers(0, 256, (3, 8, 8)) / 255.0
    mask = (rng.random((8, 8)) > 0.5).astype(float)
    pnm.write(tmp_path / "a.ppm", image)
    pnm.write(tmp_path / "a.pgm", mask)
    s = load_sample(tmp_path / "a.ppm", tmp_path / "a.pgm")
    assert s.id == "a"
    np.testing.assert_array_equal(np.round(s.image * 255), np.round(image * 255))
    np.testing.assert_array_equal(s.mask[0], mask)


def test_load_sample_errors(tmp_path):
    pnm.write(tmp_path / "a.ppm", np.zeros((3, 4, 4)))
    (tmp_path / "t.pgm").write_bytes(pnm.encode(np.zeros((4, 4)))[:-3])
    with pytest.raises(pnm.PnmError, match="offset"):
        load_sample(tmp_path / "a.ppm", tmp_path / "t.pgm")
    pnm.write(tmp_path / "s.pgm", np.zeros((4, 5)))
    with pytest.raises(ValueError):
        load_sample(tmp_path / "a.ppm", tmp_path / "s.pgm")
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nowhere")


def test_stats_file_validation(tmp_path):
    (tmp_path / "stats.txt").write_text("mean=0.1,0.2\n")
    with pytest.raises(ValueError):
        read_stats(tmp_path)


# --- augmentation ------------------------------------------------------------------------

@pytest.fixture
def sample(small_dataset):
    return load_dataset(small_dataset)[0]


def test_forced_flip_twice_is_identity(sample):
    cfg = AugmentConfig(flip_prob=1.0, scale_range=(1.0, 1.0))
    once = augment(sample, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(once.image, sample.image[:, :, ::-1])
    twice = augment(once, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(twice.image, sample.image)
    np.testing.assert_array_equal(twice.mask, sample.mask)


def test_identity_settings_only_subtract_mean(sample):
    cfg = AugmentConfig(flip_prob=0.0, scale_range=(1.0, 1.0), crop_to=(64, 64), mean=(0.5, 0.4, 0.3))
    out = augment(sample, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out.image, subtract_mean(sample.image, (0.5, 0.4, 0.3)))
    np.testing.assert_array_equal(out.mask, sample.mask)


def test_retention_over_many_draws(small_dataset):
    samples = load_dataset(small_dataset)
    cfg = AugmentConfig(crop_to=(64, 64))
    rng = np.random.default_rng(2024)
    worst = 1.0
    for i in range(1000):
        s = samples[i % len(samples)]
        out = augment(s, cfg, rng)
        assert out.image.shape == (3, 64, 64) and out.mask.shape == (1, 64, 64)
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        worst = min(worst, out.mask.sum() / s.mask.sum())
    # shrinking pads instead of cropping (everything kept, at least 0.8^2 of the
    # count); enlarging multiplies the count by s^2 >= 1 before the crop keeps half
    assert worst >= 0.5


def test_choose_crop_keeps_half_of_resized_mask(rng):
    for _ in range(200):
        mask = np.zeros((80, 80), np.float32)
        y, x = rng.integers(0, 70, 2)
        mask[y:y + 10, x:x + 10] = 1
        oy, ox = choose_crop(mask, 64, 64, rng)
        assert mask[oy:oy + 64, ox:ox + 64].sum() >= 0.5 * mask.sum()


def test_choose_crop_fallback_maximizes_retention():
    mask = np.zeros((10, 10), np.float32)
    mask[0, 0] = mask[9, 9] = mask[9, 8] = 1
    never = type("R", (), {"integers": lambda self, lo, hi: 0})()
    assert choose_crop(mask, 3, 3, never, min_retention=0.9) == (7, 7)


def test_padding_uses_mean_colour(sample):
    cfg = AugmentConfig(flip_prob=0.0, scale_range=(0.5, 0.5), crop_to=(64, 64), mean=(0.2, 0.4, 0.6))
    out = augment(sample, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(out.image[:, 0, 0], 0.0, atol=1e-6)
    assert not out.mask[0, 0].any()


def test_contrast_helper():
    img = np.zeros((3, 4, 4))
    img[1, :2] = 1
    mask = np.zeros((1, 4, 4))
    mask[0, :2] = 1
    np.testing.assert_array_equal(contrast(img, mask), [0, 1, 0])


@pytest.mark.parametrize("bad", [dict(scale_range=(1.2, 0.8)), dict(flip_prob=2.0), dict(mean=(1, 2)),
                                 dict(crop_to=(0, 4))])
def test_augment_config_validation(bad):
    with pytest.raises(ValueError):
        AugmentConfig(**bad).validate()


# --- batching -----------------------------------------------------------------------------

def take(stream, n):
    return [next(stream) for _ in range(n)]


def test_batches_reproducible(small_dataset):
    samples = load_dataset(small_dataset)
    cfg = AugmentConfig(crop_to=(64, 64), mean=(0.5, 0.5, 0.5))
    a = take(batches(samples, 4, np.random.default_rng(5), cfg), 4)
    b = take(batches(samples, 4, np.random.default_rng(5), cfg), 4)
    for (ia, ma), (ib, mb) in zip(a, b):
        assert ia.tobytes() == ib.tobytes() and ma.tobytes() == mb.tobytes()
    assert a[0][0].shape == (4, 3, 64, 64) and a[0][1].shape == (4, 1, 64, 64)


def test_each_epoch_visits_every_sample(small_dataset):
    samples = load_dataset(small_dataset)
    for i, s in enumerate(samples):
        s.image = np.full_like(s.image, i)
    seen = np.concatenate([imgs[:, 0, 0, 0] for imgs, _ in take(batches(samples, 3, np.random.default_rng(0)), 4)])
    assert sorted(seen[:6]) == list(range(6)) and sorted(seen[6:]) == list(range(6))
    with pytest.raises(ValueError):
        next(batches([], 2, np.random.default_rng(0)))
