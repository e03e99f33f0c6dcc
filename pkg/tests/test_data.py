import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from mkisnet.data import (AugmentedDataset, ManifestDataset, Sample, adjust_brightness, augment_training_set,
                          binarize_label, decode_image, draw_gains, load_manifest, pad_to_multiple, rotate_array,
                          rotate_sample, save_png, split_records, synthetic_vessel_sample, write_manifest,
                          write_synthetic_dataset)
from mkisnet.errors import DataError, DecodeError, ManifestError, ParameterError


def make_sample(h=5, w=6, c=3, seed=0, mask=True):
    rng = np.random.default_rng(seed)
    return Sample(rng.random((h, w, c)).astype(np.float32), (rng.random((h, w)) < 0.3).astype(np.uint8),
                  rng.random((h, w)) > 0.2 if mask else None, f"s{seed}")


# samples ------------------------------------------------------------------------

def test_sample_invariants():
    with pytest.raises(DataError):
        Sample(np.zeros((4, 4, 3)), np.zeros((4, 5)))
    with pytest.raises(DataError):
        Sample(np.zeros((4, 4, 3)), np.full((4, 4), 2))
    with pytest.raises(DataError):
        Sample(np.full((4, 4, 3), 1.5), np.zeros((4, 4)))
    with pytest.raises(DataError):
        Sample(np.zeros((4, 4, 3)), np.zeros((4, 4)), np.ones((3, 3), bool))


# decoding ---------------------------------------------------------------------

def test_pgm_values(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    arr = decode_image(p)
    assert arr.shape == (2, 2, 1)
    np.testing.assert_allclose(arr.ravel(), [0.0, 1.0, 0.50196, 0.25098], atol=1e-5)


def test_grayscale_replication(tmp_path):
    p = tmp_path / "g.png"
    save_png(p, np.array([[0, 100], [200, 255]], dtype=np.uint8))
    arr = decode_image(p, in_channels=3)
    assert arr.shape == (2, 2, 3)
    assert np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2])


def test_sixteen_bit_png(tmp_path):
    p = tmp_path / "d.png"
    save_png(p, np.array([[0, 65535], [32768, 1]], dtype=np.uint16))
    np.testing.assert_allclose(decode_image(p).ravel(), [0, 1, 32768 / 65535, 1 / 65535], rtol=1e-6)


def test_rgb_png(tmp_path):
    p = tmp_path / "c.png"
    img = np.random.default_rng(0).integers(0, 256, (3, 4, 3)).astype(np.uint8)
    save_png(p, img)
    np.testing.assert_allclose(decode_image(p), img / 255.0, atol=1e-7)


def test_truncated_png(tmp_path):
    p = tmp_path / "t.png"
    save_png(p, np.random.default_rng(1).integers(0, 256, (32, 32, 3)).astype(np.uint8))
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(DecodeError):
        decode_image(p)


def test_unsupported_format(tmp_path):
    p = tmp_path / "n.png"
    p.write_bytes(b"not an image at all")
    with pytest.raises(DecodeError):
        decode_image(p)


def test_binarize_label():
    np.testing.assert_array_equal(binarize_label(np.array([[0, 255]]) / 255.0), [[0, 1]])
    assert binarize_label(np.array([[0.4]]))[0, 0] == 0
    assert binarize_label(np.ones((3, 3))).sum() == 9


# geometry ---------------------------------------------------------------------

def test_rotation_zero_is_identity():
    s = make_sample()
    r = rotate_sample(s, 0)
    np.testing.assert_array_equal(r.image, s.image)
    np.testing.assert_array_equal(r.label, s.label)
    np.testing.assert_array_equal(r.fov_mask, s.fov_mask)


def test_rotation_90_on_2x2_is_a_permutation():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(rotate_array(a, 90), np.rot90(a))
    np.testing.assert_array_equal(rotate_array(a, 90, order=0), np.rot90(a))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.sampled_from([90, 180, 270, 360, -90]), st.integers(0, 2 ** 31))
def test_right_angle_rotation_of_square_is_lossless(n, deg, seed):
    a = np.random.default_rng(seed).random((n, n, 2))
    np.testing.assert_array_equal(rotate_array(a, deg), np.rot90(a, k=(deg // 90) % 4))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 359.5), st.integers(0, 2 ** 31))
def test_labels_stay_binary_after_rotation(deg, seed):
    r = rotate_sample(make_sample(9, 11, seed=seed), deg)
    assert set(np.unique(r.label)) <= {0, 1}
    assert r.image.min() >= 0 and r.image.max() <= 1


def test_rotation_without_mask_gains_one():
    r = rotate_sample(make_sample(9, 9, mask=False), 37)
    assert r.fov_mask is not None
    assert not r.fov_mask[0, 0]  # corner leaves the canvas
    assert r.fov_mask[4, 4]


def test_brightness():
    s = Sample(np.full((2, 2, 1), 0.7, np.float32), np.zeros((2, 2)), None)
    np.testing.assert_array_equal(adjust_brightness(s, 1.0).image, s.image)
    assert np.all(adjust_brightness(s, 2.0).image == 1.0)
    s2 = Sample(np.full((2, 2, 1), 0.6, np.float32), np.zeros((2, 2)), None)
    np.testing.assert_allclose(adjust_brightness(s2, 0.5).image, 0.3, rtol=1e-6)
    with pytest.raises(ParameterError):
        adjust_brightness(s, 0)


def test_pad_drive_geometry():
    s = Sample(np.zeros((584, 565, 3), np.float32), np.zeros((584, 565)), None)
    padded, rec = pad_to_multiple(s, 4)
    assert padded.shape == (584, 568)
    assert (rec.pad_bottom, rec.pad_right) == (0, 3)
    assert not padded.fov_mask[:, 565:].any() and padded.fov_mask[:, :565].all()


def test_pad_identity_when_divisible():
    s = make_sample(8, 12)
    padded, rec = pad_to_multiple(s, 4)
    assert padded is s and rec.empty


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 13), st.integers(1, 13), st.integers(1, 8))
def test_pad_then_crop_restores_geometry(h, w, m):
    s = make_sample(h, w)
    padded, rec = pad_to_multiple(s, m)
    assert padded.shape[0] % m == 0 and padded.shape[1] % m == 0
    np.testing.assert_array_equal(rec.crop(padded.image), s.image)
    np.testing.assert_array_equal(rec.crop(padded.label), s.label)


# augmentation -----------------------------------------------------------------

class Stub:
    """Source list that counts decodes."""

    def __init__(self, n):
        self.items = [make_sample(6, 6, seed=i) for i in range(n)]
        self.reads = 0

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        self.reads += 1
        return self.items[i]


def test_default_augmentation_count_is_streaming():
    src = Stub(20)
    aug = augment_training_set(src)
    assert len(aug) == 7600
    assert src.reads == 0


def test_rotation_only_sequence():
    s = make_sample(7, 7)
    aug = augment_training_set([s], rotations=4, brightness_variants=0)
    assert len(aug) == 4
    assert [aug.describe(i) for i in range(4)] == [(0, "rot", d) for d in range(4)]
    for d in range(4):
        np.testing.assert_array_equal(aug[d].image, rotate_sample(s, d).image)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(0, 6), st.integers(0, 4))
def test_augmentation_count_formula(n, r, v):
    assert len(AugmentedDataset([make_sample(4, 4, seed=i) for i in range(n)], r, v)) == n * (r + v)


def test_gain_sequences_are_seeded():
    a = augment_training_set(Stub(3), 2, 5, rng_seed=9)
    b = augment_training_set(Stub(3), 2, 5, rng_seed=9)
    np.testing.assert_array_equal(a.gains, b.gains)
    assert np.all((a.gains >= 0.7) & (a.gains <= 1.3))
    assert not np.any((a.gains >= 0.98) & (a.gains <= 1.02))


def test_streamed_equals_materialized():
    aug = augment_training_set(Stub(2), 3, 2, rng_seed=4)
    materialized = list(aug)
    for i, s in enumerate(materialized):
        again = aug[i]
        assert again.id == s.id
        np.testing.assert_array_equal(again.image, s.image)


def test_draw_gains_rejects_dead_range():
    with pytest.raises(ParameterError):
        draw_gains(1, (0.99, 1.01))


# manifests ----------------------------------------------------------------------

def write_pairs(directory, n, with_mask=True):
    records = []
    for i in range(n):
        s = synthetic_vessel_sample(16, seed=i)
        img, lab = directory / f"{i:02d}_img.png", directory / f"{i:02d}_lab.png"
        save_png(img, (s.image * 255).astype(np.uint8))
        save_png(lab, s.label * 255)
        mask = None
        if with_mask:
            mask = directory / f"{i:02d}_mask.png"
            save_png(mask, s.fov_mask.astype(np.uint8) * 255)
        records.append((f"{i:02d}", img, lab, mask))
    return records


def test_drive_style_manifest(tmp_path):
    records = write_pairs(tmp_path, 20)
    path = write_manifest(tmp_path / "train.tsv", "DRIVE", "train", records)
    m = load_manifest(path)
    assert m.name == "DRIVE" and m.split == "train" and len(m) == 20
    ds = ManifestDataset(m)
    for i in range(20):
        s = ds[i]
        assert s.fov_mask is not None and s.image.shape == (16, 16, 3)


def test_chase_split_rule():
    train, test = split_records([f"Image_{i:02d}" for i in range(28)], 20)
    assert train[0] == "Image_00" and len(train) == 20
    assert test == [f"Image_{i:02d}" for i in range(20, 28)]


def test_missing_label_names_record(tmp_path):
    records = write_pairs(tmp_path, 2, with_mask=False)
    path = write_manifest(tmp_path / "m.tsv", "x", "test", records)
    records[1][2].unlink()
    with pytest.raises(ManifestError, match="'01'.*label") as info:
        load_manifest(path)
    assert "line 3" in str(info.value)


def test_manifest_syntax(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("# comment\ndataset=a split=train resize=32x48\n")
    m = load_manifest(p)
    assert m.resize == (32, 48) and len(m) == 0
    p.write_text("dataset=a split=dev resize=native\n")
    with pytest.raises(ManifestError, match="line 1"):
        load_manifest(p)
    p.write_text("dataset=a split=train resize=native\nonly\ttwo\n")
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(p)


def test_resize_policy(tmp_path):
    records = write_pairs(tmp_path, 1)
    path = write_manifest(tmp_path / "m.tsv", "MC", "train", records, resize=(8, 8))
    s = ManifestDataset(load_manifest(path))[0]
    assert s.shape == (8, 8) and set(np.unique(s.label)) <= {0, 1}


def test_synthetic_dataset_round_trip(tmp_path):
    path = write_synthetic_dataset(tmp_path, n=2, size=32, seed=5)
    ds = ManifestDataset(load_manifest(path))
    original = synthetic_vessel_sample(32, seed=5)
    np.testing.assert_array_equal(ds[0].label, original.label)
    np.testing.assert_array_equal(ds[0].fov_mask, original.fov_mask)
    assert np.abs(ds[0].image - original.image).max() <= 0.5 / 255 + 1e-6
    frac = original.label[original.fov_mask].mean()
    assert 0.03 < frac < 0.2


def test_image_decoded_by_pillow_matches(tmp_path):
    p = tmp_path / "b.bmp"
    img = np.random.default_rng(2).integers(0, 256, (5, 3, 3)).astype(np.uint8)
    Image.fromarray(img).save(p)
    np.testing.assert_allclose(decode_image(p), img / 255.0, atol=1e-7)
