from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdssl.data.augment import AugmentationConfig, augment_pair
from xdssl.data.phantom import PhantomConfig, generate_phantom, high_frequency_energy
from xdssl.data.preprocess import pad_and_resize, pad_to_square
from xdssl.data.records import FrameRecord, Manifest, video_frames
from xdssl.data.split import apportion, patient_split
from xdssl.data.audit import audited, read_png
from xdssl.errors import ConfigError, DataError, InvalidInputError


def _manifest(n_patients: int, videos: int = 1, frames: int = 3) -> Manifest:
    recs = []
    for p in range(n_patients):
        for v in range(videos):
            for f in range(frames):
                recs.append(FrameRecord(f"p{p:03d}", f"p{p:03d}-v{v}", f, "source", f"/x/{p}/{v}/{f}.png"))
    return Manifest(recs)


# ---------------------------------------------------------------- pad/resize


def _pad_oracle(h: int, w: int) -> tuple[int, int, int]:
    """Pixel-coordinate oracle: side length and top/left offsets of centred content."""
    side = max(h, w)
    return side, (side - h) // 2, (side - w) // 2


def test_pad_and_resize_identity():
    img = np.random.default_rng(0).random((224, 224)).astype(np.float32)
    np.testing.assert_array_equal(pad_and_resize(img, 224), img)


@pytest.mark.parametrize("shape,rows,cols", [((100, 200), 50, 0), ((224, 112), 0, 56)])
def test_pad_geometry(shape, rows, cols):
    h, w = shape
    img = np.ones(shape, dtype=np.float32)
    padded = pad_to_square(img)
    side, top, left = _pad_oracle(h, w)
    assert padded.shape == (side, side)
    assert (top, left) == (rows, cols)
    for y in range(side):
        for x in range(side):
            inside = top <= y < top + h and left <= x < left + w
            assert padded[y, x] == (1.0 if inside else 0.0)
    out = pad_and_resize(img, 224)
    assert out.shape == (224, 224)
    if rows:
        # zero bands scale by 224/200 on both sides
        assert np.all(out[:50] == 0) and np.all(out[-50:] == 0)
        np.testing.assert_allclose(out[60:164], 1.0, atol=1e-6)
    else:
        assert np.all(out[:, :56] == 0) and np.all(out[:, -56:] == 0)
        np.testing.assert_allclose(out[:, 58:166], 1.0, atol=1e-6)


def test_pad_and_resize_rejects_empty():
    with pytest.raises(InvalidInputError):
        pad_and_resize(np.zeros((0, 5)), 64)


# ---------------------------------------------------------------- split


def test_split_paper_counts():
    m = patient_split(_manifest(109), {"train": 0.68, "val": 0.16, "test": 0.16}, seed=3)
    counts = {s: sum(1 for v in m.split_assignment.values() if v == s) for s in ("train", "val", "test")}
    assert counts == {"train": 74, "val": 17, "test": 18}


def test_split_single_patient():
    m = patient_split(_manifest(1, frames=4), {"train": 1.0}, seed=0)
    assert {r.split for r in m.records} == {"train"}


def test_split_deterministic_and_disjoint():
    base = _manifest(30, videos=2)
    a = patient_split(base, {"train": 0.6, "val": 0.2, "test": 0.2}, seed=11)
    b = patient_split(base, {"train": 0.6, "val": 0.2, "test": 0.2}, seed=11)
    assert a.split_assignment == b.split_assignment
    by_split = {}
    for r in a.records:
        by_split.setdefault(r.split, set()).add(r.patient_id)
    names = list(by_split)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            assert not by_split[names[i]] & by_split[names[j]]
    for frames in video_frames(a.records).values():
        assert len({f.split for f in frames}) == 1


def test_split_errors():
    with pytest.raises(ConfigError):
        patient_split(_manifest(2), {"train": 0.4, "val": 0.3, "test": 0.3}, seed=0)
    with pytest.raises(ConfigError):
        patient_split(_manifest(5), {"train": 0.5, "val": 0.4}, seed=0)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(3, 200),
    fr=st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3),
)
def test_apportion_within_one_patient(n, fr):
    total = sum(fr)
    fractions = dict(zip(("train", "val", "test"), (f / total for f in fr)))
    counts = apportion(n, fractions)
    assert sum(counts.values()) == n
    for k, c in counts.items():
        assert abs(c - n * fractions[k]) <= 1


def test_manifest_roundtrip_and_invariants(tmp_path):
    m = patient_split(_manifest(5), {"train": 0.6, "val": 0.2, "test": 0.2}, seed=0)
    path = tmp_path / "m.json"
    m.save(path)
    raw = json.loads(path.read_text())
    assert set(raw[0]) == {"patient_id", "video_id", "frame_index", "domain", "image_path", "mask_path", "split"}
    assert Manifest.load(path).records == m.records
    with pytest.raises(DataError):
        Manifest([FrameRecord("a", "v", 0, "source", "x"), FrameRecord("b", "v", 1, "source", "y")])
    with pytest.raises(DataError):
        Manifest([FrameRecord("a", "v", 0, "source", "x"), FrameRecord("a", "v", 0, "source", "y")])


def test_frame_ordering_preserved():
    recs = _manifest(2, frames=7).records
    shuffled = [recs[i] for i in np.random.default_rng(0).permutation(len(recs))]
    for vid, frames in video_frames(shuffled).items():
        ingestion = [r for r in recs if r.video_id == vid]
        assert frames == ingestion


# ---------------------------------------------------------------- augmentation


def test_degenerate_augmentation_is_identity():
    cfg = AugmentationConfig(
        output_size=32, crop_scale_min=1, crop_scale_max=1, aspect_min=1, aspect_max=1,
        flip_probability=0, jitter_probability=0,
    )
    img = np.random.default_rng(1).random((32, 32)).astype(np.float32)
    a, b = augment_pair(img, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(a.image, img)
    np.testing.assert_array_equal(b.image, img)


def test_augmentation_deterministic_and_metadata():
    cfg = AugmentationConfig(output_size=32)
    img = np.random.default_rng(1).random((32, 32)).astype(np.float32)
    rec = FrameRecord("p", "vid-7", 12, "target", "x.png")
    a1, b1 = augment_pair(img, cfg, np.random.default_rng(5), rec)
    a2, b2 = augment_pair(img, cfg, np.random.default_rng(5), rec)
    assert a1.image.tobytes() == a2.image.tobytes() and b1.image.tobytes() == b2.image.tobytes()
    for v in (a1, b1):
        assert (v.video_id, v.frame_index) == ("vid-7", 12)
        assert v.image.shape == (32, 32)


def test_augmentation_changes_views_monte_carlo():
    cfg = AugmentationConfig(output_size=32)
    img = np.random.default_rng(2).random((32, 32)).astype(np.float32)
    rng = np.random.default_rng(0)
    changed = 0
    for _ in range(100):
        a, b = augment_pair(img, cfg, rng)
        changed += int(not np.array_equal(a.image, img)) + int(not np.array_equal(b.image, img))
    assert changed / 200 > 0.99


def test_augmentation_config_validation():
    with pytest.raises(ConfigError):
        AugmentationConfig(crop_scale_min=0.8, crop_scale_max=0.5)
    with pytest.raises(ConfigError):
        AugmentationConfig(flip_probability=1.5)
    with pytest.raises(InvalidInputError):
        augment_pair(np.zeros((10, 10)), AugmentationConfig(output_size=32), np.random.default_rng(0))


# ---------------------------------------------------------------- phantom


def test_phantom_noiseless_frame_mask_alignment(tmp_path):
    cfg = PhantomConfig.for_profile(
        "A_source", n_patients=1, frames_per_video=1, speckle_variance=0.0, blur_sigma=0.0, rng_seed=4
    )
    m = generate_phantom(cfg, tmp_path)
    (rec,) = m.records
    img, mask = read_png(rec.image_path), read_png(rec.mask_path) > 0.5
    assert mask.any()
    # band pixels carry exactly the band intensity (8-bit quantised) and beat the background
    np.testing.assert_allclose(img[mask], round(cfg.band_intensity * 255) / 255, atol=1e-6)
    assert img[mask].min() > img[~mask].mean()
    assert img[~mask].max() < img[mask].min()


def test_phantom_deterministic(tmp_path):
    cfg = PhantomConfig.for_profile("B_target", n_patients=2, frames_per_video=3, rng_seed=9)
    m1 = generate_phantom(cfg, tmp_path / "a")
    m2 = generate_phantom(cfg, tmp_path / "b")
    for r1, r2 in zip(m1.records, m2.records):
        assert open(r1.image_path, "rb").read() == open(r2.image_path, "rb").read()
        if r1.mask_path:
            assert open(r1.mask_path, "rb").read() == open(r2.mask_path, "rb").read()


def test_phantom_domain_shift_spectral(tmp_path):
    kw = dict(n_patients=3, frames_per_video=4, rng_seed=21)
    ma = generate_phantom(PhantomConfig.for_profile("A_source", **kw), tmp_path / "A")
    mb = generate_phantom(PhantomConfig.for_profile("B_target", **kw), tmp_path / "B")
    diffs, hf_a, hf_b = [], [], []
    for ra, rb in zip(ma.records, mb.records):
        a, b = read_png(ra.image_path), read_png(rb.image_path)
        diffs.append(np.abs(a - b).mean())
        hf_a.append(high_frequency_energy(a))
        hf_b.append(high_frequency_energy(b))
    assert np.mean(diffs) > 0
    assert np.mean(hf_b) < np.mean(hf_a)
    assert all(b < a for a, b in zip(hf_a, hf_b))


def test_phantom_sparse_labels_and_drift(tmp_path):
    cfg = PhantomConfig.for_profile("B_target", n_patients=1, frames_per_video=6, label_every=3, rng_seed=0)
    m = generate_phantom(cfg, tmp_path)
    assert [r.mask_path is not None for r in m.records] == [True, False, False, True, False, False]
    assert {r.domain for r in m.records} == {"target"}


def test_phantom_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        generate_phantom(PhantomConfig(n_patients=1, frames_per_video=1), blocker / "sub")


def test_phantom_config_validation():
    with pytest.raises(ConfigError):
        PhantomConfig(frames_per_video=0)
    with pytest.raises(ConfigError):
        PhantomConfig(speckle_variance=-1)


def test_read_png_is_audited(tmp_path):
    m = generate_phantom(PhantomConfig(n_patients=1, frames_per_video=2, rng_seed=1), tmp_path)
    with audited() as audit:
        read_png(m.records[0].image_path)
    assert audit.unique == [str((tmp_path / "images" / m.records[0].video_id / "00000.png").resolve())]
