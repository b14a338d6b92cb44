import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from forada.config import ConfigError, DataConfig
from forada.dataprep import (RegionError, ShapeError, assemble_prompt, binarize_mask, decode_prompt_class,
                             encode_prompt_class, load_manifest, make_boundary_patch_mask, make_boundary_target,
                             make_patch_labels, partition_regions, partition_regions_grid, prepare_dataset,
                             region_forgery_scores)
from forada.dataprep.manifest import FaceSample, ManifestError, read_manifest, write_manifest
from forada.dataprep.prepare import BoundaryTarget
from forada.dataprep.regions import NUM_PROMPT_CLASSES, REGION_NAMES, forged_regions, template_landmarks
from forada.dataprep.synth import write_synthetic_dataset

from . import oracles


# ------------------------------------------------------------------ masks

def test_binarize_threshold_and_idempotence():
    raw = np.array([[0, 126, 127], [128, 200, 255]], np.uint8)
    m = binarize_mask(raw, 127)
    assert m.tolist() == [[0, 0, 1], [1, 1, 1]]
    assert np.array_equal(binarize_mask(m), m)


def test_binarize_rejects_non_2d():
    with pytest.raises(ShapeError):
        binarize_mask(np.zeros((4, 4, 3)))


def test_boundary_target_edge_cases():
    assert np.all(make_boundary_target(np.zeros((16, 16), np.uint8)) == 0)
    assert np.all(make_boundary_target(np.ones((16, 16), np.uint8)) == 0)
    with pytest.raises(ConfigError):
        make_boundary_target(np.zeros((8, 8), np.uint8), blur_kernel=4)


def test_boundary_target_is_zero_away_from_edges():
    m = np.zeros((32, 32), np.uint8)
    m[8:24, 8:24] = 1
    b = make_boundary_target(m, 5, 1.0)
    assert b[16, 16] == 0 and b[0, 0] == 0
    assert b[8, 16] > 0 and b.max() <= 1.0


def test_boundary_target_matches_direct_convolution():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = (rng.random((12, 12)) > 0.5).astype(np.uint8)
        blur = oracles.direct_blur(m, 5, 1.0)
        np.testing.assert_allclose(make_boundary_target(m), 4 * blur * (1 - blur), atol=1e-6)


def test_patch_labels_ten_percent_boundary():
    m = np.zeros((16, 16), np.uint8)
    m.flat[:25] = 1
    assert make_patch_labels(m, 16, 0.10)[0, 0] == 0
    m.flat[25] = 1
    assert make_patch_labels(m, 16, 0.10)[0, 0] == 1


def test_patch_mask_marks_boundary_patches():
    m = np.zeros((32, 32), np.uint8)
    m[:, 16:] = 1
    pm = make_boundary_patch_mask(make_boundary_target(m), 8)
    assert pm[:, 1].all() and pm[:, 2].all()
    assert not pm[:, 0].any() and not pm[:, 3].any()


def test_patch_shape_error():
    with pytest.raises(ShapeError):
        make_patch_labels(np.zeros((10, 10), np.uint8), 4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (16, 16), elements=st.integers(0, 1)))
def test_boundary_target_range_property(mask):
    b = make_boundary_target(mask)
    assert b.min() >= 0 and b.max() <= 1.0


# ---------------------------------------------------------------- regions

def test_region_scores_example():
    regions = np.zeros((5, 10, 10), np.uint8)
    regions[0, :, :] = 1
    real = np.zeros((10, 10, 3), np.uint8)
    fake = real.copy()
    fake.reshape(-1, 3)[:30] = 25
    scores = region_forgery_scores(real, fake, regions, 20)
    assert scores[0] == pytest.approx(0.30)
    assert forged_regions(scores, 0.15) == {"eyes"}


def test_identical_images_score_zero():
    img = np.full((8, 8, 3), 90, np.uint8)
    regions = partition_regions_grid((8, 8))
    assert np.all(region_forgery_scores(img, img, regions) == 0)


def test_beta_boundary_inclusive():
    regions = np.ones((5, 1, 1), np.uint8)
    real = np.zeros((1, 1, 3), np.uint8)
    fake = np.array([[[12, 16, 0]]], np.uint8)  # distance exactly 20
    assert region_forgery_scores(real, fake, regions, 20.0)[0] == 1.0


def test_partition_regions_disjoint_and_covering_landmarks():
    side = 64
    lm = template_landmarks(side)
    regions = partition_regions(lm, (side, side))
    assert regions.shape == (5, side, side)
    assert regions.sum(axis=0).max() == 1
    assert all(r.sum() > 0 for r in regions)
    eyes, mouth = regions[0], regions[2]
    for x, y in np.round(lm[36:48]).astype(int):
        assert eyes[y, x]
    for x, y in np.round(lm[48:60]).astype(int):
        assert mouth[y, x]


def test_partition_regions_missing_landmarks():
    with pytest.raises(RegionError, match="grid"):
        partition_regions(None, (32, 32))


def test_prompt_taxonomy():
    texts = {assemble_prompt(decode_prompt_class(c))[1] for c in range(NUM_PROMPT_CLASSES)}
    assert len(texts) == 32
    assert assemble_prompt(frozenset()) == (0, "real")
    cls, text = assemble_prompt({"mouth", "eyes"})
    assert text == "the fake regions are eyes, mouth"
    assert decode_prompt_class(cls) == {"eyes", "mouth"}
    with pytest.raises(ValueError):
        decode_prompt_class(32)


@given(st.sets(st.sampled_from(REGION_NAMES)))
def test_prompt_round_trip(subset):
    assert decode_prompt_class(encode_prompt_class(subset)) == subset


# --------------------------------------------------------------- manifest

def test_manifest_round_trip_and_shuffle(tmp_path):
    samples = [FaceSample(f"img{i}.png", "fake" if i % 2 else "real", video_id=f"v{i}",
                          landmarks=np.arange(4.0).reshape(2, 2)) for i in range(6)]
    path = write_manifest(samples, tmp_path / "m.jsonl")
    back = list(read_manifest(path, check_files=False))
    assert [s.image for s in back] == [s.image for s in samples]
    assert np.array_equal(back[1].landmarks, samples[1].landmarks)
    a = [s.image for s in read_manifest(path, shuffle_seed=7, check_files=False)]
    b = [s.image for s in read_manifest(path, shuffle_seed=7, check_files=False)]
    assert a == b and sorted(a) == sorted(s.image for s in samples)


def test_manifest_missing_file_reports_record(tmp_path):
    path = write_manifest([FaceSample("nope.png", "real")], tmp_path / "m.jsonl")
    with pytest.raises(ManifestError) as exc:
        list(read_manifest(path))
    assert exc.value.index == 0


def test_real_sample_with_mask_rejected():
    with pytest.raises(ValueError):
        FaceSample("a.png", "real", mask="m.png")


# ---------------------------------------------------------- synth/prepare

def test_synth_same_seed_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    write_synthetic_dataset(a, 3, seed=5, side=48)
    write_synthetic_dataset(b, 3, seed=5, side=48)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_synth_zero_pairs(tmp_path):
    write_synthetic_dataset(tmp_path, 0, seed=0)
    assert not any((tmp_path / "real").rglob("*.png"))


def test_prepare_counts_sidecars_and_forged_sets(synth_raw, prepared):
    samples = load_manifest(prepared)
    assert len(samples) == 24
    meta = json.loads((synth_raw / "synth_meta.json").read_text())["forged"]
    for s in samples:
        target = BoundaryTarget.load(s.path(s.boundary_target))
        report = json.loads(s.path(s.region_report).read_text())
        if s.is_fake:
            assert report["forged_set"] == meta[s.video_id]
            assert target.mask_binary.any() and target.boundary_map.max() > 0
        else:
            assert report["prompt_class"] == 0 and not target.mask_binary.any()


def test_prepare_is_idempotent(synth_raw, tmp_path):
    cfg = DataConfig()
    a, _ = prepare_dataset(synth_raw, tmp_path / "a", cfg, 32, 8)
    b, _ = prepare_dataset(synth_raw, tmp_path / "b", cfg, 32, 8)
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in fa:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert a.read_text() == b.read_text()


def test_prepare_empty_dir(tmp_path):
    manifest, problems = prepare_dataset(tmp_path / "raw", tmp_path / "out", DataConfig(), 32, 8)
    assert load_manifest(manifest) == [] and problems == []


def test_prepare_skips_fake_without_mask_or_pair(synth_raw, tmp_path):
    import shutil

    raw = tmp_path / "raw"
    shutil.copytree(synth_raw, raw)
    shutil.rmtree(raw / "masks")
    (raw / "pairs.json").write_text("{}")
    manifest, problems = prepare_dataset(raw, tmp_path / "out", DataConfig(), 32, 8)
    assert len(problems) == 12
    assert all(not s.is_fake for s in load_manifest(manifest))
    with pytest.raises(ValueError):
        prepare_dataset(raw, tmp_path / "strict", DataConfig(), 32, 8, strict=True)


def test_prepare_recovers_mask_from_pair(synth_raw, tmp_path):
    import shutil

    raw = tmp_path / "raw"
    shutil.copytree(synth_raw, raw)
    shutil.rmtree(raw / "masks")
    manifest, problems = prepare_dataset(raw, tmp_path / "out", DataConfig(), 32, 8)
    assert problems == []
    meta = json.loads((raw / "synth_meta.json").read_text())["forged"]
    for s in load_manifest(manifest):
        if s.is_fake:
            assert json.loads(s.path(s.region_report).read_text())["forged_set"] == meta[s.video_id]
