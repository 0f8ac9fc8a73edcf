import numpy as np
import pytest

from dgkd_lab.harness.manifest import corpus_hash
from dgkd_lab.toyscene import (BACKGROUND_DEPTH, SceneSpec, _footprint,
                               generate_corpus, load_corpus, make_sample,
                               render_depth, save_corpus, synthesize_corpus)


def corpus_bytes(samples):
    return b"".join(
        s.image.tobytes() + s.gt_mask.tobytes() + s.depth.tobytes() + s.label_vec.tobytes()
        for s in samples
    )


def test_generation_bit_identical():
    spec = SceneSpec(seed=7)
    assert corpus_bytes(generate_corpus(spec, 1, "train")) == corpus_bytes(
        generate_corpus(spec, 1, "train")
    )


def test_splits_and_seeds_differ():
    a = generate_corpus(SceneSpec(seed=7), 2, "train")
    b = generate_corpus(SceneSpec(seed=7), 2, "val")
    c = generate_corpus(SceneSpec(seed=8), 2, "train")
    assert corpus_bytes(a) != corpus_bytes(b)
    assert corpus_bytes(a) != corpus_bytes(c)


def test_single_shape_forces_single_label():
    samples = generate_corpus(SceneSpec(shapes_per_image=(1, 1), seed=3), 100, "train")
    for s in samples:
        assert int(s.label_vec.sum()) == 1


def test_train_class_frequencies_meet_coverage():
    samples = generate_corpus(SceneSpec(num_classes=3, image_size=64, seed=0), 200, "train")
    counts = np.sum([s.label_vec for s in samples], axis=0)
    assert counts.shape == (3,)
    assert (counts >= 10).all()


def test_mask_label_consistency():
    spec = SceneSpec(seed=11)
    for s in generate_corpus(spec, 40, "val"):
        expected = np.zeros(spec.num_classes, dtype=np.uint8)
        for c in set(np.unique(s.gt_mask)) - {0}:
            expected[c - 1] = 1
        assert np.array_equal(s.label_vec, expected)


def test_empty_scene_all_background():
    s = make_sample(SceneSpec(shapes_per_image=(0, 0), seed=1), "train", 0)
    assert np.all(s.depth == np.float32(BACKGROUND_DEPTH))
    assert np.all(s.gt_mask == 0)
    assert np.all(s.label_vec == 0)
    assert np.all(render_depth(s) == np.float32(BACKGROUND_DEPTH))


def test_single_shape_two_valued_depth():
    s = make_sample(SceneSpec(shapes_per_image=(1, 1), seed=2), "train", 0)
    values = np.unique(s.depth)
    assert len(values) == 2
    assert values[0] == np.float32(BACKGROUND_DEPTH)
    assert values[1] > np.float32(BACKGROUND_DEPTH)


def test_overlap_contested_pixels_carry_max_depth():
    spec = SceneSpec(shapes_per_image=(4, 6), seed=5)
    saw_overlap = False
    for idx in range(10):
        s = make_sample(spec, "train", idx)
        assert np.array_equal(render_depth(s), s.depth)
        footprints = [_footprint(sh, spec.image_size) for sh in s.shapes]
        if len(footprints) >= 2:
            cover = np.sum(footprints, axis=0)
            saw_overlap = saw_overlap or bool((cover > 1).any())
        # per-pixel ownership: the covering shape with maximal depth owns the mask
        layers = np.stack(
            [np.where(fp, sh.depth, -np.inf) for fp, sh in zip(footprints, s.shapes)]
            + [np.full(s.depth.shape, BACKGROUND_DEPTH)]
        )
        owner = layers.argmax(axis=0)
        classes = np.array([sh.class_id for sh in s.shapes] + [0])
        assert np.array_equal(classes[owner], s.gt_mask)
    assert saw_overlap


def test_depth_strictly_in_front_of_background():
    for s in generate_corpus(SceneSpec(seed=9), 20, "train"):
        fg = s.gt_mask > 0
        if fg.any():
            assert s.depth[fg].min() > np.float32(BACKGROUND_DEPTH)


def test_palette_length_mismatch_rejected():
    spec = SceneSpec(num_classes=3, color_palette=((1.0, 0.0, 0.0),))
    with pytest.raises(ValueError, match="palette"):
        generate_corpus(spec, 1, "train")


def test_coverage_unreachable_fails():
    with pytest.raises(RuntimeError, match="coverage"):
        generate_corpus(SceneSpec(shapes_per_image=(0, 0), seed=1), 20, "train")


def test_spec_invariants_rejected():
    with pytest.raises(ValueError):
        SceneSpec(num_classes=1).validate()
    with pytest.raises(ValueError):
        SceneSpec(image_size=16).validate()
    with pytest.raises(ValueError):
        SceneSpec(depth_range=(0.9, 0.3)).validate()
    with pytest.raises(ValueError):
        generate_corpus(SceneSpec(), 0, "train")
    with pytest.raises(ValueError):
        generate_corpus(SceneSpec(), 1, "test")


def test_save_load_round_trip(tmp_path):
    spec = SceneSpec(seed=7)
    samples = generate_corpus(spec, 5, "train")
    save_corpus(samples, tmp_path / "train", spec, "train")
    loaded, manifest = load_corpus(tmp_path / "train")
    assert manifest["spec"] == spec.to_dict()
    assert manifest["split"] == "train"
    assert len(loaded) == 5
    for a, b in zip(samples, loaded):
        assert a.sample_id == b.sample_id
        assert np.array_equal(a.label_vec, b.label_vec)
        assert np.array_equal(a.gt_mask, b.gt_mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
        assert np.abs(a.depth - b.depth).max() <= 0.5 / 65535 + 1e-6


def test_persisted_corpus_bytes_deterministic(tmp_path):
    spec = SceneSpec(seed=7)
    hashes = []
    for name in ("a", "b"):
        synthesize_corpus(spec, tmp_path / name, 4, 2)
        hashes.append(
            (corpus_hash(tmp_path / name / "train"), corpus_hash(tmp_path / name / "val"))
        )
    assert hashes[0] == hashes[1]


def test_sample_ids_unique_across_splits(tmp_path):
    spec = SceneSpec(seed=7)
    train = generate_corpus(spec, 6, "train")
    val = generate_corpus(spec, 6, "val")
    ids = [s.sample_id for s in train] + [s.sample_id for s in val]
    assert len(set(ids)) == len(ids)
