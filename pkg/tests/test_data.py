import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boicr.data import (
    DatasetFormatError,
    SceneSpec,
    class_prototypes,
    dumps_dataset,
    dumps_detections,
    generate,
    load_dataset,
    loads_dataset,
    loads_detections,
    overlap_fraction,
    part_box,
    proposal_features,
    prototype_components,
    save_dataset,
)
from boicr.geometry import Box, Detection

SMALL = SceneSpec(num_classes=3, images_train=6, images_test=4, feature_dim=16)


def test_full_box_feature_is_the_prototype():
    spec = SceneSpec(num_classes=4, feature_noise_sigma=0.0)
    comps = prototype_components(spec)
    obj = np.array([[10.0, 20.0, 50.0, 70.0]])
    for c in range(4):
        feat = proposal_features(obj, obj, [c], comps, spec.part_signal_gain, spec.part_fraction, 0.0)
        np.testing.assert_allclose(feat[0], class_prototypes(spec)[c], atol=1e-12)


def test_parts_outscore_whole_objects():
    spec = SceneSpec()
    comps = prototype_components(spec)
    protos = class_prototypes(spec)
    _, test = generate(spec)
    for s in test:
        objects = np.array([b.as_tuple() for _, b in s.gt])
        classes = [c - 1 for c, _ in s.gt]
        for k, c in enumerate(classes):
            boxes = np.array([part_box(objects[k], spec.part_fraction), objects[k]])
            alone = proposal_features(boxes, objects[k:k + 1], [c], comps, spec.part_signal_gain,
                                      spec.part_fraction, 0.0)
            assert alone[0] @ protos[c] > alone[1] @ protos[c]


def test_per_object_gain():
    spec = SceneSpec(num_classes=2, feature_noise_sigma=0.0)
    comps = prototype_components(spec)
    objects = np.array([[0.0, 0.0, 20.0, 20.0], [50.0, 50.0, 90.0, 90.0]])
    parts = np.array([part_box(o, spec.part_fraction) for o in objects])
    scalar = proposal_features(parts, objects, [0, 1], comps, 1.0, spec.part_fraction, 0.0)
    varied = proposal_features(parts, objects, [0, 1], comps, np.array([1.0, 3.0]), spec.part_fraction, 0.0)
    np.testing.assert_allclose(varied[0], scalar[0], atol=1e-12)
    np.testing.assert_allclose(varied[1], 3.0 * scalar[1], atol=1e-12)


def test_gain_spread_changes_features_not_boxes():
    flat_tr, _ = generate(SMALL)
    spread_tr, _ = generate(SceneSpec(num_classes=3, images_train=6, images_test=4, feature_dim=16,
                                      part_gain_spread=0.5))
    assert all(a.gt == b.gt and np.array_equal(a.proposals, b.proposals) for a, b in zip(flat_tr, spread_tr))
    assert any(not np.array_equal(a.features, b.features) for a, b in zip(flat_tr, spread_tr))


def test_same_seed_same_bytes():
    a_tr, a_te = generate(SMALL)
    b_tr, b_te = generate(SMALL)
    assert dumps_dataset(a_tr + a_te, 3, 16) == dumps_dataset(b_tr + b_te, 3, 16)


def test_different_seed_differs():
    a, _ = generate(SMALL)
    b, _ = generate(SceneSpec(num_classes=3, images_train=6, images_test=4, feature_dim=16, rng_seed=1))
    assert dumps_dataset(a, 3, 16) != dumps_dataset(b, 3, 16)


def test_training_images_are_usable():
    train, _ = generate(SceneSpec(images_train=100, images_test=1))
    for s in train:
        assert s.labels.sum() >= 1
        assert len(s.proposals) >= 2
        assert len(s.features) == len(s.proposals)


def test_ground_truth_not_leaked_verbatim():
    train, _ = generate(SMALL)
    hits = total = 0
    for s in train:
        props = {tuple(p) for p in s.proposals.tolist()}
        for _, b in s.gt:
            total += 1
            hits += b.as_tuple() in props
    assert hits < total


@given(st.integers(0, 2**31 - 1))
def test_overlap_fraction_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 50, size=(6, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(0, 30, size=(6, 2))], axis=1)
    frac = overlap_fraction(boxes[:3], boxes[3:])
    assert np.all(frac >= 0) and np.all(frac <= 1)


def test_overlap_fraction_values():
    p = np.array([[0.0, 0.0, 10.0, 10.0]])
    o = np.array([[5.0, 0.0, 20.0, 10.0], [0.0, 0.0, 100.0, 100.0], [50.0, 50.0, 60.0, 60.0]])
    np.testing.assert_allclose(overlap_fraction(p, o), [[0.5, 1.0, 0.0]])


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        SceneSpec(images_train=0)
    with pytest.raises(ValueError):
        SceneSpec(part_signal_gain=0.0)
    with pytest.raises(ValueError):
        SceneSpec(part_gain_spread=-0.1)


class TestFiles:
    def test_round_trip(self, tmp_path):
        train, _ = generate(SMALL)
        save_dataset(tmp_path / "d.jsonl", train, 3, 16)
        loaded, header = load_dataset(tmp_path / "d.jsonl")
        assert header["num_classes"] == 3 and header["feature_dim"] == 16
        assert len(loaded) == len(train)
        for a, b in zip(train, loaded):
            assert a.image_id == b.image_id
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.proposals, b.proposals)
            np.testing.assert_array_equal(a.features, b.features)
            assert a.gt == b.gt

    def test_empty_dataset_is_header_only(self):
        text = dumps_dataset([], 5, 32)
        assert text.count("\n") == 1
        assert json.loads(text) == {"feature_dim": 32, "format": "boicr-dataset", "num_classes": 5, "version": 1}
        assert loads_dataset(text)[0] == []

    def test_hand_written_fixture(self):
        text = (
            '{"feature_dim": 2, "format": "boicr-dataset", "num_classes": 3, "version": 1}\n'
            '{"features": [[0.5, -1], [2, 3]], "gt": [{"box": [0, 0, 4, 4], "class": 2}], '
            '"image_id": "img7", "labels": [2, 3], "proposals": [[0, 0, 4, 4], [1, 1, 2, 3]]}\n'
        )
        (s,), _ = loads_dataset(text)
        assert s.image_id == "img7"
        assert s.labels.tolist() == [0, 1, 1]
        assert s.proposals.tolist() == [[0, 0, 4, 4], [1, 1, 2, 3]]
        assert s.features.tolist() == [[0.5, -1.0], [2.0, 3.0]]
        assert s.gt == [(2, Box(0, 0, 4, 4))]

    @pytest.mark.parametrize("line, field", [
        ('{"image_id": "a", "labels": [1], "proposals": [[0, 0, 1, 1]]}', "features"),
        ('{"image_id": "a", "labels": [9], "proposals": [[0, 0, 1, 1]], "features": [[0, 0]]}', "labels"),
        ('{"image_id": "a", "labels": [1], "proposals": [[0, 0, 1]], "features": [[0, 0]]}', "proposals"),
        ('{"image_id": "a", "labels": [1], "proposals": [[0, 0, 1, 1]], "features": [[0, 0, 0]]}', "features"),
        ('{"image_id": "a", "labels": [1", ', "JSON"),
    ])
    def test_malformed_line_reports_line_and_field(self, line, field):
        good = '{"image_id": "g", "labels": [1], "proposals": [[0, 0, 1, 1]], "features": [[0, 0]]}'
        text = '{"feature_dim": 2, "format": "boicr-dataset", "num_classes": 2, "version": 1}\n' + good + "\n" + line
        with pytest.raises(DatasetFormatError, match=f"line 3: .*{field}"):
            loads_dataset(text)

    def test_wrong_header(self):
        with pytest.raises(DatasetFormatError, match="line 1"):
            loads_dataset('{"format": "other"}\n')

    def test_detections_round_trip(self):
        dets = [("a", [Detection(Box(0, 0, 1, 2), 1, 0.25)]), ("b", [])]
        text = dumps_detections(dets)
        assert loads_detections(text) == {"a": [Detection(Box(0, 0, 1, 2), 1, 0.25)]}

    def test_malformed_detection(self):
        with pytest.raises(DatasetFormatError, match="line 2"):
            loads_detections('{"image_id": "a", "class": 1, "box": [0, 0, 1, 1], "score": 1}\n{"image_id": "a"}\n')
