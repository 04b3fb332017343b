import numpy as np
import pytest

from artfit import simulate as sim
from artfit.geometry import StructureError
from artfit.records import (
    BoxDetection,
    DetectionRecord,
    FitRecord,
    RecordError,
    SceneTruth,
    read_jsonl,
    write_jsonl,
)
from artfit.select import bbox_center, default_transforms
from artfit.template import load_template, quadruped, random_template, read_obj, save_template


def test_detection_round_trip(tmp_path, quad):
    scenes = sim.make_pool(quad, 5, 0.2, seed=1)
    prof = sim.default_profiles(0)[0]
    recs = [sim.detect_with_transforms(prof, s, default_transforms(bbox_center(s.bbox))) for s in scenes]
    write_jsonl(tmp_path / "d.jsonl", recs)
    back = read_jsonl(tmp_path / "d.jsonl", DetectionRecord.from_dict)
    for a, b in zip(recs, back):
        assert np.array_equal(a.keypoints, b.keypoints) and np.array_equal(a.conf, b.conf)
        assert [t for t, _ in a.transformed] == [t for t, _ in b.transformed]


def test_truth_and_fit_round_trip(tmp_path, quad):
    scenes = sim.make_pool(quad, 3, 0.0, seed=2)
    write_jsonl(tmp_path / "t.jsonl", scenes)
    back = read_jsonl(tmp_path / "t.jsonl", SceneTruth.from_dict)
    assert [b.image_id for b in back] == [s.image_id for s in scenes]
    assert np.array_equal(back[0].params.keypoints2d(quad), scenes[0].keypoints)
    fr = FitRecord("x", scenes[0].params, 0.5, 12, True)
    assert FitRecord.from_dict(fr.to_dict()).iterations == 12


def test_row_numbered_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    good = '{"image_id": "a", "bbox": [0, 0, 1, 1], "score": 0.5}'
    p.write_text(good + "\n\n" + good + "\n" + '{"image_id": "b", "bbox": [0, 0, 1, 1], "score": 2}' + "\n")
    with pytest.raises(RecordError, match=r"bad.jsonl:4"):
        read_jsonl(p, BoxDetection.from_dict)
    p.write_text(good + "\nnot json\n")
    with pytest.raises(RecordError, match=r":2:"):
        read_jsonl(p)
    p.write_text('{"image_id": "a", "bbox": [0, 0, 1, 1]}\n')
    with pytest.raises(RecordError, match="KeyError"):
        read_jsonl(p, BoxDetection.from_dict)


def test_detection_schema_checks():
    d = {"image_id": "a", "detector": "p", "keypoints": [[0, 0], [1, 1]], "conf": [0.5], "bbox": [0, 0, 1, 1]}
    with pytest.raises(ValueError):
        DetectionRecord.from_dict(d)
    d["conf"] = [0.5, 0.5]
    d["bbox"] = [0, 0, 0, 1]
    with pytest.raises(ValueError):
        DetectionRecord.from_dict(d)


def test_non_finite_values_are_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_jsonl(tmp_path / "x.jsonl", [{"v": float("nan")}])


def test_template_round_trip(tmp_path, rng):
    for m in (quadruped(), random_template(rng)):
        save_template(m, tmp_path / "m.obj")
        back = load_template(tmp_path / "m.obj")
        assert np.array_equal(back.vertices, m.vertices)
        assert np.array_equal(back.faces, m.faces)
        assert np.array_equal(back.regressor, m.regressor)
        assert back.parts.parents == m.parts.parents and back.kp_names == m.kp_names


def test_obj_quads_and_errors(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    V, F = read_obj(p)
    assert V.shape == (4, 3) and F.tolist() == [[0, 1, 2], [0, 2, 3]]
    p.write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(StructureError, match=":2:"):
        read_obj(p)
