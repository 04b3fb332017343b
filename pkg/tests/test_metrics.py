import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artfit import simulate as sim
from artfit.fit import PoseParams
from artfit.geometry import WeakPerspectiveCamera, quat_from_axis_angle, quat_normalize, quat_to_matrix
from artfit.metrics import PckCurve, auc, default_thresholds, pck, pck_curve, report, rot_err


def test_pck_examples():
    gt = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    bbox = (0, 0, 10, 20)
    assert pck(gt, gt, bbox, 0.1) == 1.0
    assert pck(gt + [4.0, 0.0], gt, bbox, 0.1) == 0.0
    far = gt.copy()
    far[2:] += 100
    assert pck(far, gt, bbox, 0.1) == 0.5
    # inclusive boundary at exactly t * max(w, h)
    assert pck(gt + [2.0, 0.0], gt, bbox, 0.1) == 1.0
    with pytest.raises(ValueError):
        pck(gt[:3], gt, bbox, 0.1)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_pck_monotone_and_translation_invariant(seed, t1, t2):
    r = np.random.default_rng(seed)
    gt = r.normal(size=(6, 2))
    pred = gt + r.normal(size=(6, 2)) * 0.1
    lo, hi = sorted((t1, t2))
    assert pck(pred, gt, (0, 0, 1, 1), lo) <= pck(pred, gt, (0, 0, 1, 1), hi)
    assert pck(pred + 5, gt + 5, (0, 0, 1, 1), lo) == pck(pred, gt, (0, 0, 1, 1), lo)


def test_auc_examples():
    t = default_thresholds()
    assert auc(PckCurve(t, np.ones(17))) == 100.0
    assert auc(PckCurve(t, np.zeros(17))) == 0.0
    assert auc(PckCurve(t, np.clip((t - 0.06) / 0.04, 0, 1))) == pytest.approx(50.0, abs=1e-9)
    with pytest.raises(ValueError):
        auc(PckCurve(np.array([0.07, 0.1]), np.array([1.0, 1.0])))


def test_curve_validation():
    with pytest.raises(ValueError):
        PckCurve(np.array([0.1, 0.06]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        PckCurve(np.array([0.06, 0.1]), np.array([0.0, 1.5]))


def test_rot_err_examples():
    I = np.eye(3)
    assert rot_err(I, I) == 0.0
    assert rot_err(I, quat_to_matrix(quat_from_axis_angle([0, 0, 1], math.pi))) == 180.0
    for axis in ([1, 0, 0], [0, 1, 0], [1, 2, 3]):
        assert rot_err(I, quat_to_matrix(quat_from_axis_angle(axis, math.pi / 2))) == pytest.approx(90.0, abs=1e-12)
    with pytest.raises(ValueError):
        rot_err(I, 2 * I)
    with pytest.raises(ValueError):
        rot_err(I, -I)


@given(st.integers(0, 2**32 - 1))
def test_rot_err_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    A, B = (quat_to_matrix(quat_normalize(r.normal(size=4))) for _ in range(2))
    assert rot_err(A, B) == pytest.approx(rot_err(B, A), abs=1e-9)
    assert 0.0 <= rot_err(A, B) <= 180.0




def test_report_matches_hand_computation(quad):
    scenes = sim.make_pool(quad, 3, 0.0, seed=8)
    shifts = [0.0, 0.05, 0.2]  # image shift as a fraction of max(w, h)
    fits = {s.image_id: PoseParams(s.params.camera.translated([sh * max(s.bbox[2:]), 0.0]),
                                   articulation=s.params.articulation) for s, sh in zip(scenes, shifts)}
    rep = report(fits, {s.image_id: s for s in scenes}, quad)
    # every keypoint of instance i is off by shifts[i]: PCK(t) = (1 + 1[t >= 0.05] + 0) / 3 on [0.06, 0.1]
    assert rep.rows[0].n_eval == 3
    assert rep.rows[0].auc == pytest.approx(200.0 / 3.0)
    assert rep.rows[0].err_r_mean_deg == 0.0
    assert rep.csv().splitlines()[0] == "category,N_eval,AUC,err_R_mean_deg"


def test_report_rotation_mean(quad):
    scenes = sim.make_pool(quad, 2, 0.0, seed=8)
    from artfit.geometry import quat_mul

    fits = {}
    for s, deg in zip(scenes, (10.0, 30.0)):
        cam = s.params.camera
        q = quat_mul(quat_from_axis_angle([1, 0, 0], math.radians(deg)), cam.quat)
        fits[s.image_id] = PoseParams(WeakPerspectiveCamera(cam.scale, cam.trans, q), articulation=s.params.articulation)
    rep = report(fits, {s.image_id: s for s in scenes}, quad)
    assert rep.rows[0].err_r_mean_deg == pytest.approx(20.0, abs=1e-9)


def test_report_perfect_and_empty(quad):
    scenes = sim.make_pool(quad, 4, 0.0, seed=2)
    truths = {s.image_id: s for s in scenes}
    rep = report({s.image_id: s.params for s in scenes}, truths, quad)
    assert rep.rows[0].auc == 100.0 and rep.rows[0].err_r_mean_deg == 0.0
    empty = report({}, {}, quad)
    assert empty.rows == () and empty.warnings
    partial = report({"zzz": scenes[0].params}, truths, quad)
    assert partial.rows == () and any("zzz" in w for w in partial.warnings)


def test_pck_curve_from_errors():
    c = pck_curve([0.0, 0.07, 1.0])
    assert c.values[0] == pytest.approx(1 / 3) and c.values[-1] == pytest.approx(2 / 3)
