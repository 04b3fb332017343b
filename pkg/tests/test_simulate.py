import numpy as np
import pytest
from scipy.stats import spearmanr

from artfit import simulate as sim
from artfit.fit import PoseParams
from artfit.geometry import Similarity2D, WeakPerspectiveCamera, quat_identity
from artfit.records import dumps
from artfit.select import cf_mt_score, default_transforms, bbox_center


@pytest.fixture(scope="module")
def pool(quad):
    return sim.make_pool(quad, 60, 0.25, seed=5)


def test_empty_and_clean_pools(quad):
    assert sim.make_pool(quad, 0, 0.5, seed=1) == []
    assert not any(s.corrupted for s in sim.make_pool(quad, 20, 0.0, seed=1))


def test_exact_corruption_count(quad):
    for n, rate in [(10, 0.3), (7, 0.5), (33, 1.0), (9, 0.999)]:
        assert sum(s.corrupted for s in sim.make_pool(quad, n, rate, seed=2)) == int(np.floor(rate * n))
    with pytest.raises(ValueError):
        sim.make_pool(quad, 5, 1.5, seed=0)


def test_pool_is_deterministic(quad, pool):
    again = sim.make_pool(quad, 60, 0.25, seed=5)
    assert [dumps(s.to_dict()) for s in pool] == [dumps(s.to_dict()) for s in again]
    other = sim.make_pool(quad, 60, 0.25, seed=6)
    assert dumps(pool[0].to_dict()) != dumps(other[0].to_dict())


def test_truth_keypoints_are_projections(quad, pool):
    for s in pool:
        assert np.array_equal(s.keypoints, s.params.keypoints2d(quad))
        x0, y0, w, h = s.bbox
        assert np.all(s.keypoints >= [x0 - 1e-9, y0 - 1e-9]) and np.all(s.keypoints <= [x0 + w + 1e-9, y0 + h + 1e-9])


def test_scene_sampling_bounds(quad, pool):
    for s in pool:
        art = s.params.articulation
        assert np.array_equal(art.rotations[quad.parts.root], quat_identity())
        angles = np.degrees(2 * np.arccos(np.clip(art.rotations[:, 0], -1, 1)))
        assert np.all(angles <= 25.0 + 1e-9)


def test_noise_free_detector_reproduces_truth(pool):
    prof = sim.DetectorProfile("clean", sigma=0.0, sigma_equiv=0.0)
    for s in pool:
        if s.corrupted:
            continue
        rec = sim.detect(prof, s)
        assert np.array_equal(rec.keypoints, s.keypoints)
        assert np.all(rec.conf == prof.conf_max)
        T = Similarity2D(1.25, 30.0, (5.0, 7.0))
        assert np.array_equal(sim.detect_transformed(prof, s, T), T.apply(s.keypoints))


def test_detection_is_deterministic(pool):
    prof = sim.default_profiles(3)[0]
    a, b = sim.detect(prof, pool[4]), sim.detect(prof, pool[4])
    assert dumps(a.to_dict()) == dumps(b.to_dict())


def test_localization_noise_matches_sigma(quad):
    # Monte-Carlo over many detector seeds on one scene with unit difficulty
    cam = WeakPerspectiveCamera(100.0, [128, 128], quat_identity())
    scene = sim.scene_from_params(quad, "mc", PoseParams.rest(quad, cam))
    m = max(scene.bbox[2], scene.bbox[3])
    sigma = 0.03
    errs = np.array([sim.detect(sim.DetectorProfile("p", sigma=sigma, seed=i), scene).keypoints - scene.keypoints
                     for i in range(10000)])
    rms = np.sqrt(np.mean(errs**2, axis=(0, 2))) / m
    assert np.all(np.abs(rms - sigma) < 0.05 * sigma)


def test_confidence_is_monotone_in_error(pool):
    prof = sim.DetectorProfile("p", sigma=0.05)
    errs, confs = [], []
    for s in pool:
        if s.corrupted:
            continue
        rec = sim.detect(prof, s)
        errs += list(np.linalg.norm(rec.keypoints - s.keypoints, axis=1) / max(s.bbox[2:]))
        confs += list(rec.conf)
    assert spearmanr(errs, confs)[0] == pytest.approx(-1.0)
    assert 0.0 <= min(confs) and max(confs) <= 1.0


def test_identity_transform_matches_plain_detection_statistics(quad):
    cam = WeakPerspectiveCamera(100.0, [128, 128], quat_identity())
    scene = sim.scene_from_params(quad, "id", PoseParams.rest(quad, cam))
    I = Similarity2D()
    a = np.array([sim.detect(sim.DetectorProfile("p", sigma=0.02, sigma_equiv=0.0, seed=i), scene).keypoints
                  for i in range(3000)])
    b = np.array([sim.detect_transformed(sim.DetectorProfile("p", sigma=0.02, sigma_equiv=0.0, seed=i), scene, I)
                  for i in range(3000)])
    se = 0.02 * max(scene.bbox[2:]) / np.sqrt(3000)
    assert np.allclose(a.mean(0), b.mean(0), atol=5 * np.sqrt(2) * se)
    assert np.allclose(a.std(0), b.std(0), rtol=0.1)


def test_cf_mt_grows_with_equivariance_noise(pool):
    grid = [0.0, 0.005, 0.01, 0.02, 0.04, 0.08]
    clean = [s for s in pool if not s.corrupted]
    means = []
    for se in grid:
        prof = sim.DetectorProfile("p", sigma=0.01, sigma_equiv=se)
        vals = [cf_mt_score(sim.detect(prof, s).keypoints,
                            [(T, sim.detect_transformed(prof, s, T, j))
                             for j, T in enumerate(default_transforms(bbox_center(s.bbox)))]) for s in clean]
        means.append(np.mean(vals))
    assert spearmanr(grid, means)[0] > 0.9


def test_corrupted_scenes_have_larger_error(quad):
    scenes = sim.make_pool(quad, 200, 0.3, seed=9)
    prof = sim.default_profiles(0)[0]
    err = {s.image_id: np.mean(np.linalg.norm(sim.detect(prof, s).keypoints - s.keypoints, axis=1)) for s in scenes}
    bad = np.mean([err[s.image_id] for s in scenes if s.corrupted])
    good = np.mean([err[s.image_id] for s in scenes if not s.corrupted])
    assert bad > 3 * good


def test_duplicates_share_pose_and_image(quad):
    scenes = sim.make_pool(quad, 40, 0.0, seed=3, duplicate_rate=0.2)
    dups = [s for s in scenes if s.duplicate_of]
    assert len(dups) == 8
    by_id = {s.image_id: s for s in scenes}
    for d in dups:
        src = by_id[d.duplicate_of]
        assert src.duplicate_of is None
        assert np.array_equal(src.keypoints, d.keypoints)
        diff = sim.render_image(d) - sim.render_image(src)
        inner = (sim.render_image(src) > 10) & (sim.render_image(src) < 245)
        assert len(np.unique(diff[inner])) == 1


def test_box_scores(pool):
    scores = [sim.box_detection(s).score for s in pool]
    assert all(0 <= v <= 1 for v in scores)
    assert all(sim.box_detection(s).score >= 0.94 for s in pool if not s.corrupted)


def test_profile_validation():
    with pytest.raises(ValueError):
        sim.DetectorProfile("x", sigma=-1)
    with pytest.raises(ValueError):
        sim.DetectorProfile("x", conf_max=1.5)
