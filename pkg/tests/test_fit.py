import math

import numpy as np
import pytest

from artfit.fit import (
    DegenerateConfiguration,
    FitConfig,
    KeypointObservation,
    PoseParams,
    estimate_keypoint_shape,
    fit_batch,
    fit_instance,
    fit_observation,
    grad,
    init_camera,
    loss_and_grad,
    loss_labeled,
    loss_pseudo,
    similarity_align,
)
from artfit.geometry import (
    Articulation,
    PartTree,
    StructureError,
    TemplateModel,
    WeakPerspectiveCamera,
    project,
    quat_from_axis_angle,
    quat_identity,
    quat_mul,
    quat_normalize,
)
from artfit.metrics import rot_err
from oracles import central_difference_gradient, random_fit_problem, relative_error


def obs_of(x, conf=None, pad=5.0):
    x = np.asarray(x, float)
    lo, hi = x.min(0), x.max(0)
    return KeypointObservation(x, conf, (lo[0] - pad, lo[1] - pad, hi[0] - lo[0] + 2 * pad, hi[1] - lo[1] + 2 * pad))


# ---------------------------------------------------------------- losses


def test_loss_by_hand(quad):
    cam = WeakPerspectiveCamera(10.0, [0, 0], quat_identity())
    p = PoseParams.rest(quad, cam)
    x = p.keypoints2d(quad).copy()
    x[0] += [3.0, 4.0]
    x[1] += [0.0, 1.0]
    conf = np.zeros(16)
    conf[0], conf[1] = 0.5, 1.0
    o = KeypointObservation(x, conf, (0, 0, 10, 10))
    assert loss_labeled(o, quad, p) == pytest.approx(6.0)
    assert loss_pseudo(o, quad, p) == pytest.approx(0.5 * 5 + 1.0)


def test_zero_confidence_keypoints_do_not_matter(quad):
    cam = WeakPerspectiveCamera(10.0, [0, 0], quat_identity())
    p = PoseParams.rest(quad, cam)
    x = p.keypoints2d(quad) + 100.0 * (np.arange(16) % 2)[:, None]
    o = KeypointObservation(x, (np.arange(16) % 2 == 0).astype(float), (0, 0, 10, 10))
    assert loss_pseudo(o, quad, p) == 0.0


def test_loss_rejects_wrong_keypoint_count(quad):
    p = PoseParams.rest(quad, WeakPerspectiveCamera(1.0, [0, 0], quat_identity()))
    with pytest.raises(StructureError):
        loss_labeled(KeypointObservation(np.zeros((3, 2)), None, (0, 0, 1, 1)), quad, p)


def test_observation_validation():
    with pytest.raises(ValueError):
        KeypointObservation(np.zeros((2, 2)), [0.5, 1.5], (0, 0, 1, 1))
    with pytest.raises(ValueError):
        KeypointObservation(np.zeros((2, 2)), None, (0, 0, 0, 1))


@pytest.mark.parametrize("mode", ["articulation", "displacement"])
@pytest.mark.parametrize("loss_fn", [loss_labeled, loss_pseudo])
def test_gradient_matches_central_differences(mode, loss_fn, rng):
    for _ in range(5):
        model, obs, params = random_fit_problem(rng, mode)
        analytic = grad(loss_fn, obs, model, params).flat()
        numeric = central_difference_gradient(loss_fn, obs, model, params)
        assert relative_error(analytic, numeric, floor=1e-4).max() < 1e-5


def exact_template():
    # integer geometry and dyadic weights keep every intermediate exactly representable
    parts = PartTree(["root", "arm"], [-1, 0], pivots=[[0, 0, 0], [1, 0, 0]])
    V = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [0, 0, 1], [2, 1, 1]]
    a = [[1, 0], [0.5, 0.5], [0, 1], [1, 0], [1, 0], [0, 1]]
    A = [[1, 0, 0, 0, 0, 0], [0, 0.5, 0.5, 0, 0, 0], [0, 0, 0, 1, 0, 0], [0, 0, 0, 0.5, 0.5, 0], [0, 0, 0, 0, 0, 1]]
    return TemplateModel(V, [], parts, a, A)


def test_subgradient_zero_at_exact_fit():
    m = exact_template()
    p = PoseParams.rest(m, WeakPerspectiveCamera(2.0, [1.0, 1.0], quat_identity()))
    x = p.keypoints2d(m)
    loss, g = loss_and_grad(KeypointObservation(x, None, (0, 0, 8, 8)), m, p)
    assert loss == 0.0 and not np.any(g.flat())
    # an exact keypoint contributes nothing, so it is as if it had zero weight
    off = x.copy()
    off[1:] += [[0.5, -1.0], [2.0, 0.0], [0.0, 3.0], [-1.0, -1.0]]
    o = KeypointObservation(off, None, (0, 0, 8, 8))
    w = np.ones(5)
    w[0] = 0.0
    assert np.array_equal(loss_and_grad(o, m, p)[1].flat(), loss_and_grad(o, m, p, weights=w)[1].flat())


def test_grad_rejects_other_losses(quad):
    p = PoseParams.rest(quad, WeakPerspectiveCamera(1.0, [0, 0], quat_identity()))
    with pytest.raises(ValueError):
        grad(lambda *a: 0.0, KeypointObservation(np.zeros((16, 2)), None, (0, 0, 1, 1)), quad, p)


def test_params_require_exactly_one_mode(quad):
    cam = WeakPerspectiveCamera(1.0, [0, 0], quat_identity())
    with pytest.raises(StructureError):
        PoseParams(cam)
    with pytest.raises(StructureError):
        PoseParams(cam, Articulation.identity(8), np.zeros((100, 3)))


def test_params_round_trip(quad, rng):
    cam = WeakPerspectiveCamera(2.0, [1, 2], quat_normalize(rng.normal(size=4)))
    for p in (PoseParams.rest(quad, cam), PoseParams(cam, displacement=rng.normal(size=(100, 3)))):
        back = PoseParams.from_dict(p.to_dict())
        assert np.array_equal(back.keypoints2d(quad), p.keypoints2d(quad))


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(max_iters=0)
    with pytest.raises(ValueError):
        FitConfig(mode="mesh")
    assert FitConfig().step_size == 1e-2 and FitConfig().max_iters == 500


# ---------------------------------------------------------------- fitting


def perturbed_problem(quad, seed):
    rng = np.random.default_rng(seed)
    rots = np.array([quat_from_axis_angle(rng.normal(size=3), math.radians(20) * rng.random()) for _ in range(8)])
    rots[0] = quat_identity()
    cam = WeakPerspectiveCamera(100, [128, 128], quat_from_axis_angle(rng.normal(size=3), rng.random() * math.pi))
    truth = PoseParams(cam, articulation=Articulation(rots, np.zeros((8, 3))))
    obs = obs_of(truth.keypoints2d(quad))
    q0 = quat_mul(quat_from_axis_angle(rng.normal(size=3), math.radians(15)), cam.quat)
    jit = np.array([quat_mul(quat_from_axis_angle(rng.normal(size=3), math.radians(5)), r) for r in rots])
    jit[0] = quat_identity()
    init = PoseParams(WeakPerspectiveCamera(cam.scale, cam.trans, q0), articulation=Articulation(jit, np.zeros((8, 3))))
    return obs, init, truth


def test_fit_recovers_camera(quad):
    obs, init, truth = perturbed_problem(quad, 3)
    res = fit_instance(obs, quad, init)
    assert rot_err(res.params.camera.rotation, truth.camera.rotation) < 1.0
    assert res.final_loss < res.loss_trace[0]
    assert all(b <= a for a, b in zip(res.loss_trace, res.loss_trace[1:]))
    assert len(res.iterate_trace) == len(res.loss_trace) == res.iterations + 1


def test_fit_is_deterministic_and_batch_consistent(quad):
    probs = [perturbed_problem(quad, s) for s in range(3)]
    cfg = FitConfig(max_iters=60)
    singles = [fit_instance(o, quad, i, cfg) for o, i, _ in probs]
    again = fit_instance(probs[1][0], quad, probs[1][1], cfg)
    batch = fit_batch([p[0] for p in probs], quad, [p[1] for p in probs], cfg)
    assert again.loss_trace == singles[1].loss_trace
    for a, b in zip(singles, batch):
        assert a.loss_trace == b.loss_trace
        assert np.array_equal(a.params.camera.quat, b.params.camera.quat)


def test_fit_at_optimum_stops_immediately(quad):
    _, _, truth = perturbed_problem(quad, 0)
    obs = obs_of(truth.keypoints2d(quad))
    res = fit_instance(obs, quad, truth)
    assert res.iterations == 0 and res.converged and res.final_loss < 1e-9


def test_fit_mode_mismatch(quad):
    obs, init, _ = perturbed_problem(quad, 0)
    with pytest.raises(ValueError):
        fit_instance(obs, quad, init, FitConfig(mode="displacement"))


def test_displacement_mode_reduces_loss(quad):
    obs, init, _ = perturbed_problem(quad, 1)
    start = PoseParams(init.camera, displacement=np.zeros((100, 3)))
    res = fit_instance(obs, quad, start, FitConfig(mode="displacement", max_iters=100))
    assert res.final_loss < 0.2 * loss_labeled(obs, quad, start)


def test_fit_observation_from_scratch(quad):
    _, _, truth = perturbed_problem(quad, 4)
    obs = obs_of(truth.keypoints2d(quad))
    res = fit_observation(obs, quad)
    assert res.final_loss < 0.05 * loss_labeled(obs, quad, PoseParams.rest(quad, init_camera(quad.rest_keypoints(), obs)))


# ---------------------------------------------------------------- camera init


def test_init_camera_exact_on_noise_free_points(rng):
    for _ in range(20):
        X = rng.normal(size=(10, 3))
        cam = WeakPerspectiveCamera(rng.uniform(0.5, 50), rng.normal(size=2) * 10, quat_normalize(rng.normal(size=4)))
        est = init_camera(X, obs_of(project(cam, X), rng.uniform(0.2, 1, 10)))
        assert est.scale == pytest.approx(cam.scale, rel=1e-9)
        assert np.allclose(est.trans, cam.trans, atol=1e-8 * cam.scale)
        assert rot_err(est.rotation, cam.rotation) < 1e-5


def test_init_camera_coplanar_points(rng):
    for _ in range(10):
        X = np.c_[rng.normal(size=(8, 2)), np.zeros(8)]
        cam = WeakPerspectiveCamera(3.0, [1, 2], quat_normalize(rng.normal(size=4)))
        est = init_camera(X, obs_of(project(cam, X)))
        assert np.allclose(project(est, X), project(cam, X), atol=1e-8)


def test_init_camera_degenerate():
    X = np.random.default_rng(0).normal(size=(5, 3))
    with pytest.raises(DegenerateConfiguration):
        init_camera(X, obs_of(np.ones((5, 2)) * np.arange(5)[:, None], [1, 1, 0, 0, 0]))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        init_camera(line, obs_of(np.random.default_rng(1).normal(size=(5, 2))))


def test_similarity_align_recovers_transform(rng):
    src = rng.normal(size=(12, 3))
    R = quat_from_axis_angle(rng.normal(size=3), 1.0)
    from artfit.geometry import quat_to_matrix

    Rm = quat_to_matrix(R)
    dst = 2.5 * src @ Rm.T + [1, 2, 3]
    s, Rh, t = similarity_align(src, dst)
    assert s == pytest.approx(2.5) and np.allclose(Rh, Rm) and np.allclose(t, [1, 2, 3])


def test_keypoint_shape_from_noise_free_views(quad, rng):
    shape = quad.rest_keypoints()
    obs = []
    for _ in range(30):
        cam = WeakPerspectiveCamera(rng.uniform(50, 150), rng.normal(size=2) * 20 + 128,
                                    quat_normalize(rng.normal(size=4)))
        obs.append(obs_of(project(cam, shape)))
    est, cams = estimate_keypoint_shape(obs, shape + rng.normal(size=shape.shape) * 0.05, n_iters=50)
    # the gauge follows the noisy initial shape, so compare up to a similarity
    s, R, t = similarity_align(est, shape)
    assert np.max(np.abs(s * est @ R.T + t - shape)) < 1e-8
    assert all(c is not None for c in cams)
