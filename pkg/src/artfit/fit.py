"""Confidence-weighted keypoint reprojection fitting.

The loss for one instance is ``sum_k c_k * ||x_k - proj_k||`` where ``proj``
is the weak-perspective projection of the regressed 3D keypoints.  With all
``c_k = 1`` this is the labeled-set loss.  Gradients are analytic; rotations
are differentiated in a 3-dim tangent space through left perturbations
``q <- exp(w) * q`` so unit norm is preserved by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    Articulation,
    StructureError,
    TemplateModel,
    WeakPerspectiveCamera,
    deform,
    forward_kinematics,
    keypoints3d,
    matrix_to_quat,
    project,
    quat_exp,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
    skin,
)

log = logging.getLogger(__name__)

# Summed residual (bbox units) below which a fit is exact up to rounding.
EXACT_LOSS = 1e-12


class DegenerateConfiguration(ValueError):
    """Too few weighted correspondences, or they are collinear."""


class FitError(RuntimeError):
    """Optimization produced a non-finite loss."""


# --------------------------------------------------------------------------- #
# data types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class KeypointObservation:
    x: np.ndarray
    conf: np.ndarray
    bbox: tuple

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2 or x.shape[1] != 2:
            raise ValueError(f"keypoints must be (k, 2), got {x.shape}")
        conf = np.ones(len(x)) if self.conf is None else np.asarray(self.conf, dtype=float)
        if conf.shape != (len(x),):
            raise ValueError(f"expected {len(x)} confidences, got {conf.shape}")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidences must lie in [0, 1]")
        bbox = tuple(float(b) for b in self.bbox)
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise ValueError(f"bbox must be (x, y, w, h) with positive size, got {bbox}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "conf", conf)
        object.__setattr__(self, "bbox", bbox)

    @property
    def extent(self) -> float:
        return max(self.bbox[2], self.bbox[3])

    def normalized(self) -> "KeypointObservation":
        """Same observation in bbox-relative units (origin at the bbox corner, divided by max(w, h))."""
        m = self.extent
        x0 = np.array(self.bbox[:2])
        return KeypointObservation((self.x - x0) / m, self.conf, (0.0, 0.0, self.bbox[2] / m, self.bbox[3] / m))

    def with_conf(self, conf) -> "KeypointObservation":
        return KeypointObservation(self.x, conf, self.bbox)


@dataclass(frozen=True)
class PoseParams:
    """Camera plus exactly one shape mode: an articulation or vertex displacements."""

    camera: WeakPerspectiveCamera
    articulation: Articulation | None = None
    displacement: np.ndarray | None = None

    def __post_init__(self):
        if (self.articulation is None) == (self.displacement is None):
            raise StructureError("exactly one of articulation / displacement must be set")
        if self.displacement is not None:
            d = np.asarray(self.displacement, dtype=float)
            if not np.all(np.isfinite(d)):
                raise ValueError("displacement must be finite")
            object.__setattr__(self, "displacement", d)

    @property
    def mode(self) -> str:
        return "articulation" if self.articulation is not None else "displacement"

    def vertices(self, model: TemplateModel) -> np.ndarray:
        if self.articulation is not None:
            return skin(model, forward_kinematics(model.parts, self.articulation))
        return deform(model, self.displacement)

    def keypoints2d(self, model: TemplateModel) -> np.ndarray:
        return project(self.camera, keypoints3d(model.regressor, self.vertices(model)))

    @classmethod
    def rest(cls, model: TemplateModel, camera: WeakPerspectiveCamera, mode="articulation") -> "PoseParams":
        if mode == "articulation":
            return cls(camera, articulation=Articulation.identity(model.n_parts))
        if mode == "displacement":
            return cls(camera, displacement=np.zeros_like(model.vertices))
        raise ValueError(f"unknown mode {mode!r}")

    def to_dict(self) -> dict:
        d = {"camera": self.camera.to_dict(), "mode": self.mode}
        if self.articulation is not None:
            d["articulation"] = self.articulation.to_dict()
        else:
            d["displacement"] = self.displacement.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoseParams":
        cam = WeakPerspectiveCamera.from_dict(d["camera"])
        if d.get("mode", "articulation") == "articulation":
            return cls(cam, articulation=Articulation.from_dict(d["articulation"]))
        return cls(cam, displacement=np.asarray(d["displacement"], dtype=float))


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 500
    step_size: float = 1e-2
    convergence_tol: float = 1e-8
    mode: str = "articulation"
    seed: int = 0
    optimize_root: bool = False
    optimize_part_translations: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.mode not in ("articulation", "displacement"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class PoseGradient:
    """Loss gradient.  Rotation entries are w.r.t. left tangent perturbations."""

    scale: float
    trans: np.ndarray
    rot: np.ndarray
    part_rot: np.ndarray | None = None
    part_trans: np.ndarray | None = None
    displacement: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        parts = [np.atleast_1d(self.scale), self.trans, self.rot]
        for extra in (self.part_rot, self.part_trans, self.displacement):
            if extra is not None:
                parts.append(extra.ravel())
        return np.concatenate(parts)

    def __mul__(self, k: float) -> "PoseGradient":
        def mul(a):
            return None if a is None else a * k

        return PoseGradient(self.scale * k, self.trans * k, self.rot * k,
                            mul(self.part_rot), mul(self.part_trans), mul(self.displacement))

    __rmul__ = __mul__


@dataclass
class FitResult:
    params: PoseParams
    loss_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    final_loss: float = float("nan")
    iterate_trace: list = field(default_factory=list)


# --------------------------------------------------------------------------- #
# losses
# --------------------------------------------------------------------------- #


def _check_k(obs: KeypointObservation, model: TemplateModel):
    if len(obs.x) != model.n_keypoints:
        raise StructureError(f"observation has {len(obs.x)} keypoints, model regresses {model.n_keypoints}")


def _cross(a, b):
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def weighted_reprojection_loss(x, proj, weights) -> float:
    return float(np.sum(weights * np.linalg.norm(x - proj, axis=1)))


def loss_labeled(obs: KeypointObservation, model: TemplateModel, params: PoseParams) -> float:
    """Sum of per-keypoint Euclidean reprojection errors; confidences ignored."""
    _check_k(obs, model)
    return weighted_reprojection_loss(obs.x, params.keypoints2d(model), 1.0)


def loss_pseudo(obs: KeypointObservation, model: TemplateModel, params: PoseParams) -> float:
    """Confidence-scaled reprojection loss for pseudo-labels."""
    _check_k(obs, model)
    return weighted_reprojection_loss(obs.x, params.keypoints2d(model), obs.conf)


class _Kinematics:
    """Model arrays restricted to what the keypoint regressor reads.

    Skinning only needs the nonzero (vertex, part) membership pairs of the
    vertices with regressor weight; the regressor is folded into those pairs
    so keypoints are ``pair_A @ moved_pairs``.
    """

    def __init__(self, model: TemplateModel):
        self.model = model
        parts = model.parts
        support = np.flatnonzero(np.any(model.regressor != 0, axis=0))
        a = model.memberships[support]
        pv, pp = np.nonzero(a)
        self.pair_part = pp
        self.pair_T = model.vertices[support][pv]
        self.pair_A = model.regressor[:, support][:, pv] * a[pv, pp]
        self.part_of_pair = np.zeros((len(parts), len(pp)))
        self.part_of_pair[pp, np.arange(len(pp))] = 1.0
        self.order = parts.order
        self.parents = np.asarray(parts.parents)
        self.is_root = self.parents < 0
        self.safe_parents = np.where(self.is_root, 0, self.parents)
        self.pivots = parts.pivots


@dataclass
class _State:
    """Pose parameters of N instances stacked into arrays."""

    scale: np.ndarray
    trans: np.ndarray
    quat: np.ndarray
    part_quat: np.ndarray | None = None
    part_trans: np.ndarray | None = None
    disp: np.ndarray | None = None

    @classmethod
    def stack(cls, params: list) -> "_State":
        cams = [p.camera for p in params]
        st = cls(
            np.array([c.scale for c in cams]),
            np.array([c.trans for c in cams]),
            np.array([c.quat for c in cams]),
        )
        if params[0].articulation is not None:
            st.part_quat = np.array([p.articulation.rotations for p in params])
            st.part_trans = np.array([p.articulation.translations for p in params])
        else:
            st.disp = np.array([p.displacement for p in params])
        return st

    def params(self, i: int) -> PoseParams:
        cam = WeakPerspectiveCamera(self.scale[i], self.trans[i], self.quat[i])
        if self.part_quat is not None:
            return PoseParams(cam, articulation=Articulation(self.part_quat[i], self.part_trans[i]))
        return PoseParams(cam, displacement=self.disp[i])

    def select(self, mask: np.ndarray, other: "_State") -> "_State":
        """Rows from ``self`` where ``mask`` is true, else from ``other``."""

        def pick(a, b):
            if a is None:
                return None
            return np.where(mask.reshape((-1,) + (1,) * (a.ndim - 1)), a, b)

        return _State(*(pick(getattr(self, f), getattr(other, f))
                        for f in ("scale", "trans", "quat", "part_quat", "part_trans", "disp")))


def _batch_loss_and_grad(kin: _Kinematics, x, w, st: _State):
    """Losses ``(N,)`` and gradient arrays for N instances at once."""
    Rc = quat_to_matrix(st.quat)
    if st.part_quat is not None:
        R_loc = quat_to_matrix(st.part_quat)
        t_loc = kin.pivots + st.part_trans - np.einsum("npij,pj->npi", R_loc, kin.pivots)
        Rg = np.empty_like(R_loc)
        tg = np.empty_like(t_loc)
        for p in kin.order:
            par = kin.parents[p]
            if par < 0:
                Rg[:, p], tg[:, p] = R_loc[:, p], t_loc[:, p]
            else:
                Rg[:, p] = Rg[:, par] @ R_loc[:, p]
                tg[:, p] = np.einsum("nij,nj->ni", Rg[:, par], t_loc[:, p]) + tg[:, par]
        moved = np.einsum("neij,ej->nei", Rg[:, kin.pair_part], kin.pair_T) + tg[:, kin.pair_part]
        X = kin.pair_A @ moved
    else:
        X = kin.model.regressor @ (kin.model.vertices + st.disp)

    Y = X @ np.swapaxes(Rc, 1, 2)
    proj = st.scale[:, None, None] * Y[..., :2] + st.trans[:, None, :]
    r = x - proj
    dist = np.sqrt(np.sum(r * r, axis=-1))
    loss = np.sum(w * dist, axis=-1)

    # subgradient 0 for keypoints that reproject exactly
    coef = np.divide(w, dist, out=np.zeros_like(dist), where=dist > 0)
    g_proj = -coef[..., None] * r

    grads = {
        "scale": np.sum(g_proj * Y[..., :2], axis=(1, 2)),
        "trans": g_proj.sum(axis=1),
    }
    g_Y = np.zeros_like(Y)
    g_Y[..., :2] = st.scale[:, None, None] * g_proj
    grads["rot"] = _cross(Y, g_Y).sum(axis=1)
    g_X = g_Y @ Rc

    if st.part_quat is None:
        grads["disp"] = kin.model.regressor.T @ g_X
        return loss, grads

    # per-part force and moment sums, accumulated over subtrees
    g_moved = kin.pair_A.T @ g_X
    G = kin.part_of_pair @ g_moved
    M = kin.part_of_pair @ _cross(moved, g_moved)
    for p in reversed(kin.order):
        par = kin.parents[p]
        if par >= 0:
            G[:, par] += G[:, p]
            M[:, par] += M[:, p]
    root = kin.is_root[None, :, None]
    R_par = np.where(root[..., None], np.eye(3), Rg[:, kin.safe_parents])
    t_par = np.where(root, 0.0, tg[:, kin.safe_parents])
    # world position of each part's (translated) pivot
    c = np.einsum("npij,npj->npi", R_par, kin.pivots + st.part_trans) + t_par
    grads["part_rot"] = np.einsum("npji,npj->npi", R_par, M - _cross(c, G))
    grads["part_trans"] = np.einsum("npji,npj->npi", R_par, G)
    return loss, grads


def _weights(obs: KeypointObservation, weights):
    if weights is None:
        return obs.conf
    return np.broadcast_to(np.asarray(weights, dtype=float), obs.conf.shape)


def loss_and_grad(obs: KeypointObservation, model: TemplateModel, params: PoseParams, weights=None):
    """Loss and analytic gradient in one pass.

    ``weights`` defaults to the observation confidences.  A keypoint whose
    residual is exactly zero is nonsmooth; it contributes the subgradient 0.
    """
    _check_k(obs, model)
    st = _State.stack([params])
    loss, g = _batch_loss_and_grad(_Kinematics(model), obs.x[None], _weights(obs, weights)[None], st)
    if params.articulation is not None:
        return float(loss[0]), PoseGradient(float(g["scale"][0]), g["trans"][0], g["rot"][0],
                                            part_rot=g["part_rot"][0], part_trans=g["part_trans"][0])
    return float(loss[0]), PoseGradient(float(g["scale"][0]), g["trans"][0], g["rot"][0],
                                        displacement=g["disp"][0])


def grad(loss_fn, obs: KeypointObservation, model: TemplateModel, params: PoseParams) -> PoseGradient:
    """Gradient of ``loss_labeled`` or ``loss_pseudo`` at ``params``."""
    if loss_fn is loss_labeled:
        return loss_and_grad(obs, model, params, weights=1.0)[1]
    if loss_fn is loss_pseudo:
        return loss_and_grad(obs, model, params)[1]
    raise ValueError("loss_fn must be loss_labeled or loss_pseudo")


# --------------------------------------------------------------------------- #
# optimization
# --------------------------------------------------------------------------- #


def retract(params: PoseParams, d_log_scale, d_trans, d_rot, d_part_rot=None, d_part_trans=None, d_disp=None):
    """Move ``params`` by a tangent increment (log-scale, rotation vectors)."""
    cam = params.camera
    new_cam = WeakPerspectiveCamera(
        cam.scale * math.exp(d_log_scale),
        cam.trans + d_trans,
        quat_mul(quat_exp(d_rot), cam.quat),
    )
    if params.articulation is not None:
        art = params.articulation
        rot = art.rotations if d_part_rot is None else quat_mul(quat_exp(d_part_rot), art.rotations)
        tr = art.translations if d_part_trans is None else art.translations + d_part_trans
        return PoseParams(new_cam, articulation=Articulation(rot, tr))
    disp = params.displacement if d_disp is None else params.displacement + d_disp
    return PoseParams(new_cam, displacement=disp)


class _Layout:
    """Maps the optimized subset of the parameters to flat rows and back."""

    def __init__(self, model: TemplateModel, cfg: FitConfig):
        self.articulated = cfg.mode == "articulation"
        self.rot_mask = np.ones(model.n_parts, dtype=bool)
        if not cfg.optimize_root:
            self.rot_mask[model.parts.root] = False
        self.opt_trans = cfg.optimize_part_translations
        self.n_parts = model.n_parts
        self.nv = model.vertices.shape[0]

    def pack(self, st: _State, g: dict) -> np.ndarray:
        n = len(st.scale)
        cols = [(g["scale"] * st.scale)[:, None], g["trans"], g["rot"]]
        if self.articulated:
            cols.append(g["part_rot"][:, self.rot_mask].reshape(n, -1))
            if self.opt_trans:
                cols.append(g["part_trans"].reshape(n, -1))
        else:
            cols.append(g["disp"].reshape(n, -1))
        return np.concatenate(cols, axis=1)

    def apply(self, st: _State, step: np.ndarray) -> _State:
        n = len(st.scale)
        out = _State(
            st.scale * np.exp(step[:, 0]),
            st.trans + step[:, 1:3],
            quat_normalize(quat_mul(quat_exp(step[:, 3:6]), st.quat)),
        )
        rest = step[:, 6:]
        if not self.articulated:
            out.disp = st.disp + rest.reshape(n, self.nv, 3)
            return out
        k = int(self.rot_mask.sum()) * 3
        d_rot = np.zeros((n, self.n_parts, 3))
        d_rot[:, self.rot_mask] = rest[:, :k].reshape(n, -1, 3)
        out.part_quat = quat_normalize(quat_mul(quat_exp(d_rot), st.part_quat))
        out.part_trans = st.part_trans + rest[:, k:].reshape(n, self.n_parts, 3) if self.opt_trans else st.part_trans
        return out


def _to_normalized(cam: WeakPerspectiveCamera, obs: KeypointObservation) -> WeakPerspectiveCamera:
    m = obs.extent
    return WeakPerspectiveCamera(cam.scale / m, (cam.trans - np.array(obs.bbox[:2])) / m, cam.quat)


def _to_image(cam: WeakPerspectiveCamera, obs: KeypointObservation) -> WeakPerspectiveCamera:
    m = obs.extent
    return WeakPerspectiveCamera(cam.scale * m, cam.trans * m + np.array(obs.bbox[:2]), cam.quat)


def fit_instance(obs: KeypointObservation, model: TemplateModel, init: PoseParams,
                 cfg: FitConfig = FitConfig(), labeled: bool = False) -> FitResult:
    """Minimize the (pseudo-)label reprojection loss for a single instance.

    Adam in the tangent space with a cosine-decayed step size.  The returned
    parameters are the best iterate seen; ``loss_trace`` holds that
    incumbent's loss after every iteration (so it never increases) and
    ``iterate_trace`` the loss of every raw Adam iterate.  Stops after
    ``cfg.max_iters`` or once the raw loss changes by less than
    ``cfg.convergence_tol`` (relative) between iterations.

    Optimization runs in bbox-normalized image units, so both traces are in
    those units; ``final_loss`` is in image units.
    """
    return fit_batch([obs], model, [init], cfg, labeled=labeled)[0]


def fit_batch(observations, model: TemplateModel, inits, cfg: FitConfig = FitConfig(),
              labeled: bool = False) -> list:
    """:func:`fit_instance` for many instances, vectorized over the batch.

    Each instance follows exactly the iteration it would follow alone; an
    instance that has converged is frozen while the rest continue.
    """
    observations, inits = list(observations), list(inits)
    if len(observations) != len(inits):
        raise ValueError("observations and inits differ in length")
    if not observations:
        return []
    for o, p in zip(observations, inits):
        _check_k(o, model)
        if p.mode != cfg.mode:
            raise ValueError(f"init is in {p.mode} mode but config asks for {cfg.mode}")
    n = len(observations)
    kin = _Kinematics(model)
    layout = _Layout(model, cfg)
    nobs = [o.normalized() for o in observations]
    x = np.array([o.x for o in nobs])
    w = np.array([_weights(o, 1.0 if labeled else None) for o in nobs])
    st = _State.stack([replace(p, camera=_to_normalized(p.camera, o)) for p, o in zip(inits, observations)])

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    loss, g = _batch_loss_and_grad(kin, x, w, st)
    if not np.all(np.isfinite(loss)):
        raise FitError(f"non-finite loss at iteration 0 (instances {np.flatnonzero(~np.isfinite(loss)).tolist()})")
    gvec = layout.pack(st, g)
    m = np.zeros_like(gvec)
    v = np.zeros_like(gvec)
    best_loss, best = loss.copy(), st
    traces = [[float(l)] for l in loss]
    raws = [[float(l)] for l in loss]
    active = loss > EXACT_LOSS
    iters = np.zeros(n, dtype=int)
    it = 0
    while active.any() and it < cfg.max_iters:
        it += 1
        lr = 0.5 * cfg.step_size * (1.0 + math.cos(math.pi * (it - 1) / cfg.max_iters))
        m = np.where(active[:, None], beta1 * m + (1 - beta1) * gvec, m)
        v = np.where(active[:, None], beta2 * v + (1 - beta2) * gvec**2, v)
        step = lr * (m / (1 - beta1**it)) / (np.sqrt(v / (1 - beta2**it)) + eps)
        st = layout.apply(st, -step).select(active, st)
        new_loss, g = _batch_loss_and_grad(kin, x, w, st)
        bad = active & ~np.isfinite(new_loss)
        if bad.any():
            raise FitError(f"non-finite loss at iteration {it} (instances {np.flatnonzero(bad).tolist()})")
        gvec = layout.pack(st, g)
        improved = active & (new_loss < best_loss)
        best = st.select(improved, best)
        best_loss = np.where(improved, new_loss, best_loss)
        for i in np.flatnonzero(active):
            traces[i].append(float(best_loss[i]))
            raws[i].append(float(new_loss[i]))
        iters[active] = it
        done = (best_loss <= EXACT_LOSS) | (np.abs(loss - new_loss) <= cfg.convergence_tol * loss)
        loss = np.where(active, new_loss, loss)
        active = active & ~done

    results = []
    for i, (o, tr, raw) in enumerate(zip(observations, traces, raws)):
        p = best.params(i)
        final = replace(p, camera=_to_image(p.camera, o))
        final_loss = loss_labeled(o, model, final) if labeled else loss_pseudo(o, model, final)
        results.append(FitResult(final, tr, int(iters[i]), not active[i], final_loss, raw))
    return results


def fit_observation(obs: KeypointObservation, model: TemplateModel, cfg: FitConfig = FitConfig(),
                    labeled: bool = False) -> FitResult:
    """Initialize the camera from the rest-pose template, then run :func:`fit_instance`."""
    cam = init_camera(model.rest_keypoints(), obs)
    return fit_instance(obs, model, PoseParams.rest(model, cam, cfg.mode), cfg, labeled=labeled)


# --------------------------------------------------------------------------- #
# camera initialization and keypoint-shape estimation
# --------------------------------------------------------------------------- #


def _coplanar_rows(G, E):
    """Orthonormal 2x3 rows ``B`` and scale ``s`` with ``s * B @ E == G`` for in-plane data.

    Of the two mirror-image solutions, the one with positive out-of-plane
    component in the first row is returned.
    """
    g1, g2 = G
    a, b, c = g1 @ g1, g2 @ g2, g1 @ g2
    # (1 - a u)(1 - b u) = c^2 u^2 with u = 1 / s^2
    qa, qb, qc = a * b - c * c, -(a + b), 1.0
    if abs(qa) < 1e-15:
        u = -qc / qb
    else:
        disc = max(qb * qb - 4 * qa * qc, 0.0)
        u = (-qb - math.sqrt(disc)) / (2 * qa)
    u = min(u, 1.0 / max(a, b))
    n = np.cross(E[:, 0], E[:, 1])
    al1 = math.sqrt(max(1.0 - a * u, 0.0))
    if al1 > 1e-12:
        al2 = -c * u / al1
    else:
        al2 = math.sqrt(max(1.0 - b * u, 0.0))
    s = 1.0 / math.sqrt(u)
    B = np.stack([E @ g1 / s + al1 * n, E @ g2 / s + al2 * n])
    return B, s


def init_camera(X3d, obs: KeypointObservation) -> WeakPerspectiveCamera:
    """Weak-perspective camera from 3D-2D correspondences, weighted by confidence.

    Both point sets are centered on their weighted means.  The weighted
    cross-covariance is whitened by the 3D covariance and projected onto the
    nearest scaled orthonormal 2x3 matrix with an SVD, which is exact for
    noise-free projections of non-coplanar points.  Coplanar points use the
    closed-form in-plane solution.  Scale and translation follow in closed form.
    """
    X = np.asarray(X3d, dtype=float)
    x = obs.x
    w = obs.conf
    if X.shape != (len(x), 3):
        raise StructureError(f"expected ({len(x)}, 3) 3D points, got {X.shape}")
    use = w > 0
    if use.sum() < 3:
        raise DegenerateConfiguration(f"need >= 3 weighted keypoints, got {int(use.sum())}")
    X, x, w = X[use], x[use], w[use] / w[use].sum()
    Xm, xm = w @ X, w @ x
    Xc, xc = X - Xm, x - xm
    C = (Xc * w[:, None]).T @ Xc
    evals, evecs = np.linalg.eigh(C)
    if evals[2] <= 0 or evals[1] <= 1e-10 * evals[2]:
        raise DegenerateConfiguration("3D keypoints are collinear")
    M = (xc * w[:, None]).T @ Xc

    if evals[0] > 1e-9 * evals[2]:
        P = M @ np.linalg.inv(C)
        U, _, Vt = np.linalg.svd(P, full_matrices=False)
        B = U @ Vt
    else:
        E = evecs[:, 1:]
        G = M @ E @ np.diag(1.0 / evals[1:])
        B, _ = _coplanar_rows(G, E)

    BX = Xc @ B.T
    s = float(np.sum(w[:, None] * xc * BX) / np.sum(w[:, None] * BX * BX))
    if s < 0:
        # mirror the image plane: rotate 180 degrees about the optical axis
        B, s = -B, -s
    R = np.vstack([B, np.cross(B[0], B[1])])
    t = xm - s * (B @ Xm)
    return WeakPerspectiveCamera(s, t, matrix_to_quat(R))


def similarity_align(src, dst, weights=None):
    """Scale, rotation and translation mapping ``src`` onto ``dst`` in least squares."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    ms, md = w @ src, w @ dst
    S, D = src - ms, dst - md
    H = (S * w[:, None]).T @ D
    U, sig, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    corr = np.diag([1.0, 1.0, d])
    R = Vt.T @ corr @ U.T
    scale = float(np.trace(np.diag(sig) @ corr) / np.sum(w * np.sum(S * S, axis=1)))
    t = md - scale * R @ ms
    return scale, R, t


def estimate_keypoint_shape(observations, init_shape, n_iters: int = 15, ridge: float = 1e-6):
    """Confidence-weighted SfM on keypoints: a rigid 3D keypoint shape plus per-record cameras.

    Alternates camera initialization against the current shape with a
    per-keypoint weighted least-squares shape update.  After each update the
    shape is similarity-aligned to ``init_shape`` to fix the gauge.
    Observations are used in bbox-normalized units.  Records whose camera
    cannot be solved are skipped.  Returns ``(shape, cameras)`` where cameras
    are in image units (``None`` for skipped records).
    """
    S = np.array(init_shape, dtype=float)
    anchor = S.copy()
    k = len(S)
    nobs = [o.normalized() for o in observations]
    cams = [None] * len(nobs)
    for _ in range(n_iters):
        lhs = np.zeros((k, 3, 3))
        rhs = np.zeros((k, 3))
        for i, o in enumerate(nobs):
            try:
                cam = init_camera(S, o)
            except DegenerateConfiguration:
                cams[i] = None
                continue
            cams[i] = cam
            B = cam.rotation[:2]
            BtB = B.T @ B
            lhs += (o.conf * cam.scale**2)[:, None, None] * BtB
            rhs += (o.conf * cam.scale)[:, None] * ((o.x - cam.trans) @ B)
        lam = ridge * (np.trace(lhs, axis1=1, axis2=2).mean() + 1e-12)
        S = np.linalg.solve(lhs + lam * np.eye(3), (rhs + lam * S)[..., None])[..., 0]
        scale, R, t = similarity_align(S, anchor)
        S = scale * S @ R.T + t
    out = []
    for i, o in enumerate(observations):
        if cams[i] is None:
            out.append(None)
            continue
        try:
            out.append(init_camera(S, o))
        except DegenerateConfiguration:
            out.append(None)
    return S, out
