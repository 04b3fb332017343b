"""Synthetic scenes with known ground truth and emulated keypoint detectors.

Stands in for web images and trained CNN detectors.  All randomness is
derived from integer seeds through :class:`numpy.random.SeedSequence`, so a
scene or detection depends only on its seed and identity, never on the
order in which things are generated.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .fit import PoseParams
from .geometry import (
    Articulation,
    Similarity2D,
    TemplateModel,
    WeakPerspectiveCamera,
    matrix_to_quat,
    project,
    quat_from_axis_angle,
    quat_identity,
    quat_to_matrix,
)
from .records import BoxDetection, DetectionRecord, SceneTruth


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _id_key(image_id: str) -> int:
    return zlib.crc32(image_id.encode("utf-8"))


@dataclass(frozen=True)
class SceneConfig:
    image_size: float = 256.0
    scale_range: tuple = (80.0, 120.0)
    max_offset: float = 20.0
    elevation_deg: tuple = (-20.0, 30.0)
    max_roll_deg: float = 10.0
    max_part_angle_deg: float = 25.0
    difficulty_range: tuple = (0.5, 2.5)
    keypoint_jitter: float = 0.2


def camera_rotation(azimuth_deg: float, elevation_deg: float, roll_deg: float = 0.0) -> np.ndarray:
    """Object-to-camera rotation; image y points down, so object 'up' maps to -y."""
    Ra = quat_to_matrix(quat_from_axis_angle([0, 1, 0], math.radians(azimuth_deg)))
    Re = quat_to_matrix(quat_from_axis_angle([1, 0, 0], math.radians(elevation_deg)))
    flip = np.diag([1.0, -1.0, -1.0])
    Rr = quat_to_matrix(quat_from_axis_angle([0, 0, 1], math.radians(roll_deg)))
    return Rr @ flip @ Re @ Ra


def scene_from_params(model: TemplateModel, image_id: str, params: PoseParams, *, corrupted=False,
                      noise_sigma=None, duplicate_of=None) -> SceneTruth:
    """Ground truth for given pose parameters; bbox is the tight box of all projected vertices."""
    verts2d = project(params.camera, params.vertices(model))
    lo, hi = verts2d.min(axis=0), verts2d.max(axis=0)
    bbox = (float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
    ns = np.ones(model.n_keypoints) if noise_sigma is None else np.asarray(noise_sigma, dtype=float)
    return SceneTruth(image_id, params, params.keypoints2d(model), bbox, corrupted, ns, model.name, duplicate_of)


def sample_scene(model: TemplateModel, image_id: str, rng: np.random.Generator,
                 cfg: SceneConfig = SceneConfig(), corrupted=False) -> SceneTruth:
    R = camera_rotation(
        rng.uniform(-180.0, 180.0),
        rng.uniform(*cfg.elevation_deg),
        rng.uniform(-cfg.max_roll_deg, cfg.max_roll_deg),
    )
    centre = np.full(2, cfg.image_size / 2) + rng.uniform(-cfg.max_offset, cfg.max_offset, size=2)
    cam = WeakPerspectiveCamera(rng.uniform(*cfg.scale_range), centre, matrix_to_quat(R))

    n = model.n_parts
    rots = np.empty((n, 4))
    for p in range(n):
        axis = rng.normal(size=3)
        angle = math.radians(rng.uniform(0.0, cfg.max_part_angle_deg))
        rots[p] = quat_identity() if p == model.parts.root else quat_from_axis_angle(axis, angle)
    params = PoseParams(cam, articulation=Articulation(rots, np.zeros((n, 3))))

    lo, hi = np.log(cfg.difficulty_range)
    difficulty = math.exp(rng.uniform(lo, hi))
    sigma = difficulty * np.exp(cfg.keypoint_jitter * rng.normal(size=model.n_keypoints))
    return scene_from_params(model, image_id, params, corrupted=corrupted, noise_sigma=sigma)


def make_pool(model: TemplateModel, n: int, corruption_rate: float, seed: int, *,
              cfg: SceneConfig = SceneConfig(), prefix: str = "img", duplicate_rate: float = 0.0) -> list:
    """Sample ``n`` scenes; exactly ``floor(corruption_rate * n)`` are marked corrupted.

    With ``duplicate_rate > 0``, that fraction of scenes (never the first) copy
    the pose of an earlier scene, emulating re-uploaded web images.
    """
    if not 0.0 <= corruption_rate <= 1.0:
        raise ValueError("corruption_rate must be in [0, 1]")
    if not 0.0 <= duplicate_rate < 1.0:
        raise ValueError("duplicate_rate must be in [0, 1)")
    if n <= 0:
        return []
    pool_rng = _rng(seed, 0)
    n_bad = int(math.floor(corruption_rate * n))
    bad = np.zeros(n, dtype=bool)
    bad[pool_rng.permutation(n)[:n_bad]] = True
    n_dup = int(math.floor(duplicate_rate * n))
    dup_slots = (np.sort(pool_rng.permutation(np.arange(1, n))[:n_dup]) if n > 1 else np.array([], int))
    dup_source = {int(i): int(pool_rng.integers(0, i)) for i in dup_slots}

    width = max(6, len(str(n - 1)))
    scenes = []
    for i in range(n):
        image_id = f"{prefix}{i:0{width}d}"
        if i in dup_source:
            src = scenes[dup_source[i]]
            root = src.duplicate_of or src.image_id
            scenes.append(SceneTruth(image_id, src.params, src.keypoints, src.bbox, src.corrupted,
                                     src.noise_sigma, src.category, root))
            continue
        scenes.append(sample_scene(model, image_id, _rng(seed, 1, i), cfg, corrupted=bool(bad[i])))
    return scenes


# --------------------------------------------------------------------------- #
# detectors
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class DetectorProfile:
    """Noise model of an emulated keypoint detector.

    ``sigma``, ``bias`` and ``sigma_equiv`` are in bbox-relative units
    (fractions of ``max(w, h)``); per-keypoint noise is further scaled by the
    scene's ``noise_sigma``.  Confidence is ``conf_max * exp(-err / conf_scale)``
    where ``err`` is the detector's own localization error.  On corrupted
    scenes the reported keypoints are uniform in the bbox but the confidence
    still comes from that localization error: the detector is as sure of
    itself on a wrong or truncated object as on a good one.
    """

    name: str
    sigma: float = 0.02
    bias: tuple = (0.0, 0.0)
    sigma_equiv: float = 0.01
    conf_scale: float = 0.05
    conf_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0 or self.sigma_equiv < 0:
            raise ValueError("noise levels must be >= 0")
        if self.conf_scale <= 0 or not 0 < self.conf_max <= 1:
            raise ValueError("conf_scale must be > 0 and conf_max in (0, 1]")

    def bias_array(self, k: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.bias, dtype=float), (k, 2))


def default_profiles(seed: int = 0) -> tuple:
    """Primary and auxiliary detectors with different noise levels and opposite biases."""
    return (
        DetectorProfile("primary", sigma=0.02, bias=(0.004, -0.002), sigma_equiv=0.01, seed=seed),
        DetectorProfile("auxiliary", sigma=0.025, bias=(-0.004, 0.004), sigma_equiv=0.01, seed=seed + 1),
    )


def _draw(profile: DetectorProfile, scene: SceneTruth, rng: np.random.Generator, extra_sigma: float = 0.0):
    """Localization offsets (image units) and uniform-in-bbox replacements for one prediction."""
    k = len(scene.keypoints)
    m = max(scene.bbox[2], scene.bbox[3])
    sig = profile.sigma * scene.noise_sigma
    noise = rng.normal(size=(k, 2)) * sig[:, None]
    if extra_sigma > 0:
        noise = noise + extra_sigma * rng.normal(size=(k, 2))
    else:
        rng.normal(size=(k, 2))  # keep stream layout fixed
    offset = (profile.bias_array(k) + noise) * m
    u = rng.random(size=(k, 2))
    junk = np.array(scene.bbox[:2]) + u * np.array(scene.bbox[2:])
    return offset, junk


def detect(profile: DetectorProfile, scene: SceneTruth) -> DetectionRecord:
    rng = _rng(profile.seed, _id_key(scene.image_id), 0)
    offset, junk = _draw(profile, scene, rng)
    m = max(scene.bbox[2], scene.bbox[3])
    err = np.linalg.norm(offset, axis=1) / m
    conf = profile.conf_max * np.exp(-err / profile.conf_scale)
    pred = junk if scene.corrupted else scene.keypoints + offset
    return DetectionRecord(scene.image_id, profile.name, pred, conf, scene.bbox,
                           provenance={"source": "simulator", "detector": profile.name, "seed": profile.seed})


def detect_transformed(profile: DetectorProfile, scene: SceneTruth, transform: Similarity2D,
                       index: int = 0) -> np.ndarray:
    """Prediction on a transformed copy of the image, in the transformed frame.

    Noise scales with the transform (the object is larger or smaller in the
    augmented image); ``sigma_equiv`` adds the detector's equivariance error.
    ``index`` selects an independent noise stream per augmentation.
    """
    rng = _rng(profile.seed, _id_key(scene.image_id), 1 + index)
    offset, junk = _draw(profile, scene, rng, extra_sigma=profile.sigma_equiv)
    if scene.corrupted:
        return transform.apply(junk)
    return transform.apply(scene.keypoints) + abs(transform.scale) * offset


def detect_with_transforms(profile: DetectorProfile, scene: SceneTruth, transforms) -> DetectionRecord:
    rec = detect(profile, scene)
    preds = tuple((t, detect_transformed(profile, scene, t, j)) for j, t in enumerate(transforms))
    return DetectionRecord(rec.image_id, rec.detector, rec.keypoints, rec.conf, rec.bbox, preds, rec.provenance)


def box_detection(scene: SceneTruth, seed: int = 0) -> BoxDetection:
    """Emulated object-detector output: clean scenes score high, corrupted ones anywhere in [0.5, 1]."""
    rng = _rng(seed, _id_key(scene.image_id), 99)
    lo = 0.5 if scene.corrupted else 0.94
    return BoxDetection(scene.image_id, scene.bbox, float(rng.uniform(lo, 1.0)))


# --------------------------------------------------------------------------- #
# images
# --------------------------------------------------------------------------- #


def render_image(scene: SceneTruth, size: int = 48, seed: int = 0) -> np.ndarray:
    """Tiny grayscale stand-in image: keypoint blobs over a random block texture.

    Duplicated scenes render the same picture up to a uniform brightness
    offset, like a recompressed re-upload.
    """
    src = scene.duplicate_of or scene.image_id
    rng = _rng(seed, _id_key(src), 7)
    blocks = rng.uniform(20.0, 120.0, size=(6, 6))
    cell = -(-size // 6)
    img = np.kron(blocks, np.ones((cell, cell)))[:size, :size]
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    x0, y0, w, h = scene.bbox
    m = max(w, h)
    pts = (scene.keypoints - np.array([x0, y0])) / m * (0.8 * size) + 0.1 * size
    blobs = sum(np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / 6.0) for px, py in pts)
    # saturating blend keeps values in [14, 206], so the offset below never clips
    img = img + 80.0 * (1.0 - np.exp(-blobs))
    if scene.duplicate_of is not None:
        img = img + float(_rng(seed, _id_key(scene.image_id), 8).integers(-6, 7))
    return np.rint(img).astype(np.int64)
