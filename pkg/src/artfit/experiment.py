"""Does consistency filtering of pseudo-labels help downstream camera estimation?

A rigid 3D keypoint shape is learned by confidence-weighted structure from
motion over a pool of pseudo-labels, once from every record and once from a
subset chosen by a selection criterion.  Each shape then initializes the
camera of held-out, clean evaluation scenes from their detections, and the
resulting reprojected keypoints and rotations are scored against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, simulate
from .fit import DegenerateConfiguration, estimate_keypoint_shape, init_camera
from .geometry import TemplateModel, project
from .select import bbox_center, default_transforms, score_records, select_top_n


@dataclass(frozen=True)
class ShapeEvaluation:
    auc: float
    err_r_mean_deg: float
    n_eval: int
    n_train: int


@dataclass(frozen=True)
class SelectionComparison:
    seed: int
    all_records: ShapeEvaluation
    selected: ShapeEvaluation

    @property
    def selected_wins(self) -> bool:
        return (self.selected.auc > self.all_records.auc
                and self.selected.err_r_mean_deg < self.all_records.err_r_mean_deg)


def evaluate_shape(shape: np.ndarray, profile: simulate.DetectorProfile, scenes, n_train: int) -> ShapeEvaluation:
    errs, rots = [], []
    for s in scenes:
        obs = simulate.detect(profile, s).observation()
        try:
            cam = init_camera(shape, obs)
        except DegenerateConfiguration:
            continue
        errs.append(metrics.keypoint_errors(project(cam, shape), s.keypoints) / max(s.bbox[2], s.bbox[3]))
        rots.append(metrics.rot_err(cam.rotation, s.params.camera.rotation))
    if not errs:
        raise ValueError("no evaluation scene could be solved")
    return ShapeEvaluation(metrics.auc(metrics.pck_curve(np.concatenate(errs))), float(np.mean(rots)),
                           len(errs), n_train)


def compare_selection(model: TemplateModel, seed: int, *, pool_size: int = 300, corruption_rate: float = 0.3,
                      keep_fraction: float = 0.5, n_eval: int = 60, criterion: str = "cf-cm") -> SelectionComparison:
    pool = simulate.make_pool(model, pool_size, corruption_rate, seed)
    held_out = simulate.make_pool(model, n_eval, 0.0, seed + 10_000, prefix="eval")
    primary, auxiliary = simulate.default_profiles(seed)
    if criterion == "cf-mt":
        prim = [simulate.detect_with_transforms(primary, s, default_transforms(bbox_center(s.bbox))) for s in pool]
    else:
        prim = [simulate.detect(primary, s) for s in pool]
    aux = [simulate.detect(auxiliary, s) for s in pool]
    scores = score_records(criterion, prim, aux, model)
    keep = set(select_top_n(scores, int(round(keep_fraction * pool_size))).selected_ids)

    rest = model.rest_keypoints()
    out = []
    for recs in (prim, [r for r in prim if r.image_id in keep]):
        shape, _ = estimate_keypoint_shape([r.observation() for r in recs], rest)
        out.append(evaluate_shape(shape, primary, held_out, len(recs)))
    return SelectionComparison(seed, out[0], out[1])
