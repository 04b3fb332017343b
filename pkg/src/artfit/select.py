"""Pseudo-label selection: score unlabeled records and keep the best N.

Four criteria are available.  ``kp-conf`` ranks by the detector's summed
keypoint confidence (higher is better).  The consistency criteria measure a
mean per-keypoint discrepancy (lower is better):

* ``cf-mt``: one detector against its own predictions on rotated and
  rescaled copies of the image, mapped back to the original frame;
* ``cf-cm``: two detectors against each other;
* ``cf-cm2``: a detector against the reprojected keypoints of a template
  fitted to the other detector's keypoints.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .fit import (
    DegenerateConfiguration,
    FitConfig,
    PoseParams,
    fit_batch,
    init_camera,
)
from .geometry import Similarity2D, TemplateModel


class Criterion(str, enum.Enum):
    KP_CONF = "kp-conf"
    CF_MT = "cf-mt"
    CF_CM = "cf-cm"
    CF_CM2 = "cf-cm2"

    @property
    def higher_is_better(self) -> bool:
        return self is Criterion.KP_CONF


@dataclass(frozen=True)
class CriterionScore:
    image_id: str
    criterion: Criterion
    value: float

    def __post_init__(self):
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        if not math.isfinite(self.value):
            raise ValueError(f"{self.image_id}: score must be finite, got {self.value}")
        if not self.criterion.higher_is_better and self.value < 0:
            raise ValueError(f"{self.image_id}: discrepancy must be >= 0, got {self.value}")


@dataclass(frozen=True)
class SelectionReport:
    criterion: Criterion
    n: int
    ranked: tuple          # image ids, best first
    scores: tuple          # values aligned with ``ranked``
    selected: tuple        # bools aligned with ``ranked``
    shortfall: bool = False

    @property
    def selected_ids(self) -> list:
        return [i for i, s in zip(self.ranked, self.selected) if s]

    def rows(self) -> list:
        return [
            {"image_id": i, "criterion": self.criterion.value, "rank": r, "score": v, "selected": s}
            for r, (i, v, s) in enumerate(zip(self.ranked, self.scores, self.selected))
        ]


def _pair(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"keypoint arrays must both be k x 2, got {a.shape} and {b.shape}")
    return a, b


def kp_conf_score(rec) -> float:
    return float(np.sum(rec.conf))


def cf_mt_score(base, transformed_preds) -> float:
    """Mean distance between ``base`` and each prediction mapped back through its transform."""
    transformed_preds = list(transformed_preds)
    if not transformed_preds:
        raise ValueError("need at least one transformed prediction")
    dists = []
    for t, pred in transformed_preds:
        if not isinstance(t, Similarity2D):
            t = Similarity2D(*t)
        b, back = _pair(base, t.inverse_apply(pred))
        dists.append(np.linalg.norm(b - back, axis=1))
    return float(np.mean(dists))


def cf_cm_score(pred_h, pred_g) -> float:
    a, b = _pair(pred_h, pred_g)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def cf_cm2_score(pred_h, model: TemplateModel, params: PoseParams) -> float:
    return cf_cm_score(pred_h, params.keypoints2d(model))


def select_top_n(scores, n: int) -> SelectionReport:
    """Rank by score (direction set by the criterion), ties by ascending image id."""
    if n < 0:
        raise ValueError("N must be >= 0")
    scores = list(scores)
    crits = {s.criterion for s in scores}
    if len(crits) > 1:
        raise ValueError(f"scores mix criteria {sorted(c.value for c in crits)}")
    crit = crits.pop() if crits else Criterion.CF_CM
    ids = [s.image_id for s in scores]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids in scores")
    sign = -1.0 if crit.higher_is_better else 1.0
    ordered = sorted(scores, key=lambda s: (sign * s.value, s.image_id))
    k = min(n, len(ordered))
    return SelectionReport(
        criterion=crit,
        n=n,
        ranked=tuple(s.image_id for s in ordered),
        scores=tuple(s.value for s in ordered),
        selected=tuple(r < k for r in range(len(ordered))),
        shortfall=n > len(ordered),
    )


def default_transforms(center=(0.0, 0.0)) -> tuple:
    """Rotations of +-30 degrees and scalings of 0.75 and 1.25 about ``center``."""
    return (
        Similarity2D(1.0, 30.0, center),
        Similarity2D(1.0, -30.0, center),
        Similarity2D(0.75, 0.0, center),
        Similarity2D(1.25, 0.0, center),
    )


def bbox_center(bbox) -> tuple:
    x, y, w, h = bbox
    return (x + w / 2.0, y + h / 2.0)


# --------------------------------------------------------------------------- #
# scoring whole pools
# --------------------------------------------------------------------------- #


def fit_to_records(records, model: TemplateModel, cfg: FitConfig = FitConfig()) -> list:
    """Fit the template to each record's keypoints (confidence-weighted).

    Cameras come from :func:`init_camera` on the rest keypoints; a record
    whose confidences make that degenerate falls back to uniform weights
    for the initialization only.
    """
    obs = [r.observation() for r in records]
    rest = model.rest_keypoints()
    inits = []
    for o in obs:
        try:
            cam = init_camera(rest, o)
        except DegenerateConfiguration:
            cam = init_camera(rest, o.with_conf(np.ones_like(o.conf)))
        inits.append(PoseParams.rest(model, cam, cfg.mode))
    return fit_batch(obs, model, inits, cfg)


def score_records(criterion, primary: list, auxiliary: list | None = None,
                  model: TemplateModel | None = None, cfg: FitConfig = FitConfig(),
                  fits: list | None = None) -> list:
    """Scores for aligned record lists (same image ids in the same order).

    ``cf-mt`` needs ``transformed`` predictions on the primary records;
    ``cf-cm`` needs ``auxiliary``; ``cf-cm2`` needs ``auxiliary`` and
    ``model`` unless ``fits`` (one :class:`FitResult` per record) is given.
    """
    crit = Criterion(criterion)
    if auxiliary is not None:
        if [r.image_id for r in primary] != [r.image_id for r in auxiliary]:
            raise ValueError("primary and auxiliary records are not aligned by image id")
    if crit is Criterion.KP_CONF:
        vals = [kp_conf_score(r) for r in primary]
    elif crit is Criterion.CF_MT:
        missing = [r.image_id for r in primary if not r.transformed]
        if missing:
            raise ValueError(f"cf-mt needs transformed predictions; missing for {missing[:3]}")
        vals = [cf_mt_score(r.keypoints, r.transformed) for r in primary]
    elif crit is Criterion.CF_CM:
        if auxiliary is None:
            raise ValueError("cf-cm needs a second detector's records")
        vals = [cf_cm_score(p.keypoints, a.keypoints) for p, a in zip(primary, auxiliary)]
    else:
        if model is None:
            raise ValueError("cf-cm2 needs the template")
        if fits is None:
            if auxiliary is None:
                raise ValueError("cf-cm2 needs auxiliary records and a template (or precomputed fits)")
            fits = fit_to_records(auxiliary, model, cfg)
        vals = [cf_cm2_score(p.keypoints, model, f.params) for p, f in zip(primary, fits)]
    return [CriterionScore(r.image_id, crit, float(v)) for r, v in zip(primary, vals)]
