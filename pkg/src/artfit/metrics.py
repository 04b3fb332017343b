"""Evaluation metrics: PCK, its normalized area under the curve, and rotation error."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AUC_RANGE = (0.06, 0.1)
N_THRESHOLDS = 17


def default_thresholds() -> np.ndarray:
    return np.linspace(AUC_RANGE[0], AUC_RANGE[1], N_THRESHOLDS)


def _extent(bbox) -> float:
    w, h = float(bbox[2]), float(bbox[3])
    if w <= 0 or h <= 0:
        raise ValueError(f"bbox must have positive size, got {bbox}")
    return max(w, h)


def keypoint_errors(pred, gt) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt shapes differ: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)


def pck(pred, gt, bbox, t: float) -> float:
    """Fraction of keypoints within ``t * max(w, h)`` of the ground truth (inclusive)."""
    if t <= 0:
        raise ValueError("t must be > 0")
    err = keypoint_errors(pred, gt)
    return float(np.mean(err <= t * _extent(bbox)))


@dataclass(frozen=True)
class PckCurve:
    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1 or t.size < 2:
            raise ValueError("need matching 1D thresholds and values, at least two")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("PCK values must lie in [0, 1]")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "values", v)


def pck_curve(errors_over_extent, thresholds=None) -> PckCurve:
    """PCK curve from per-keypoint errors already divided by ``max(w, h)``."""
    t = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=float)
    e = np.asarray(errors_over_extent, dtype=float).ravel()
    vals = np.array([np.mean(e <= ti) if e.size else 0.0 for ti in t])
    return PckCurve(t, vals)


def auc(curve: PckCurve, a1: float = AUC_RANGE[0], a2: float = AUC_RANGE[1]) -> float:
    """Trapezoidal area under the PCK curve on [a1, a2], divided by the width, in percent."""
    t, v = curve.thresholds, curve.values
    tol = 1e-12
    if t[0] > a1 + tol or t[-1] < a2 - tol:
        raise ValueError(f"curve covers [{t[0]}, {t[-1]}], need [{a1}, {a2}]")
    inner = (t > a1) & (t < a2)
    ts = np.concatenate([[a1], t[inner], [a2]])
    vs = np.interp(ts, t, v)
    area = float(np.sum((ts[1:] - ts[:-1]) * (vs[1:] + vs[:-1]) / 2.0))
    return 100.0 * area / (a2 - a1)


def rot_err(R_hat, R_tilde, tol: float = 1e-6) -> float:
    """Geodesic angle between two rotations, in degrees.

    Equal to ``arccos((tr(R_hat^T R_tilde) - 1) / 2)``, evaluated as an
    ``atan2`` of the antisymmetric and trace parts so that equal rotations
    give exactly 0 instead of the ~1e-6 degrees ``arccos`` loses near 1.
    """
    out = []
    for R in (R_hat, R_tilde):
        R = np.asarray(R, dtype=float)
        if R.shape != (3, 3) or np.max(np.abs(R.T @ R - np.eye(3))) > tol or np.linalg.det(R) < 0:
            raise ValueError("rot_err needs proper orthonormal 3x3 matrices")
        out.append(R)
    M = out[0].T @ out[1]
    c = min(1.0, max(-1.0, (np.trace(M) - 1.0) / 2.0))
    s = 0.5 * math.sqrt((M[2, 1] - M[1, 2]) ** 2 + (M[0, 2] - M[2, 0]) ** 2 + (M[1, 0] - M[0, 1]) ** 2)
    return math.degrees(math.atan2(min(s, 1.0), c))


# --------------------------------------------------------------------------- #
# aggregate report
# --------------------------------------------------------------------------- #

REPORT_COLUMNS = ("category", "N_eval", "AUC", "err_R_mean_deg")


@dataclass(frozen=True)
class ReportRow:
    category: str
    n_eval: int
    auc: float
    err_r_mean_deg: float


@dataclass(frozen=True)
class Report:
    rows: tuple
    warnings: tuple = ()

    def csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.rows:
            lines.append(f"{r.category},{r.n_eval},{r.auc:.6f},{r.err_r_mean_deg:.6f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        head = f"{'category':<16}{'N_eval':>8}{'AUC':>10}{'err_R_mean_deg':>16}"
        body = [f"{r.category:<16}{r.n_eval:>8d}{r.auc:>10.2f}{r.err_r_mean_deg:>16.2f}" for r in self.rows]
        return "\n".join([head, "-" * len(head), *body]) + "\n"


def report(fits: dict, truths: dict, model) -> Report:
    """Per-category AUC (pooled over all keypoints) and mean camera rotation error.

    ``fits`` maps image id to fitted :class:`PoseParams`; ``truths`` maps
    image id to :class:`SceneTruth` (or anything with ``keypoints``,
    ``bbox``, ``category`` and ``params``).  Ids present on only one side
    are skipped with a warning each.
    """
    warnings = []
    for i in sorted(set(fits) - set(truths)):
        warnings.append(f"{i}: fitted but has no ground truth")
    for i in sorted(set(truths) - set(fits)):
        warnings.append(f"{i}: ground truth but no fit")
    common = sorted(set(fits) & set(truths))
    if not common:
        warnings.append("nothing to evaluate")
    by_cat: dict[str, list] = {}
    for i in common:
        by_cat.setdefault(truths[i].category, []).append(i)
    rows = []
    for cat in sorted(by_cat):
        errs, rots = [], []
        for i in by_cat[cat]:
            gt = truths[i]
            pred = fits[i].keypoints2d(model)
            errs.append(keypoint_errors(pred, gt.keypoints) / _extent(gt.bbox))
            rots.append(rot_err(fits[i].camera.rotation, gt.params.camera.rotation))
        a = auc(pck_curve(np.concatenate(errs)))
        rows.append(ReportRow(cat, len(by_cat[cat]), a, float(np.mean(rots))))
    return Report(tuple(rows), tuple(warnings))
