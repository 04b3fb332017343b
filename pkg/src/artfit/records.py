"""Record types exchanged between pipeline stages, and their JSONL encoding.

Every file is UTF-8 JSONL, one JSON object per line.  Readers raise
:class:`RecordError` naming the file and 1-based line of the first bad row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fit import KeypointObservation, PoseParams
from .geometry import Similarity2D


class RecordError(ValueError):
    pass


def _bbox(v) -> tuple:
    b = tuple(float(x) for x in v)
    if len(b) != 4 or b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"bbox must be [x, y, w, h] with positive size, got {list(v)}")
    return b


def _points(v) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"keypoints must be a list of [x, y] pairs, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class DetectionRecord:
    """Keypoint estimates of one detector on one image.

    ``transformed`` optionally carries predictions made on augmented copies
    of the image, as ``(transform, k x 2 keypoints in the transformed frame)``.
    """

    image_id: str
    detector: str
    keypoints: np.ndarray
    conf: np.ndarray
    bbox: tuple
    transformed: tuple = ()
    provenance: dict = field(default_factory=dict)

    def observation(self) -> KeypointObservation:
        return KeypointObservation(self.keypoints, self.conf, self.bbox)

    def to_dict(self) -> dict:
        d = {
            "image_id": self.image_id,
            "detector": self.detector,
            "keypoints": self.keypoints.tolist(),
            "conf": self.conf.tolist(),
            "bbox": list(self.bbox),
        }
        if self.transformed:
            d["transformed"] = [{"transform": t.to_dict(), "keypoints": kp.tolist()} for t, kp in self.transformed]
        if self.provenance:
            d["provenance"] = self.provenance
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionRecord":
        kp = _points(d["keypoints"])
        conf = np.asarray(d["conf"], dtype=float)
        if conf.shape != (len(kp),) or np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("conf must hold one value in [0, 1] per keypoint")
        transformed = tuple(
            (Similarity2D.from_dict(t["transform"]), _points(t["keypoints"])) for t in d.get("transformed", ())
        )
        return cls(str(d["image_id"]), str(d["detector"]), kp, conf, _bbox(d["bbox"]), transformed,
                   dict(d.get("provenance", {})))


@dataclass(frozen=True)
class BoxDetection:
    image_id: str
    bbox: tuple
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "bbox": list(self.bbox), "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxDetection":
        return cls(str(d["image_id"]), _bbox(d["bbox"]), float(d["score"]))


@dataclass(frozen=True)
class SceneTruth:
    """Simulator ground truth for one image; read only by oracles and evaluation."""

    image_id: str
    params: PoseParams
    keypoints: np.ndarray
    bbox: tuple
    corrupted: bool = False
    noise_sigma: np.ndarray = None
    category: str = "quadruped"
    duplicate_of: str | None = None

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "category": self.category,
            "params": self.params.to_dict(),
            "keypoints": self.keypoints.tolist(),
            "bbox": list(self.bbox),
            "corrupted": self.corrupted,
            "noise_sigma": None if self.noise_sigma is None else self.noise_sigma.tolist(),
            "duplicate_of": self.duplicate_of,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneTruth":
        ns = d.get("noise_sigma")
        return cls(
            str(d["image_id"]),
            PoseParams.from_dict(d["params"]),
            _points(d["keypoints"]),
            _bbox(d["bbox"]),
            bool(d.get("corrupted", False)),
            None if ns is None else np.asarray(ns, dtype=float),
            str(d.get("category", "quadruped")),
            d.get("duplicate_of"),
        )


@dataclass(frozen=True)
class FitRecord:
    image_id: str
    params: PoseParams
    final_loss: float
    iterations: int
    converged: bool
    category: str = "quadruped"

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id, "category": self.category}
        d.update(self.params.to_dict())
        d.update({"final_loss": self.final_loss, "iterations": self.iterations, "converged": self.converged})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitRecord":
        return cls(str(d["image_id"]), PoseParams.from_dict(d), float(d["final_loss"]),
                   int(d["iterations"]), bool(d["converged"]), str(d.get("category", "quadruped")))


# --------------------------------------------------------------------------- #
# JSONL
# --------------------------------------------------------------------------- #


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, rows) -> None:
    """Write dicts (or objects with ``to_dict``) one per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row.to_dict() if hasattr(row, "to_dict") else row))
            fh.write("\n")


def read_jsonl(path, parse=None) -> list:
    """Read a JSONL file, optionally converting each row with ``parse``."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise ValueError("row is not a JSON object")
                out.append(parse(row) if parse else row)
            except (ValueError, KeyError, TypeError) as exc:
                raise RecordError(f"{path}:{lineno}: {type(exc).__name__}: {exc}") from exc
    return out
