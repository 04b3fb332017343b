"""Rotations, part kinematics, skinning and weak-perspective projection.

Quaternions are numpy arrays in (w, x, y, z) order with the Hamilton product.
Constructors return them normalized with a non-negative scalar part.
Rigid transforms are passed around as ``(R, t)`` pairs acting as ``R @ v + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


class StructureError(ValueError):
    """Raised when a part tree, articulation or template is malformed."""


# --------------------------------------------------------------------------- #
# quaternions
# --------------------------------------------------------------------------- #


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    if np.any(n < _EPS):
        raise ValueError("cannot normalize a zero quaternion")
    q = q / n
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(q1, q2) -> np.ndarray:
    """Hamilton product ``q1 * q2`` (apply q2 first, then q1)."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < _EPS:
        return quat_identity()
    half = 0.5 * angle
    return quat_normalize(np.concatenate([[np.cos(half)], np.sin(half) * axis / n]))


def quat_exp(omega) -> np.ndarray:
    """Map a rotation vector (axis * angle) to a unit quaternion.

    Works on a single 3-vector or a stack of shape ``(..., 3)``.  Small angles
    use the Taylor expansion of ``sin(x)/x`` so the map stays smooth at zero.
    """
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    q = np.concatenate([np.cos(half), k * omega], axis=-1)
    return quat_normalize(q)


def quat_log(q) -> np.ndarray:
    """Rotation vector of a unit quaternion; inverse of :func:`quat_exp`."""
    q = quat_normalize(q)
    w = np.clip(q[..., :1], -1.0, 1.0)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, s))
    return scale * v


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R) -> np.ndarray:
    """Quaternion of a rotation matrix (Shepperd's method, single matrix)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > max(R[0, 0], R[1, 1], R[2, 2]):
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] >= R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def rotate(q, X) -> np.ndarray:
    """Rotate a point (or an ``(n, 3)`` array of points) by quaternion ``q``."""
    X = np.asarray(X, dtype=float)
    return X @ quat_to_matrix(q).T


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# --------------------------------------------------------------------------- #
# camera
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class WeakPerspectiveCamera:
    scale: float
    trans: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"camera scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float).reshape(2))
        object.__setattr__(self, "quat", quat_normalize(np.asarray(self.quat, dtype=float).reshape(4)))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def translated(self, d) -> "WeakPerspectiveCamera":
        return WeakPerspectiveCamera(self.scale, self.trans + np.asarray(d, dtype=float), self.quat)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "trans": self.trans.tolist(), "quat": self.quat.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WeakPerspectiveCamera":
        return cls(d["scale"], d["trans"], d["quat"])


def project(cam: WeakPerspectiveCamera, X) -> np.ndarray:
    """Weak-perspective projection: rotate, drop depth, scale, translate."""
    X = np.asarray(X, dtype=float)
    Y = X @ cam.rotation.T
    return cam.scale * Y[..., :2] + cam.trans


# --------------------------------------------------------------------------- #
# part tree and kinematics
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PartTree:
    """Single-rooted part hierarchy.

    ``parents[p]`` is the index of the parent of part ``p`` (``-1`` for the
    root).  ``pivots[p]`` is the rest-pose joint location about which the
    part's local rotation acts, expressed in template coordinates.
    """

    names: tuple
    parents: tuple
    pivots: np.ndarray = None
    order: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        parents = tuple(int(p) for p in self.parents)
        n = len(names)
        if n == 0:
            raise StructureError("part tree is empty")
        if len(parents) != n:
            raise StructureError("names and parents differ in length")
        if len(set(names)) != n:
            raise StructureError("part names must be unique")
        roots = [i for i, p in enumerate(parents) if p == -1]
        if len(roots) != 1:
            raise StructureError(f"part tree must have exactly one root, found {len(roots)}")
        if any(p < -1 or p >= n or p == i for i, p in enumerate(parents)):
            raise StructureError("parent index out of range")
        pivots = np.zeros((n, 3)) if self.pivots is None else np.asarray(self.pivots, dtype=float)
        if pivots.shape != (n, 3):
            raise StructureError(f"pivots must be ({n}, 3), got {pivots.shape}")

        # breadth-first order from the root; parts not reached sit on a cycle
        children = [[] for _ in range(n)]
        for i, p in enumerate(parents):
            if p >= 0:
                children[p].append(i)
        order = [roots[0]]
        for i in order:
            order.extend(children[i])
        if len(order) != n:
            raise StructureError("part tree contains a cycle")

        object.__setattr__(self, "names", names)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "pivots", pivots)
        object.__setattr__(self, "order", tuple(order))

    def __len__(self):
        return len(self.names)

    @property
    def root(self) -> int:
        return self.order[0]

    def to_list(self) -> list:
        return [
            {"name": n, "parent": p, "pivot": pv.tolist()}
            for n, p, pv in zip(self.names, self.parents, self.pivots)
        ]

    @classmethod
    def from_list(cls, parts: list) -> "PartTree":
        return cls(
            names=[d["name"] for d in parts],
            parents=[d["parent"] for d in parts],
            pivots=[d.get("pivot", [0.0, 0.0, 0.0]) for d in parts],
        )


@dataclass(frozen=True)
class Articulation:
    """Per-part rigid transforms relative to the parent part.

    ``rotations`` is ``(P, 4)`` unit quaternions, ``translations`` is ``(P, 3)``.
    """

    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotations, dtype=float)
        tr = np.asarray(self.translations, dtype=float)
        if rot.ndim != 2 or rot.shape[1] != 4 or tr.shape != (rot.shape[0], 3):
            raise StructureError(f"bad articulation shapes {rot.shape}, {tr.shape}")
        object.__setattr__(self, "rotations", quat_normalize(rot))
        object.__setattr__(self, "translations", tr)

    def __len__(self):
        return self.rotations.shape[0]

    @classmethod
    def identity(cls, n_parts: int) -> "Articulation":
        return cls(np.tile(quat_identity(), (n_parts, 1)), np.zeros((n_parts, 3)))

    def to_dict(self) -> dict:
        return {"rotations": self.rotations.tolist(), "translations": self.translations.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Articulation":
        return cls(d["rotations"], d["translations"])


def local_transforms(parts: PartTree, delta: Articulation):
    """Local (R, t) of every part, with each rotation acting about its pivot."""
    if len(delta) != len(parts):
        raise StructureError(f"articulation has {len(delta)} entries for {len(parts)} parts")
    R = quat_to_matrix(delta.rotations)
    j = parts.pivots
    t = j + delta.translations - np.einsum("pij,pj->pi", R, j)
    return R, t


def forward_kinematics(parts: PartTree, delta: Articulation):
    """Global per-part transforms; returns arrays ``R (P, 3, 3)`` and ``t (P, 3)``."""
    R_loc, t_loc = local_transforms(parts, delta)
    R = np.empty_like(R_loc)
    t = np.empty_like(t_loc)
    for p in parts.order:
        par = parts.parents[p]
        if par < 0:
            R[p], t[p] = R_loc[p], t_loc[p]
        else:
            R[p] = R[par] @ R_loc[p]
            t[p] = R[par] @ t_loc[p] + t[par]
    return R, t


# --------------------------------------------------------------------------- #
# template
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TemplateModel:
    vertices: np.ndarray
    faces: np.ndarray
    parts: PartTree
    memberships: np.ndarray
    regressor: np.ndarray
    kp_names: tuple = ()
    name: str = "template"

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        F = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        a = np.asarray(self.memberships, dtype=float)
        A = np.asarray(self.regressor, dtype=float)
        nv, npart = V.shape[0], len(self.parts)
        if V.ndim != 2 or V.shape[1] != 3:
            raise StructureError(f"vertices must be (V, 3), got {V.shape}")
        if F.size and (F.min() < 0 or F.max() >= nv):
            raise StructureError("face index out of range")
        if a.shape != (nv, npart):
            raise StructureError(f"memberships must be ({nv}, {npart}), got {a.shape}")
        if np.any(a < 0) or not np.allclose(a.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise StructureError("membership rows must be nonnegative and sum to 1")
        if A.ndim != 2 or A.shape[1] != nv:
            raise StructureError(f"regressor must be (k, {nv}), got {A.shape}")
        if np.any(A < 0) or not np.allclose(A.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise StructureError("regressor rows must be nonnegative and sum to 1")
        kp_names = tuple(self.kp_names) or tuple(f"kp{i}" for i in range(A.shape[0]))
        if len(kp_names) != A.shape[0]:
            raise StructureError("kp_names length does not match regressor rows")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)
        object.__setattr__(self, "memberships", a)
        object.__setattr__(self, "regressor", A)
        object.__setattr__(self, "kp_names", kp_names)

    @property
    def n_keypoints(self) -> int:
        return self.regressor.shape[0]

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def rest_keypoints(self) -> np.ndarray:
        return keypoints3d(self.regressor, self.vertices)


def skin(model: TemplateModel, transforms) -> np.ndarray:
    """Blend per-part global transforms by vertex memberships."""
    R, t = transforms
    moved = np.einsum("pij,vj->vpi", R, model.vertices) + t[None, :, :]
    return np.einsum("vp,vpi->vi", model.memberships, moved)


def pose_vertices(model: TemplateModel, delta: Articulation) -> np.ndarray:
    return skin(model, forward_kinematics(model.parts, delta))


def deform(model: TemplateModel, displacement) -> np.ndarray:
    d = np.asarray(displacement, dtype=float)
    if d.shape != model.vertices.shape:
        raise StructureError(f"displacement shape {d.shape} != vertices {model.vertices.shape}")
    return model.vertices + d


def keypoints3d(A, V) -> np.ndarray:
    return np.asarray(A, dtype=float) @ np.asarray(V, dtype=float)


# --------------------------------------------------------------------------- #
# 2D similarity transforms (image augmentations)
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Similarity2D:
    """``x -> scale * R(angle) @ (x - center) + center + shift`` in image coordinates."""

    scale: float = 1.0
    angle_deg: float = 0.0
    center: tuple = (0.0, 0.0)
    shift: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale == 0:
            raise ValueError(f"similarity with scale {self.scale} is not invertible")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "shift", tuple(float(c) for c in self.shift))

    @property
    def matrix(self) -> np.ndarray:
        a = np.radians(self.angle_deg)
        c, s = np.cos(a), np.sin(a)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        c = np.array(self.center)
        return (x - c) @ self.matrix.T + c + np.array(self.shift)

    def inverse_apply(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        c = np.array(self.center)
        return (y - c - np.array(self.shift)) @ np.linalg.inv(self.matrix).T + c

    def to_dict(self) -> dict:
        return {"scale": self.scale, "angle_deg": self.angle_deg,
                "center": list(self.center), "shift": list(self.shift)}

    @classmethod
    def from_dict(cls, d: dict) -> "Similarity2D":
        return cls(d["scale"], d["angle_deg"], tuple(d["center"]), tuple(d.get("shift", (0.0, 0.0))))
