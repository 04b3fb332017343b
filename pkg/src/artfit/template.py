"""Template construction and the ``model.obj`` + ``model.meta.json`` format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import PartTree, StructureError, TemplateModel

# Pascal-style quadruped keypoints.
QUADRUPED_KEYPOINTS = (
    "L_eye", "R_eye", "L_ear", "R_ear", "nose", "throat", "tail_base", "withers",
    "L_F_elbow", "R_F_elbow", "L_B_elbow", "R_B_elbow",
    "L_F_paw", "R_F_paw", "L_B_paw", "R_B_paw",
)


def _tube(p0, p1, half_z, half_v, n_rings):
    """Box-section tube from p0 to p1; four vertices per ring.

    Ring vertex order is (+z, +v), (-z, +v), (-z, -v), (+z, -v), where z is the
    lateral (left) axis and v is perpendicular to both z and the tube axis.
    """
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = (p1 - p0) / np.linalg.norm(p1 - p0)
    ez = np.array([0.0, 0.0, 1.0])
    v = np.cross(ez, d)
    v /= np.linalg.norm(v)
    corners = [(1, 1), (-1, 1), (-1, -1), (1, -1)]
    verts = []
    for r in range(n_rings):
        c = p0 + (p1 - p0) * r / (n_rings - 1)
        for sz, sv in corners:
            verts.append(c + sz * half_z * ez + sv * half_v * v)
    faces = []
    for r in range(n_rings - 1):
        a, b = 4 * r, 4 * (r + 1)
        for i in range(4):
            j = (i + 1) % 4
            faces += [(a + i, a + j, b + j), (a + i, b + j, b + i)]
    last = 4 * (n_rings - 1)
    faces += [(0, 2, 1), (0, 3, 2), (last, last + 1, last + 2), (last, last + 2, last + 3)]
    return np.array(verts), np.array(faces)


def quadruped() -> TemplateModel:
    """A coarse four-legged animal: torso, neck, head, tail and four legs.

    x points forward (towards the head), y up, z to the animal's left.
    The first ring of every non-root part is blended half-and-half with its
    parent so joints bend smoothly.
    """
    # name, parent, pivot, p0, p1, half_z, half_v, rings
    spec = [
        ("torso", -1, (0.0, 0.1, 0.0), (-0.5, 0.1, 0.0), (0.5, 0.1, 0.0), 0.15, 0.15, 4),
        ("neck", 0, (0.45, 0.2, 0.0), (0.45, 0.2, 0.0), (0.7, 0.5, 0.0), 0.07, 0.07, 3),
        ("head", 1, (0.7, 0.5, 0.0), (0.68, 0.52, 0.0), (0.98, 0.42, 0.0), 0.08, 0.07, 3),
        ("tail", 0, (-0.5, 0.2, 0.0), (-0.5, 0.2, 0.0), (-0.8, 0.0, 0.0), 0.03, 0.03, 3),
        ("leg_LF", 0, (0.38, -0.02, 0.1), (0.38, -0.02, 0.1), (0.38, -0.55, 0.1), 0.04, 0.04, 3),
        ("leg_RF", 0, (0.38, -0.02, -0.1), (0.38, -0.02, -0.1), (0.38, -0.55, -0.1), 0.04, 0.04, 3),
        ("leg_LB", 0, (-0.38, -0.02, 0.1), (-0.38, -0.02, 0.1), (-0.38, -0.55, 0.1), 0.04, 0.04, 3),
        ("leg_RB", 0, (-0.38, -0.02, -0.1), (-0.38, -0.02, -0.1), (-0.38, -0.55, -0.1), 0.04, 0.04, 3),
    ]
    verts, faces, owner, ring_start = [], [], [], {}
    offset = 0
    for p, (name, parent, pivot, p0, p1, hz, hv, rings) in enumerate(spec):
        v, f = _tube(p0, p1, hz, hv, rings)
        ring_start[name] = offset
        verts.append(v)
        faces.append(f + offset)
        owner += [p] * len(v)
        offset += len(v)
    V = np.vstack(verts)
    F = np.vstack(faces)
    n_parts = len(spec)
    a = np.zeros((len(V), n_parts))
    a[np.arange(len(V)), owner] = 1.0
    for p, (name, parent, *_rest) in enumerate(spec):
        if parent >= 0:
            first = ring_start[name] + np.arange(4)
            a[first, p] = 0.5
            a[first, parent] = 0.5

    def ring(name, r):
        return ring_start[name] + 4 * r + np.arange(4)

    rows = {
        "L_eye": ring("head", 1)[[0, 3]],
        "R_eye": ring("head", 1)[[1, 2]],
        "L_ear": ring("head", 0)[[0]],
        "R_ear": ring("head", 0)[[1]],
        "nose": ring("head", 2),
        "throat": ring("neck", 2)[[2, 3]],
        "tail_base": ring("torso", 0)[[0, 1]],
        "withers": ring("torso", 3)[[0, 1]],
        "L_F_elbow": ring("leg_LF", 1),
        "R_F_elbow": ring("leg_RF", 1),
        "L_B_elbow": ring("leg_LB", 1),
        "R_B_elbow": ring("leg_RB", 1),
        "L_F_paw": ring("leg_LF", 2),
        "R_F_paw": ring("leg_RF", 2),
        "L_B_paw": ring("leg_LB", 2),
        "R_B_paw": ring("leg_RB", 2),
    }
    A = np.zeros((len(QUADRUPED_KEYPOINTS), len(V)))
    for i, kp in enumerate(QUADRUPED_KEYPOINTS):
        A[i, rows[kp]] = 1.0 / len(rows[kp])

    parts = PartTree(
        names=[s[0] for s in spec],
        parents=[s[1] for s in spec],
        pivots=[s[2] for s in spec],
    )
    return TemplateModel(V, F, parts, a, A, QUADRUPED_KEYPOINTS, name="quadruped")


def random_template(rng: np.random.Generator, n_parts=4, verts_per_part=5, n_keypoints=6) -> TemplateModel:
    """Small random template for property and gradient tests (no faces needed)."""
    parents = [-1] + [int(rng.integers(0, p)) for p in range(1, n_parts)]
    pivots = rng.normal(size=(n_parts, 3))
    nv = n_parts * verts_per_part
    V = rng.normal(size=(nv, 3))
    a = rng.random((nv, n_parts)) ** 4
    a /= a.sum(axis=1, keepdims=True)
    A = rng.random((n_keypoints, nv)) ** 6
    A /= A.sum(axis=1, keepdims=True)
    faces = np.arange(3 * (nv // 3)).reshape(-1, 3)
    parts = PartTree([f"p{i}" for i in range(n_parts)], parents, pivots)
    return TemplateModel(V, faces, parts, a, A, name="random")


# --------------------------------------------------------------------------- #
# file format
# --------------------------------------------------------------------------- #


def meta_path_for(obj_path) -> Path:
    obj_path = Path(obj_path)
    return obj_path.with_name(obj_path.stem + ".meta.json")


def save_template(model: TemplateModel, obj_path) -> None:
    obj_path = Path(obj_path)
    lines = [f"# {model.name}"]
    lines += ["v {!r} {!r} {!r}".format(*map(float, v)) for v in model.vertices]
    lines += ["f {} {} {}".format(*(int(i) + 1 for i in f)) for f in model.faces]
    obj_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {
        "name": model.name,
        "parts": model.parts.to_list(),
        "memberships": model.memberships.tolist(),
        "regressor": model.regressor.tolist(),
        "kp_names": list(model.kp_names),
    }
    meta_path_for(obj_path).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def read_obj(path):
    """Parse the ``v``/``f`` subset of Wavefront OBJ. Faces are triangulated as fans."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(x.split("/")[0]) - 1 for x in tok[1:]]
                faces += [(idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1)]
        except (ValueError, IndexError) as exc:
            raise StructureError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_template(obj_path) -> TemplateModel:
    V, F = read_obj(obj_path)
    meta = json.loads(meta_path_for(obj_path).read_text(encoding="utf-8"))
    return TemplateModel(
        vertices=V,
        faces=F,
        parts=PartTree.from_list(meta["parts"]),
        memberships=meta["memberships"],
        regressor=meta["regressor"],
        kp_names=meta.get("kp_names", ()),
        name=meta.get("name", Path(obj_path).stem),
    )
