"""Linear-blend-skinned body model with shape blendshapes and joint regressors.

A generic stand-in for SMPL: 24-joint tree, template mesh, 10 shape
directions, skinning weights, a model joint regressor (24 x V) and an
evaluation regressor (17 x V, Human3.6M joint order). Pose-dependent
blendshapes are not modelled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, DimensionError
from .kinematics import (
    SMPL_PARENTS,
    KinematicTree,
    forward_kinematics,
    forward_kinematics_t,
    validate_parents,
)

NUM_BETAS = 10
H36M_JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine",
    "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
# evaluation joint -> {SMPL joint: weight}
H36M_FROM_SMPL = (
    {0: 1.0}, {2: 1.0}, {5: 1.0}, {8: 1.0}, {1: 1.0}, {4: 1.0}, {7: 1.0},
    {3: 0.5, 6: 0.5}, {9: 0.5, 12: 0.5}, {12: 0.5, 15: 0.5}, {15: 1.0},
    {16: 1.0}, {18: 1.0}, {20: 1.0}, {17: 1.0}, {19: 1.0}, {21: 1.0},
)
NUM_EVAL_JOINTS = len(H36M_JOINT_NAMES)

# rest joint positions of the toy skeleton (metres, y up, +x = body left)
_TOY_JOINTS = np.array([
    [0.0, 0.0, 0.0], [0.06, -0.09, 0.0], [-0.06, -0.09, 0.0], [0.0, 0.12, -0.01],
    [0.10, -0.47, 0.01], [-0.10, -0.47, 0.01], [0.0, 0.25, 0.0], [0.09, -0.87, -0.02],
    [-0.09, -0.87, -0.02], [0.0, 0.31, 0.01], [0.11, -0.93, 0.10], [-0.11, -0.93, 0.10],
    [0.0, 0.53, 0.0], [0.08, 0.43, 0.0], [-0.08, 0.43, 0.0], [0.0, 0.62, 0.03],
    [0.18, 0.45, -0.01], [-0.18, 0.45, -0.01], [0.44, 0.45, -0.02], [-0.44, 0.45, -0.02],
    [0.69, 0.45, 0.0], [-0.69, 0.45, 0.0], [0.78, 0.45, 0.0], [-0.78, 0.45, 0.0],
])
_TOY_RADII = np.array([
    0.10, 0.07, 0.07, 0.09, 0.05, 0.05, 0.09, 0.04, 0.04, 0.09, 0.03, 0.03,
    0.05, 0.05, 0.05, 0.09, 0.05, 0.05, 0.04, 0.04, 0.03, 0.03, 0.03, 0.03,
])


@dataclass
class BodyModel:
    parents: np.ndarray
    template: np.ndarray  # V x 3
    blendshapes: np.ndarray  # V x 3 x 10
    skin_weights: np.ndarray  # V x 24
    joint_regressor_model: np.ndarray  # 24 x V
    joint_regressor_eval: np.ndarray  # 17 x V
    faces: np.ndarray | None = None

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        validate_parents(self.parents)
        J = len(self.parents)
        V = len(self.template)
        checks = [
            (self.template.shape == (V, 3), "template"),
            (self.blendshapes.shape == (V, 3, NUM_BETAS), "blendshapes"),
            (self.skin_weights.shape == (V, J), "skin_weights"),
            (self.joint_regressor_model.shape == (J, V), "joint_regressor_model"),
            (self.joint_regressor_eval.shape[1:] == (V,), "joint_regressor_eval"),
        ]
        for ok, name in checks:
            if not ok:
                raise DimensionError(f"body model field {name!r} has inconsistent shape")
        if V < J:
            raise DataError(f"body model needs at least {J} vertices, has {V}")
        for name in ("skin_weights", "joint_regressor_model", "joint_regressor_eval"):
            rows = getattr(self, name).sum(axis=1)
            if np.abs(rows - 1.0).max() > 1e-6:
                raise DataError(f"rows of {name!r} must sum to 1")

    @property
    def num_vertices(self) -> int:
        return len(self.template)

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def shaped(self, beta) -> np.ndarray:
        beta = np.asarray(beta, np.float64)
        if beta.shape[-1] != NUM_BETAS:
            raise DimensionError(f"beta must have {NUM_BETAS} coefficients, got {beta.shape[-1]}")
        return self.template + np.einsum("vck,...k->...vc", self.blendshapes, beta)

    def rest_joints(self, beta) -> np.ndarray:
        return np.einsum("jv,...vc->...jc", self.joint_regressor_model, self.shaped(beta))

    def tree(self, beta=None) -> KinematicTree:
        J = self.rest_joints(np.zeros(NUM_BETAS) if beta is None else beta)
        off = J - J[self.parents.clip(0)]
        off[0] = 0.0
        return KinematicTree(self.parents, off)

    # ------------------------------------------------------------------ io

    def to_json(self) -> dict:
        doc = {
            "parents": self.parents.tolist(),
            "template": self.template.tolist(),
            "blendshapes": np.transpose(self.blendshapes, (2, 0, 1)).tolist(),
            "skin_weights": self.skin_weights.tolist(),
            "joint_regressor_model": self.joint_regressor_model.tolist(),
            "joint_regressor_eval": self.joint_regressor_eval.tolist(),
        }
        if self.faces is not None:
            doc["faces"] = self.faces.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "BodyModel":
        try:
            faces = doc.get("faces")
            return cls(
                parents=np.asarray(doc["parents"], int),
                template=np.asarray(doc["template"], np.float64),
                blendshapes=np.transpose(np.asarray(doc["blendshapes"], np.float64), (1, 2, 0)),
                skin_weights=np.asarray(doc["skin_weights"], np.float64),
                joint_regressor_model=np.asarray(doc["joint_regressor_model"], np.float64),
                joint_regressor_eval=np.asarray(doc["joint_regressor_eval"], np.float64),
                faces=None if faces is None else np.asarray(faces, int),
            )
        except KeyError as exc:
            raise DataError(f"body model file lacks field {exc.args[0]!r}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "BodyModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def skin(model: BodyModel, beta, rots, root_pos=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Posed vertices for shape ``beta`` and local joint rotations ``(..., 24, 3, 3)``.

    ``root_pos`` is a translation added to the root joint's rest location, so
    zero shape, identity rotations and zero translation give the template.
    """
    rots = np.asarray(rots, np.float64)
    v_shaped = model.shaped(beta)
    J = np.einsum("jv,...vc->...jc", model.joint_regressor_model, v_shaped)
    off = J - J[..., model.parents.clip(0), :]
    off[..., 0, :] = 0.0
    root = J[..., 0, :] + np.asarray(root_pos, np.float64)
    tree = KinematicTree(model.parents, np.zeros((model.num_joints, 3)))
    pos, G = forward_kinematics(tree, rots, root, offsets=off)
    t = pos - np.einsum("...jab,...jb->...ja", G, J)
    Gv = np.einsum("vj,...jab->...vab", model.skin_weights, G)
    tv = np.einsum("vj,...ja->...va", model.skin_weights, t)
    return np.einsum("...vab,...vb->...va", Gv, v_shaped) + tv


def regress_joints(W, mesh) -> np.ndarray:
    W = np.asarray(W, np.float64)
    mesh = np.asarray(mesh, np.float64)
    if W.shape[-1] != mesh.shape[-2]:
        raise DimensionError(f"regressor {W.shape} does not match mesh {mesh.shape}")
    return np.einsum("kv,...vc->...kc", W, mesh)


def skin_t(model: BodyModel, beta, rots, root_relative: bool = False):
    """Differentiable skinning: beta ``(B, 10)``, rots ``(B, 24, 3, 3)``.

    The root joint stays at its shaped rest location, or at the origin with
    ``root_relative``.
    """
    beta = ad.as_tensor(beta)
    V, J = model.num_vertices, model.num_joints
    Bs = ad.Tensor(model.blendshapes.reshape(V * 3, NUM_BETAS).T)
    v_shaped = ad.reshape(ad.matmul(beta, Bs), beta.shape[:-1] + (V, 3)) + ad.Tensor(model.template)
    Jr = ad.matmul(ad.Tensor(model.joint_regressor_model), v_shaped)
    parents = model.parents.clip(0)
    mask = np.ones((J, 1))
    mask[0] = 0.0
    off = (Jr - Jr[..., parents, :]) * ad.Tensor(mask)
    pos, G = forward_kinematics_t(model.parents, rots, off, root_pos=None if root_relative else Jr[..., 0, :])
    GJ = ad.tsum(G * ad.reshape(Jr, Jr.shape[:-1] + (1, 3)), axis=-1)
    t = pos - GJ
    W = ad.Tensor(model.skin_weights)
    Gv = ad.reshape(ad.matmul(W, ad.reshape(G, G.shape[:-3] + (J, 9))), G.shape[:-3] + (V, 3, 3))
    tv = ad.matmul(W, t)
    posed = ad.tsum(Gv * ad.reshape(v_shaped, v_shaped.shape[:-1] + (1, 3)), axis=-1)
    return posed + tv


def regress_joints_t(W, mesh):
    return ad.matmul(ad.Tensor(np.asarray(W)), mesh)


# ------------------------------------------------------------------ toy model


def toy_body_model(seed: int = 0) -> BodyModel:
    """Procedural 24-joint body model with ~420 vertices.

    Each joint gets six vertices on its axis-aligned sphere (their mean is the
    joint, which defines the model regressor); every bone gets rings of four
    vertices at 1/4, 1/2 and 3/4 of its length. Shape directions are smooth
    random fields, orthogonalised and scaled to ~2 cm RMS per unit coefficient.
    """
    rng = np.random.default_rng(seed)
    parents = SMPL_PARENTS
    J = len(parents)
    verts, weights = [], []
    ring_ids: list[list[int]] = []
    dirs6 = np.concatenate([np.eye(3), -np.eye(3)])
    for j in range(J):
        ids = []
        for d in dirs6:
            ids.append(len(verts))
            verts.append(_TOY_JOINTS[j] + _TOY_RADII[j] * d)
            w = np.zeros(J)
            if j == 0:
                w[0] = 1.0
            else:
                w[j] += 0.5
                w[parents[j]] += 0.5
            weights.append(w)
        ring_ids.append(ids)
    for c in range(1, J):
        p = parents[c]
        bone = _TOY_JOINTS[c] - _TOY_JOINTS[p]
        u = bone / np.linalg.norm(bone)
        a = np.cross(u, np.eye(3)[np.argmin(np.abs(u))])
        a /= np.linalg.norm(a)
        b = np.cross(u, a)
        r = 0.5 * (_TOY_RADII[p] + _TOY_RADII[c])
        for f in (0.25, 0.5, 0.75):
            centre = _TOY_JOINTS[p] + f * bone
            for d in (a, b, -a, -b):
                verts.append(centre + r * d)
                w = np.zeros(J)
                w[p] += 1.0 - 0.5 * f
                w[c] += 0.5 * f
                weights.append(w)
    template = np.asarray(verts)
    skin_weights = np.asarray(weights)
    V = len(template)

    reg_model = np.zeros((J, V))
    for j, ids in enumerate(ring_ids):
        reg_model[j, ids] = 1.0 / len(ids)
    reg_eval = np.zeros((NUM_EVAL_JOINTS, V))
    for k, mix in enumerate(H36M_FROM_SMPL):
        for j, w in mix.items():
            reg_eval[k] += w * reg_model[j]

    # smooth random shape fields: low-order polynomial features of rest position
    x = template / 0.5
    feats = np.concatenate([np.ones((V, 1)), x, x**2, x[:, [0]] * x[:, [1]], x[:, [1]] * x[:, [2]],
                            x[:, [0]] * x[:, [2]], np.abs(x[:, [0]])], axis=1)
    fields = np.stack([feats @ rng.normal(size=(feats.shape[1], 3)) for _ in range(NUM_BETAS)])
    q, _ = np.linalg.qr(fields.reshape(NUM_BETAS, -1).T)
    blend = q.T.reshape(NUM_BETAS, V, 3) * (0.02 * np.sqrt(V * 3))
    blendshapes = np.transpose(blend, (1, 2, 0))
    return BodyModel(parents, template, blendshapes, skin_weights, reg_model, reg_eval)


# ----------------------------------------------------------------- obj export


def write_obj(path, vertices, faces=None) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    if faces is not None:
        lines += [f"f {' '.join(str(int(i) + 1) for i in face)}" for face in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")
