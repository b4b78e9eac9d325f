"""Rotation representations, swing-twist decomposition and forward kinematics.

Quaternions are ``(..., 4)`` arrays ordered ``(w, x, y, z)``. Rotation
matrices act on column vectors. The 6D representation is the first two
matrix columns concatenated, ``(a1, a2)``.

Functions with a ``_t`` suffix are differentiable counterparts operating on
:class:`~occmotion.autodiff.Tensor` inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateInputError

SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)
SMPL_JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)
NUM_JOINTS = 24


# ----------------------------------------------------------------- quaternions


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_canonical(q):
    """Pick the sign with ``w >= 0`` (q and -q are the same rotation)."""
    q = np.asarray(q, np.float64)
    return np.where(q[..., :1] < 0, -q, q)


def quat_rotate(q, v):
    v = np.asarray(v, np.float64)
    vq = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    return quat_mul(quat_mul(q, vq), quat_conj(q))[..., 1:]


def quat_from_axis_angle(aa):
    aa = np.asarray(aa, np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x -> 1/2 as x -> 0
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return np.concatenate([np.cos(half), aa * k], axis=-1)


def quat_to_axis_angle(q):
    q = quat_canonical(quat_normalize(q))
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    k = np.where(s > 1e-12, angle / np.where(s > 1e-12, s, 1.0), 2.0)
    return vec * k


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_from_matrix(R):
    return quat_from_axis_angle(axis_angle_from_matrix(R))


# -------------------------------------------------------------- swing / twist


def swing_twist_decompose(q, axis):
    """Split ``q`` into ``swing * twist`` where twist rotates about ``axis``.

    The result is sign-canonical (``w >= 0``). When the rotation is a half
    turn about an axis perpendicular to ``axis`` the twist is the identity.
    """
    q = quat_canonical(quat_normalize(q))
    axis = np.asarray(axis, np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    proj = np.sum(q[..., 1:] * axis, axis=-1, keepdims=True) * axis
    twist = np.concatenate([q[..., :1], proj], axis=-1)
    norm = np.linalg.norm(twist, axis=-1, keepdims=True)
    ident = np.zeros_like(twist)
    ident[..., 0] = 1.0
    twist = np.where(norm > 1e-12, twist / np.where(norm > 1e-12, norm, 1.0), ident)
    twist = quat_canonical(twist)
    swing = quat_mul(q, quat_conj(twist))
    return swing, twist


def twist_angle(twist, axis):
    """Signed angle of a twist quaternion about ``axis``, in (-pi, pi]."""
    twist = np.asarray(twist, np.float64)
    s = np.sum(twist[..., 1:] * np.asarray(axis, np.float64), axis=-1)
    return 2.0 * np.arctan2(s, twist[..., 0])


def _perpendicular(v):
    """Fixed unit vector orthogonal to ``v``: cross with the basis axis of smallest |component|."""
    v = np.asarray(v, np.float64)
    e = np.zeros(v.shape)
    idx = np.argmin(np.abs(v), axis=-1)
    np.put_along_axis(e, idx[..., None], 1.0, axis=-1)
    p = np.cross(v, e)
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def swing_from_positions(rest_dir, target_dir):
    """Minimal rotation taking unit ``rest_dir`` onto unit ``target_dir``."""
    a = np.asarray(rest_dir, np.float64)
    b = np.asarray(target_dir, np.float64)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    dot = np.clip(np.sum(a * b, axis=-1, keepdims=True), -1.0, 1.0)
    cross = np.cross(a, b)
    # half-angle form: q = (1 + a.b, a x b) normalised
    q = np.concatenate([1.0 + dot, cross], axis=-1)
    anti = (1.0 + dot) < 1e-12
    if np.any(anti):
        perp = _perpendicular(np.broadcast_to(a, q[..., 1:].shape))
        q = np.where(anti, np.concatenate([np.zeros_like(dot), perp], -1), q)
    return quat_normalize(q)


# ------------------------------------------------------- matrices / axis-angle


def rot6d_to_matrix(r):
    """Gram-Schmidt decode of ``(..., 6)`` into ``(..., 3, 3)`` rotation matrices."""
    r = np.asarray(r, np.float64)
    a1, a2 = r[..., :3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-8):
        raise DegenerateInputError("6D rotation has a (near) zero first column")
    b1 = a1 / n1
    u2 = a2 - np.sum(a2 * b1, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= 1e-8):
        raise DegenerateInputError("6D rotation columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R):
    R = np.asarray(R, np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def matrix_from_axis_angle(aa):
    """Rodrigues formula for ``(..., 3)`` axis-angle vectors."""
    aa = np.asarray(aa, np.float64)
    norm = np.linalg.norm(aa, axis=-1, keepdims=True)
    k = aa / np.where(norm > 1e-12, norm, 1.0)
    theta = norm[..., None]
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack(
        [np.stack([zero, -kz, ky], -1), np.stack([kz, zero, -kx], -1), np.stack([-ky, kx, zero], -1)],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)
    return np.where(theta > 1e-12, R, eye)


def axis_angle_from_matrix(R):
    """Inverse Rodrigues; angle in [0, pi]. Near pi the axis comes from the largest diagonal entry."""
    R = np.asarray(R, np.float64)
    tr = np.trace(R, axis1=-2, axis2=-1)
    cos = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    v = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    sin = np.sin(angle)
    out = np.zeros(R.shape[:-2] + (3,))
    regular = sin > 1e-6
    small = angle < 1e-6
    out = np.where(regular[..., None], v * (angle / (2 * np.where(regular, sin, 1.0)))[..., None], out)
    out = np.where(small[..., None], 0.5 * v, out)
    near_pi = ~regular & ~small
    if np.any(near_pi):
        Rp = R[near_pi]
        diag = np.diagonal(Rp, axis1=-2, axis2=-1)
        i = np.argmax(diag, axis=-1)
        axes = np.zeros((len(Rp), 3))
        for n, (Rn, ii) in enumerate(zip(Rp, i)):
            # (R + I) / 2 = a a^T at a half turn; its largest column is best conditioned
            col = (Rn[:, ii] + np.eye(3)[ii]) / 2.0
            a = col / np.linalg.norm(col)
            # resolve sign from the (tiny) antisymmetric part when present
            vv = v[near_pi][n]
            if np.dot(a, vv) < 0:
                a = -a
            axes[n] = a
        out[near_pi] = axes * angle[near_pi][:, None]
    return out


# ------------------------------------------------------------- kinematic tree


@dataclass
class KinematicTree:
    parents: np.ndarray
    rest_offsets: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        validate_parents(self.parents)
        if self.rest_offsets.shape != (len(self.parents), 3):
            raise ValueError(f"rest_offsets shape {self.rest_offsets.shape} does not match tree")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.nonzero(self.parents == j)[0]]

    def rest_positions(self, root_pos=(0.0, 0.0, 0.0)) -> np.ndarray:
        pos, _ = forward_kinematics(self, np.broadcast_to(np.eye(3), (self.num_joints, 3, 3)), root_pos)
        return pos

    def twist_axes(self) -> np.ndarray:
        """Unit bone axis per joint used for twist.

        A joint's axis points to its child (the child with the longest rest
        offset, lowest index on ties); leaf joints use their own incoming bone.
        """
        axes = np.zeros((self.num_joints, 3))
        for j in range(self.num_joints):
            kids = self.children(j)
            if kids:
                lengths = [np.linalg.norm(self.rest_offsets[c]) for c in kids]
                v = self.rest_offsets[kids[int(np.argmax(lengths))]]
            else:
                v = self.rest_offsets[j]
            axes[j] = v / np.linalg.norm(v)
        return axes


def validate_parents(parents) -> None:
    parents = np.asarray(parents)
    roots = np.nonzero(parents < 0)[0]
    if len(roots) != 1 or roots[0] != 0:
        raise ValueError("kinematic tree needs exactly one root at index 0")
    for i, p in enumerate(parents[1:], start=1):
        if not 0 <= p < i:
            raise ValueError(f"joint {i} has parent {p}; parents must precede children")


def forward_kinematics(tree: KinematicTree, local_rots, root_pos=(0.0, 0.0, 0.0), offsets=None):
    """Global joint positions and rotations for ``(..., J, 3, 3)`` local rotations.

    ``offsets`` (``(..., J, 3)``) overrides the tree's rest offsets, e.g. for
    shape-dependent skeletons.
    """
    local_rots = np.asarray(local_rots, np.float64)
    offsets = tree.rest_offsets if offsets is None else np.asarray(offsets, np.float64)
    batch = local_rots.shape[:-3]
    root_pos = np.broadcast_to(np.asarray(root_pos, np.float64), batch + (3,))
    offsets = np.broadcast_to(offsets, batch + (tree.num_joints, 3))
    G = np.empty(local_rots.shape)
    pos = np.empty(batch + (tree.num_joints, 3))
    G[..., 0, :, :] = local_rots[..., 0, :, :]
    pos[..., 0, :] = root_pos
    for i in range(1, tree.num_joints):
        p = tree.parents[i]
        G[..., i, :, :] = G[..., p, :, :] @ local_rots[..., i, :, :]
        pos[..., i, :] = pos[..., p, :] + np.einsum("...ij,...j->...i", G[..., p, :, :], offsets[..., i, :])
    return pos, G


def local_swing_twist(tree: KinematicTree, local_rots):
    """Per-joint (swing, twist) quaternions of local rotations about each joint's bone axis."""
    q = quat_from_matrix(local_rots)
    return swing_twist_decompose(q, tree.twist_axes())


def swing_from_joint_positions(tree: KinematicTree, positions, twist_angles, root_rot=None):
    """Recover local rotations from global joint positions plus known twist angles.

    Walks the tree root-first. For every non-leaf joint the bone to its twist
    child, expressed in the parent frame, fixes the swing analytically; the
    supplied twist angle (radians about the rest bone axis) completes it. Leaf
    joints get a pure twist. The root rotation must be supplied (positions
    alone cannot fix it for a single bone direction).
    """
    positions = np.asarray(positions, np.float64)
    axes = tree.twist_axes()
    J = tree.num_joints
    rots = np.broadcast_to(np.eye(3), positions.shape[:-2] + (J, 3, 3)).copy()
    G = np.empty_like(rots)
    for j in range(J):
        p = tree.parents[j]
        Gp = np.broadcast_to(np.eye(3), positions.shape[:-2] + (3, 3)) if p < 0 else G[..., p, :, :]
        twist_q = quat_from_axis_angle(axes[j] * np.asarray(twist_angles)[..., j, None])
        kids = tree.children(j)
        if j == 0 and root_rot is not None:
            rots[..., 0, :, :] = root_rot
        elif kids:
            lengths = [np.linalg.norm(tree.rest_offsets[c]) for c in kids]
            c = kids[int(np.argmax(lengths))]
            bone = positions[..., c, :] - positions[..., j, :]
            local_dir = np.einsum("...ji,...j->...i", Gp, bone)
            swing = swing_from_positions(np.broadcast_to(axes[j], local_dir.shape), local_dir)
            rots[..., j, :, :] = quat_to_matrix(quat_mul(swing, twist_q))
        else:
            rots[..., j, :, :] = quat_to_matrix(twist_q)
        G[..., j, :, :] = Gp @ rots[..., j, :, :]
    return rots


# ------------------------------------------------------ differentiable variants


def _cross_t(a, b):
    a0, a1, a2 = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    b0, b1, b2 = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return ad.concat([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def rot6d_to_matrix_t(r):
    """Differentiable Gram-Schmidt decode; raises on degenerate columns."""
    r = ad.as_tensor(r)
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = ad.sqrt(ad.tsum(ad.square(a1), axis=-1, keepdims=True))
    if np.any(n1.data <= 1e-8):
        bad = np.argwhere(n1.data[..., 0] <= 1e-8)[0]
        raise DegenerateInputError(f"6D rotation at index {tuple(int(i) for i in bad)} has a zero first column")
    b1 = a1 / n1
    u2 = a2 - ad.tsum(a2 * b1, axis=-1, keepdims=True) * b1
    n2 = ad.sqrt(ad.tsum(ad.square(u2), axis=-1, keepdims=True))
    if np.any(n2.data <= 1e-8):
        bad = np.argwhere(n2.data[..., 0] <= 1e-8)[0]
        raise DegenerateInputError(f"6D rotation at index {tuple(int(i) for i in bad)} has parallel columns")
    b2 = u2 / n2
    b3 = _cross_t(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1)


def axis_angle_from_matrix_t(R, eps: float = 1e-12):
    """Differentiable log map for rotations away from a half turn."""
    R = ad.as_tensor(R)
    v = ad.concat(
        [R[..., 2, 1:2] - R[..., 1, 2:3], R[..., 0, 2:3] - R[..., 2, 0:1], R[..., 1, 0:1] - R[..., 0, 1:2]],
        axis=-1,
    ) * 0.5
    tr = R[..., 0, 0:1] + R[..., 1, 1:2] + R[..., 2, 2:3]
    sin = ad.sqrt(ad.tsum(ad.square(v), axis=-1, keepdims=True) + eps)
    angle = ad.atan2(sin, (tr - 1.0) * 0.5)
    return v * (angle / sin)


def forward_kinematics_t(parents, local_rots, offsets, root_pos=None):
    """Differentiable FK: local rots ``(..., J, 3, 3)``, offsets ``(..., J, 3)``."""
    G = [local_rots[..., 0, :, :]]
    pos = [ad.Tensor(np.zeros(local_rots.shape[:-3] + (3,))) if root_pos is None else root_pos]
    for i in range(1, len(parents)):
        p = int(parents[i])
        G.append(ad.matmul(G[p], local_rots[..., i, :, :]))
        off = offsets[..., i, :]
        pos.append(pos[p] + ad.tsum(G[p] * ad.reshape(off, off.shape[:-1] + (1, 3)), axis=-1))
    return ad.stack(pos, axis=-2), ad.stack(G, axis=-3)
