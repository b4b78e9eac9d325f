"""Synthetic ground-truth motion, virtual-camera projection, occlusion and features.

Motion is generated as band-limited joint-angle trajectories, skinned through
the toy body model and regressed to the 17 evaluation joints. A pinhole
camera projects the joints, occlusion episodes corrupt detections and
confidences, and per-frame feature vectors are fabricated as a fixed random
projection of the ground truth.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .bodymodel import H36M_FROM_SMPL, NUM_BETAS, BodyModel, regress_joints, skin
from .errors import ConfigError, ProjectionError
from .kinematics import SMPL_PARENTS, matrix_from_axis_angle, axis_angle_from_matrix
from .sequence import Sequence

MOTION_KINDS = ("walk", "wave", "squat", "mixed")
OCCLUSION_MODES = ("drop", "freeze", "noise")
MODE_CONFIDENCE = {"drop": (0.0, 0.2), "freeze": (0.2, 0.5), "noise": (0.3, 0.6)}
VISIBLE_CONFIDENCE = (0.85, 1.0)
NOISE_PIXELS = 15.0
FEATURE_DIM = 1024

# camera looking along world -z with image y pointing down
_CAM_ROT = np.diag([1.0, -1.0, -1.0])
# projection camera -> view frame (x right, y up, z towards the viewer)
_VIEW_FLIP = np.diag([1.0, -1.0, -1.0])

# Human3.6M-order limb groups used for random occlusion episodes
LIMB_GROUPS = (
    (1, 2, 3), (4, 5, 6), (11, 12, 13), (14, 15, 16), (12, 13), (15, 16), (2, 3), (5, 6),
    (9, 10), (13, 16), (3, 6),
)


@dataclass
class CameraModel:
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0
    width: int = 1000
    height: int = 1000
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("camera focal lengths must be positive")
        self.rotation = np.asarray(self.rotation, np.float64)
        self.translation = np.asarray(self.translation, np.float64)

    def to_camera(self, points_world) -> np.ndarray:
        return np.asarray(points_world, np.float64) @ self.rotation.T + self.translation

    @property
    def view_rotation(self) -> np.ndarray:
        """World -> view frame rotation; 3D poses and root orientations live in the view frame."""
        return _VIEW_FLIP @ self.rotation


def project(points_world, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of ``(T, K, 3)`` world points to pixels."""
    pc = cam.to_camera(points_world)
    z = pc[..., 2]
    if np.any(z <= 0):
        bad = np.argwhere(z <= 0)[0]
        where = ", ".join(f"{n}={int(i)}" for n, i in zip(("frame", "joint"), bad[-2:]))
        raise ProjectionError(f"non-positive depth at {where}")
    u = cam.fx * pc[..., 0] / z + cam.cx
    v = cam.fy * pc[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


# ---------------------------------------------------------------------- motion


@dataclass
class Motion:
    theta: np.ndarray  # T x 24 x 3 axis-angle, root orientation in world frame
    beta: np.ndarray  # 10
    translation: np.ndarray  # T x 3 world root translation


def _amplitudes(kind: str, rng) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-(joint, axis) oscillation amplitudes, static offsets and base frequency."""
    amp = np.zeros((24, 3))
    off = np.zeros((24, 3))
    # arms hang down from the T-pose
    off[16, 2], off[17, 2] = -1.2, 1.2
    if kind == "walk":
        freq = rng.uniform(0.8, 1.1)
        amp[[1, 2], 0] = 0.35
        amp[[4, 5], 0] = 0.4
        off[[4, 5], 0] = 0.4
        amp[[7, 8], 0] = 0.15
        amp[[16, 17], 0] = 0.25
        amp[[18, 19], 1] = 0.2
        off[18, 1], off[19, 1] = 0.3, -0.3
        amp[[3, 6, 9], 1] = 0.06
        amp[0, 1] = 0.08
    elif kind == "wave":
        freq = rng.uniform(0.9, 1.4)
        off[17, 2] = -1.1
        off[19, 1] = -1.2
        amp[17, 2] = 0.2
        amp[19, 1] = 0.5
        amp[21, 2] = 0.3
        amp[[3, 6, 9], 2] = 0.05
        amp[[12, 15], 1] = 0.1
    elif kind == "squat":
        freq = rng.uniform(0.3, 0.55)
        amp[[1, 2], 0] = 0.55
        off[[1, 2], 0] = -0.55
        amp[[4, 5], 0] = 0.6
        off[[4, 5], 0] = 0.6
        amp[[7, 8], 0] = 0.2
        off[[7, 8], 0] = -0.2
        amp[[3, 6], 0] = 0.15
        off[[3, 6], 0] = 0.15
        amp[[16, 17], 0] = 0.4
        off[[16, 17], 0] = -0.4
    else:
        raise ConfigError(f"unknown motion kind {kind!r}; expected one of {MOTION_KINDS}")
    return amp, off, freq


def generate_motion(kind: str, T: int, seed: int, fps: float = 30.0) -> Motion:
    """Smooth periodic motion of ``kind`` over ``T`` frames, deterministic per seed."""
    if T < 1:
        raise ConfigError("motion needs T >= 1")
    if kind not in MOTION_KINDS:
        raise ConfigError(f"unknown motion kind {kind!r}; expected one of {MOTION_KINDS}")
    rng = np.random.default_rng(seed)
    if kind == "mixed":
        parts = [_amplitudes(k, rng) for k in ("walk", "wave", "squat")]
        w = rng.dirichlet(np.ones(3))
        amp = sum(wi * p[0] for wi, p in zip(w, parts))
        off = sum(wi * p[1] for wi, p in zip(w, parts))
        freq = float(sum(wi * p[2] for wi, p in zip(w, parts)))
    else:
        amp, off, freq = _amplitudes(kind, rng)
    amp = amp * rng.uniform(0.7, 1.2, size=amp.shape)
    amp += rng.uniform(0.0, 0.05, size=amp.shape)  # low-level motion everywhere
    off = off + rng.normal(0.0, 0.05, size=off.shape)
    phase = rng.uniform(0, 2 * np.pi, size=(24, 3))
    # left/right limbs in antiphase for locomotion
    for left, right in ((1, 2), (4, 5), (7, 8), (16, 17), (18, 19)):
        phase[right] = phase[left] + np.pi
    phase[[16, 17]] += np.pi
    h2_amp = rng.uniform(0.0, 0.2, size=(24, 3))
    h2_phase = rng.uniform(0, 2 * np.pi, size=(24, 3))
    t = np.arange(T)[:, None, None] / fps
    w = 2 * np.pi * freq
    theta = off + amp * (np.sin(w * t + phase) + h2_amp * np.sin(2 * w * t + h2_phase))

    # root: heading towards the camera +- 60 degrees, slight sway
    heading = rng.uniform(-np.pi / 3, np.pi / 3)
    root_osc = theta[:, 0].copy()
    R_head = matrix_from_axis_angle(np.array([0.0, heading, 0.0]))
    R_root = R_head @ matrix_from_axis_angle(root_osc)
    theta[:, 0] = axis_angle_from_matrix(R_root)

    speed = rng.uniform(0.2, 0.6) if kind in ("walk", "mixed") else 0.0
    fwd = R_head @ np.array([0.0, 0.0, 1.0])
    bob = 0.02 * np.sin(2 * w * t[:, 0, 0])
    trans = np.outer(t[:, 0, 0] * speed, fwd) + np.outer(bob, [0.0, 1.0, 0.0])
    beta = rng.uniform(-1.0, 1.0, size=NUM_BETAS)
    return Motion(theta, beta, trans)


def default_camera(rng, depth_range=(4.5, 6.0)) -> CameraModel:
    depth = rng.uniform(*depth_range)
    centre = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.4), depth])
    return CameraModel(rotation=_CAM_ROT, translation=-_CAM_ROT @ centre)


# ------------------------------------------------------------------- occlusion


@dataclass
class Episode:
    start: int  # first frame, inclusive
    end: int  # last frame, inclusive
    joints: tuple[int, ...]
    mode: str = "drop"
    conf_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.mode not in OCCLUSION_MODES:
            raise ConfigError(f"unknown occlusion mode {self.mode!r}")
        self.joints = tuple(int(j) for j in self.joints)
        if self.conf_range is None:
            self.conf_range = MODE_CONFIDENCE[self.mode]
        self.conf_range = tuple(float(c) for c in self.conf_range)


@dataclass
class OcclusionSchedule:
    episodes: list[Episode] = field(default_factory=list)

    def validate(self, T: int, K: int) -> None:
        for ep in self.episodes:
            if not 0 <= ep.start <= ep.end < T:
                raise ConfigError(f"episode frames {ep.start}-{ep.end} outside 0-{T - 1}")
            if any(not 0 <= j < K for j in ep.joints):
                raise ConfigError(f"episode joints {ep.joints} outside 0-{K - 1}")

    def to_json(self) -> list:
        return [asdict(ep) | {"joints": list(ep.joints), "conf_range": list(ep.conf_range)} for ep in self.episodes]

    @classmethod
    def from_json(cls, doc) -> "OcclusionSchedule":
        return cls([Episode(e["start"], e["end"], tuple(e["joints"]), e["mode"], tuple(e["conf_range"]))
                    for e in doc])


def random_schedule(T: int, rng, max_episodes: int = 3, modes=OCCLUSION_MODES,
                    min_len: int = 5, max_len: int = 25) -> OcclusionSchedule:
    episodes = []
    taken = np.zeros((T, 17), bool)
    for _ in range(rng.integers(0, max_episodes + 1)):
        length = int(rng.integers(min_len, max_len + 1))
        if length > T:
            continue
        start = int(rng.integers(0, T - length + 1))
        joints = LIMB_GROUPS[rng.integers(len(LIMB_GROUPS))]
        mode = modes[rng.integers(len(modes))]
        block = taken[start:start + length, list(joints)]
        if block.any():
            continue
        block[...] = True
        taken[start:start + length, list(joints)] = True
        episodes.append(Episode(start, start + length - 1, joints, mode))
    return OcclusionSchedule(episodes)


def apply_occlusion(joints2d, schedule: OcclusionSchedule, seed: int):
    """Corrupt clean pixel detections; returns (joints2d, confidences, visible labels)."""
    clean = np.asarray(joints2d, np.float64)
    T, K, _ = clean.shape
    schedule.validate(T, K)
    rng = np.random.default_rng(seed)
    out = clean + rng.uniform(-0.7, 0.7, size=clean.shape)
    conf = rng.uniform(*VISIBLE_CONFIDENCE, size=(T, K))
    visible = np.ones((T, K), bool)
    owner = np.full((T, K), -1)
    for n, ep in enumerate(schedule.episodes):
        frames = np.arange(ep.start, ep.end + 1)
        joints = np.asarray(ep.joints)
        if np.any(owner[np.ix_(frames, joints)] >= 0):
            warnings.warn(f"occlusion episode {n} overlaps an earlier one; last writer wins", stacklevel=2)
        owner[np.ix_(frames, joints)] = n
        visible[np.ix_(frames, joints)] = False
        conf[np.ix_(frames, joints)] = rng.uniform(*ep.conf_range, size=(len(frames), len(joints)))
        if ep.mode == "drop":
            for t in frames:
                lo, hi = clean[t].min(axis=0), clean[t].max(axis=0)
                out[t, joints] = rng.uniform(lo, hi, size=(len(joints), 2))
        elif ep.mode == "freeze":
            out[np.ix_(frames, joints)] = clean[ep.start, joints]
        else:
            out[np.ix_(frames, joints)] = clean[np.ix_(frames, joints)] + rng.normal(
                0.0, NOISE_PIXELS, size=(len(frames), len(joints), 2))
    return out, conf, visible


# -------------------------------------------------------------------- features


def _smpl_joints_behind(eval_joint: int) -> list[int]:
    """SMPL joints whose rotations place an evaluation joint."""
    return sorted({int(SMPL_PARENTS[j]) for j in H36M_FROM_SMPL[eval_joint] if SMPL_PARENTS[j] >= 0})


def fabricate_features(theta, beta, visible, proj_seed: int = 0, noise_sigma: float = 0.1,
                       noise_seed: int = 0, zero_occluded: bool = True, dim: int = FEATURE_DIM) -> np.ndarray:
    """Per-frame feature vectors: fixed random projection of (theta, beta, visibility) plus noise.

    With ``zero_occluded`` the rotations that place an occluded joint are
    removed from that frame's input, mimicking lost image evidence.
    """
    theta = np.asarray(theta, np.float64).reshape(len(visible), 24, 3).copy()
    visible = np.asarray(visible, bool)
    T, K = visible.shape
    if zero_occluded:
        for t, k in zip(*np.nonzero(~visible)):
            theta[t, _smpl_joints_behind(k)] = 0.0
    x = np.concatenate([theta.reshape(T, 72), np.broadcast_to(beta, (T, NUM_BETAS)),
                        visible.astype(np.float64)], axis=1)
    P = np.random.default_rng(proj_seed).normal(0.0, 1.0 / np.sqrt(x.shape[1]), size=(x.shape[1], dim))
    noise = np.random.default_rng(noise_seed).normal(0.0, noise_sigma, size=(T, dim))
    return x @ P + noise


# ------------------------------------------------------------------------ clips


@dataclass
class SyntheticClip:
    kind: str
    seed: int
    fps: float
    camera: CameraModel
    theta: np.ndarray  # T x 24 x 3, root orientation in the view frame
    beta: np.ndarray
    joints_world: np.ndarray  # T x 17 x 3
    joints3d: np.ndarray  # T x 17 x 3 root-relative, view frame
    joints2d_clean: np.ndarray
    joints2d: np.ndarray
    conf: np.ndarray
    visible: np.ndarray
    schedule: OcclusionSchedule

    @property
    def num_frames(self) -> int:
        return len(self.joints3d)

    def to_sequence(self) -> Sequence:
        return Sequence(self.joints2d, self.conf, float(self.camera.width), float(self.camera.height),
                        self.fps, self.joints3d, self.visible, self.beta, self.theta.reshape(-1, 72))

    def features(self, proj_seed: int = 0, noise_sigma: float = 0.1, zero_occluded: bool = True) -> np.ndarray:
        return fabricate_features(self.theta, self.beta, self.visible, proj_seed, noise_sigma,
                                  noise_seed=self.seed + 7919, zero_occluded=zero_occluded)


def view_frame_theta(theta_world, cam: CameraModel) -> np.ndarray:
    theta = np.array(theta_world, np.float64, copy=True)
    theta[..., 0, :] = axis_angle_from_matrix(cam.view_rotation @ matrix_from_axis_angle(theta[..., 0, :]))
    return theta


def make_clip(model: BodyModel, kind: str, T: int, seed: int, schedule: OcclusionSchedule | None = None,
              fps: float = 30.0, occlusion: str = "random", max_episodes: int = 3) -> SyntheticClip:
    """Generate one clip. ``occlusion`` is ``"random"`` or ``"none"`` when no schedule is given."""
    motion = generate_motion(kind, T, seed, fps)
    rng = np.random.default_rng([seed, 1])
    cam = default_camera(rng)
    rots = matrix_from_axis_angle(motion.theta)
    mesh = skin(model, motion.beta, rots, motion.translation)
    joints_world = regress_joints(model.joint_regressor_eval, mesh)
    joints3d = (joints_world - joints_world[:, :1]) @ cam.view_rotation.T
    clean2d = project(joints_world, cam)
    if schedule is None:
        schedule = random_schedule(T, rng, max_episodes) if occlusion == "random" else OcclusionSchedule()
    j2d, conf, vis = apply_occlusion(clean2d, schedule, seed=seed + 104729)
    return SyntheticClip(kind, seed, fps, cam, view_frame_theta(motion.theta, cam), motion.beta,
                         joints_world, joints3d, clean2d, j2d, conf, vis, schedule)


def gt_mesh(model: BodyModel, theta, beta) -> np.ndarray:
    """Root-relative (pelvis at origin) ground-truth mesh from axis-angle ``theta``."""
    theta = np.asarray(theta, np.float64).reshape(-1, 24, 3)
    beta = np.asarray(beta, np.float64)
    J0 = model.rest_joints(beta)[..., 0, :]
    return skin(model, beta, matrix_from_axis_angle(theta), -J0)
