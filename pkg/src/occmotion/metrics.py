"""Training losses and evaluation metrics.

Losses take tensors (or arrays) and return scalar tensors so they can sit at
the end of a taped forward pass. Metrics are plain numpy, reported in
millimetres from metre inputs.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegenerateInputError, DimensionError


def _check_same(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------- losses


@dataclass
class LossWeights:
    pose: float = 1.0
    shape: float = 0.001
    mesh: float = 1.0
    joint: float = 5.0

    def __post_init__(self):
        if min(self.pose, self.shape, self.mesh, self.joint) < 0:
            raise ValueError("loss weights must be non-negative")


def mean_l1(pred, gt) -> ad.Tensor:
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    _check_same(pred, gt, "L1 loss")
    return ad.mean(ad.tabs(pred - gt))


def rms(pred, gt) -> ad.Tensor:
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    _check_same(pred, gt, "L2 loss")
    return ad.sqrt(ad.mean(ad.square(pred - gt)), grad_floor=1e-8)


def loss_pred(pred, gt) -> ad.Tensor:
    """Mean absolute coordinate error of predicted / completed 3D joints."""
    return mean_l1(pred, gt)


def loss_pose(theta_aa, gt_theta_aa) -> ad.Tensor:
    return rms(theta_aa, gt_theta_aa)


def loss_shape(beta, gt_beta) -> ad.Tensor:
    return rms(beta, gt_beta)


def loss_mesh(mesh, gt_mesh) -> ad.Tensor:
    return mean_l1(mesh, gt_mesh)


def loss_joint(mesh, W, gt_joints) -> ad.Tensor:
    """L1 between joints regressed from ``mesh`` by ``W`` and ground-truth joints."""
    W = np.asarray(W)
    mesh = ad.as_tensor(mesh)
    if W.shape[-1] != mesh.shape[-2]:
        raise DimensionError(f"regressor {W.shape} does not match mesh {mesh.shape}")
    return mean_l1(ad.matmul(ad.Tensor(W), mesh), gt_joints)


def loss_joint_2d(joints3d, gt_joints2d, scale, offset) -> ad.Tensor:
    """Joint loss against 2D keypoints under a weak-perspective camera ``scale * xy + offset``."""
    joints3d = ad.as_tensor(joints3d)
    proj = joints3d[..., 0:2] * np.asarray(scale)[..., None, None] + np.asarray(offset)[..., None, :]
    return mean_l1(proj, gt_joints2d)


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> ad.Tensor:
    terms = {"pose": weights.pose, "shape": weights.shape, "mesh": weights.mesh, "joint": weights.joint}
    out = ad.Tensor(np.zeros(()))
    for name, value in components.items():
        if name not in terms:
            raise ContractError(f"unknown loss component {name!r}")
        out = out + terms[name] * ad.as_tensor(value)
    return out


# --------------------------------------------------------------------- metrics


def _root_align(x, root: int = 0):
    x = np.asarray(x, np.float64)
    return x - x[..., root:root + 1, :]


def per_joint_error(pred, gt, root: int = 0) -> np.ndarray:
    """Root-aligned Euclidean error per frame and joint, in millimetres."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    _check_same(pred, gt, "mpjpe")
    return np.linalg.norm(_root_align(pred, root) - _root_align(gt, root), axis=-1) * 1000.0


def mpjpe(pred, gt, root: int = 0, mask=None) -> float:
    err = per_joint_error(pred, gt, root)
    if mask is not None:
        mask = np.asarray(mask, bool)
        return float(err[mask].mean()) if mask.any() else 0.0
    return float(err.mean())


def similarity_align(pred, gt):
    """Least-squares similarity transform of ``pred`` (K x 3) onto ``gt``."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    X, Y = pred - mu_p, gt - mu_g
    var = (X**2).sum()
    H = X.T @ Y
    U, s, Vt = np.linalg.svd(H)
    if var < 1e-20 or s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateInputError("Procrustes alignment is rank deficient")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    scale = (s * np.diag(D)).sum() / var
    return scale * X @ R.T + mu_g


def pa_mpjpe(pred, gt) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    _check_same(pred, gt, "pa_mpjpe")
    if pred.shape[-2] < 3:
        raise ContractError("pa_mpjpe needs at least 3 joints")
    flat_p = pred.reshape(-1, *pred.shape[-2:])
    flat_g = gt.reshape(-1, *gt.shape[-2:])
    errs = [np.linalg.norm(similarity_align(p, g) - g, axis=-1).mean() for p, g in zip(flat_p, flat_g)]
    return float(np.mean(errs) * 1000.0)


def mpvpe(pred_mesh, gt_mesh, pred_root=None, gt_root=None) -> float:
    """Mean vertex distance in mm after subtracting the given per-frame roots."""
    pred_mesh, gt_mesh = np.asarray(pred_mesh, np.float64), np.asarray(gt_mesh, np.float64)
    _check_same(pred_mesh, gt_mesh, "mpvpe")
    if pred_root is not None:
        pred_mesh = pred_mesh - np.asarray(pred_root)[..., None, :]
    if gt_root is not None:
        gt_mesh = gt_mesh - np.asarray(gt_root)[..., None, :]
    return float(np.linalg.norm(pred_mesh - gt_mesh, axis=-1).mean() * 1000.0)


def accel_error(pred, gt, mask=None) -> float:
    """Mean norm of the second-difference mismatch, mm/frame^2; ``mask`` selects (t, k) of the centre frame."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    _check_same(pred, gt, "accel_error")
    if pred.shape[0] < 3:
        raise ContractError("acceleration error needs at least 3 frames")
    acc_p = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    acc_g = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    err = np.linalg.norm(acc_p - acc_g, axis=-1) * 1000.0
    if mask is not None:
        m = np.asarray(mask, bool)[1:-1]
        return float(err[m].mean()) if m.any() else 0.0
    return float(err.mean())


# ------------------------------------------------------------------- reporting

REPORT_COLUMNS = ("clip", "frames", "fps", "mpjpe", "pa_mpjpe", "mpvpe", "accel_error", "mpjpe_occluded")


@dataclass
class MetricReport:
    clip: str
    frames: int
    fps: float
    mpjpe: float
    pa_mpjpe: float
    mpvpe: float
    accel_error: float
    mpjpe_occluded: float
    per_joint: list = field(default_factory=list)

    def row(self) -> dict:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


def aggregate(reports: list[MetricReport]) -> MetricReport:
    n = len(reports)

    def avg(attr):
        # NaN marks "not applicable" (e.g. a clip without occluded joints) and is skipped
        vals = [getattr(r, attr) for r in reports if not np.isnan(getattr(r, attr))]
        return float(sum(vals) / len(vals)) if vals else float("nan")

    per_joint = np.mean([r.per_joint for r in reports], axis=0).tolist() if n else []
    return MetricReport("ALL", sum(r.frames for r in reports), reports[0].fps if n else 0.0,
                        avg("mpjpe"), avg("pa_mpjpe"), avg("mpvpe"), avg("accel_error"),
                        avg("mpjpe_occluded"), per_joint)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def reports_to_csv(reports: list[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in list(reports) + [aggregate(reports)]:
        writer.writerow([_fmt(r.row()[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def reports_to_json(reports: list[MetricReport]) -> str:
    doc = {"clips": [asdict(r) for r in reports], "aggregate": asdict(aggregate(reports))}
    return json.dumps(doc, indent=1)
