"""Motion context, feature fusion, shape/pose regression and swing-twist refinement.

Shapes follow ``(..., T, ·)``: a leading batch of clips is optional. Rotations
are carried as 6D (first two matrix columns) and exported as axis-angle.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ParamStore, Tensor
from .bodymodel import NUM_BETAS, BodyModel, skin_t
from .errors import ConfigError, ContractError, DimensionError
from .kinematics import NUM_JOINTS, axis_angle_from_matrix_t, rot6d_to_matrix_t
from .metrics import LossWeights, loss_joint, loss_mesh, loss_pose, loss_shape, total_loss

FUSION_MODES = ("image_only", "motion_only", "mlp", "cross_attention")
REFINE_MODES = ("none", "mlp", "swing_twist")
NUM_TWISTS = NUM_JOINTS - 1
_ID6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class FusionConfig:
    K: int = 17
    feat_dim: int = 1024
    ctx_dim: int = 512
    heads: int = 8
    hidden: int = 256
    fusion_mode: str = "cross_attention"
    refine_mode: str = "swing_twist"

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.refine_mode not in REFINE_MODES:
            raise ConfigError(f"refine_mode must be one of {REFINE_MODES}, got {self.refine_mode!r}")
        if self.ctx_dim % self.heads:
            raise ConfigError(f"ctx_dim {self.ctx_dim} is not divisible by {self.heads} heads")

    @property
    def pose_dim(self) -> int:
        return 3 * self.K

    @property
    def context_dim(self) -> int:
        return self.ctx_dim + self.pose_dim


def init_fusion(store: ParamStore, cfg: FusionConfig, rng) -> None:
    C1, C2, P, H = cfg.feat_dim, cfg.ctx_dim, cfg.pose_dim, cfg.hidden
    CM = cfg.context_dim
    layers.init_gru(store, "ctx.gru", P, C2, rng)
    if cfg.fusion_mode == "cross_attention":
        layers.init_linear(store, "att.q", CM, C2, rng)
        layers.init_linear(store, "att.k", C1, C2, rng)
        layers.init_linear(store, "att.v", C1, C2, rng)
        layers.init_linear(store, "att.o", C2, C2, rng)
        layers.init_linear(store, "fuse.skip", CM, C2, rng)
    elif cfg.fusion_mode == "image_only":
        layers.init_linear(store, "fuse.img", C1, C2, rng)
    elif cfg.fusion_mode == "motion_only":
        layers.init_linear(store, "fuse.mot", CM, C2, rng)
    else:
        layers.init_mlp(store, "fuse.mlp", [CM + C1, C2, C2], rng)
    id6 = np.tile(_ID6, NUM_JOINTS)
    layers.init_mlp(store, "head.beta", [C2, H, NUM_BETAS], rng, out_scale=0.1)
    layers.init_mlp(store, "head.theta", [C2, H, 6 * NUM_JOINTS], rng, out_scale=0.1, out_bias=id6)
    if cfg.refine_mode == "swing_twist":
        layers.init_mlp(store, "head.twist", [C2, H, 2 * NUM_TWISTS], rng, out_scale=0.1,
                        out_bias=np.tile([1.0, 0.0], NUM_TWISTS))
        layers.init_mlp(store, "swing", [P, H, 6 * NUM_JOINTS], rng, out_scale=0.1, out_bias=id6)
        layers.init_mlp(store, "refine", [6 * NUM_JOINTS + 2 * NUM_TWISTS, H, 6 * NUM_JOINTS], rng,
                        out_scale=0.0)
    elif cfg.refine_mode == "mlp":
        layers.init_mlp(store, "refine", [P, H, 6 * NUM_JOINTS], rng, out_scale=0.0)


# ------------------------------------------------------------------- stages


def _flat_pose(p_com, cfg: FusionConfig) -> Tensor:
    """(..., T, K, 3) -> (..., T, 3K); tensors keep their graph for end-to-end fine-tuning."""
    if not isinstance(p_com, Tensor):
        p_com = np.asarray(p_com)
    shape = tuple(p_com.shape)
    if len(shape) < 3 or shape[-2:] != (cfg.K, 3):
        raise DimensionError(f"completed poses must be (..., T, {cfg.K}, 3), got {shape}")
    return ad.reshape(ad.as_tensor(p_com), shape[:-2] + (cfg.pose_dim,))


def motion_context(store: ParamStore, cfg: FusionConfig, p_com) -> Tensor:
    """Causal GRU features over flattened poses, concatenated with the poses: (..., T, C2 + 3K)."""
    flat = _flat_pose(p_com, cfg)
    f_m = ad.stack(layers.gru(store, "ctx.gru", flat, cfg.ctx_dim), axis=-2)
    return ad.concat([f_m, flat], axis=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, T, C = x.shape
    x = ad.reshape(x, tuple(lead) + (T, heads, C // heads))
    n = x.ndim
    return ad.swapaxes(x, n - 3, n - 2)  # (..., heads, T, d)


def cross_attend(store: ParamStore, cfg: FusionConfig, c_m, f, logit_shift: float = 0.0) -> Tensor:
    """Multi-head attention of motion-context queries over all frames' features.

    ``logit_shift`` is added to every logit and exists only to probe softmax
    shift invariance.
    """
    c_m, f = ad.as_tensor(c_m), ad.as_tensor(f)
    if c_m.shape[-2] != f.shape[-2]:
        raise ContractError(f"motion context has {c_m.shape[-2]} frames but features have {f.shape[-2]}")
    h = cfg.heads
    d = cfg.ctx_dim // h
    q = _split_heads(layers.linear(store, "att.q", c_m), h)
    k = _split_heads(layers.linear(store, "att.k", f), h)
    v = _split_heads(layers.linear(store, "att.v", f), h)
    logits = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d))
    if logit_shift:
        logits = logits + logit_shift
    att = ad.softmax(logits, axis=-1)
    out = ad.matmul(att, v)
    n = out.ndim
    out = ad.swapaxes(out, n - 3, n - 2)
    out = ad.reshape(out, out.shape[:-2] + (cfg.ctx_dim,))
    return layers.linear(store, "att.o", out)


def fuse(store: ParamStore, cfg: FusionConfig, c_m: Tensor, f) -> Tensor:
    f = ad.as_tensor(f)
    if f.shape[-1] != cfg.feat_dim:
        raise DimensionError(f"features must have {cfg.feat_dim} channels, got {f.shape[-1]}")
    mode = cfg.fusion_mode
    if mode == "cross_attention":
        return cross_attend(store, cfg, c_m, f) + layers.linear(store, "fuse.skip", c_m)
    if mode == "image_only":
        return layers.linear(store, "fuse.img", f)
    if mode == "motion_only":
        return layers.linear(store, "fuse.mot", c_m)
    return layers.mlp(store, "fuse.mlp", ad.concat([c_m, f], axis=-1))


def regress_shape_pose(store: ParamStore, f_prime) -> tuple[Tensor, Tensor]:
    """Per-frame ``beta`` (..., T, 10) and identity-biased 6D ``theta_init`` (..., T, 24, 6)."""
    f_prime = ad.as_tensor(f_prime)
    beta = layers.mlp(store, "head.beta", f_prime)
    theta = layers.mlp(store, "head.theta", f_prime)
    return beta, ad.reshape(theta, theta.shape[:-1] + (NUM_JOINTS, 6))


def normalize_twist(raw: Tensor) -> Tensor:
    """(..., 46) raw head output -> (..., 23, 2) unit (cos, sin) pairs."""
    pairs = ad.reshape(raw, raw.shape[:-1] + (NUM_TWISTS, 2))
    norm = ad.sqrt(ad.tsum(ad.square(pairs), axis=-1, keepdims=True) + 1e-30)
    return pairs / norm


def refine_pose(store: ParamStore, cfg: FusionConfig, p_com, f_prime, theta_init: Tensor):
    """Refined 6D pose (..., T, 24, 6); returns ``(theta, swing, twist)`` with unused parts ``None``."""
    if cfg.refine_mode == "none":
        return theta_init, None, None
    flat = _flat_pose(p_com, cfg)
    if cfg.refine_mode == "mlp":
        delta = layers.mlp(store, "refine", flat)
        return theta_init + ad.reshape(delta, theta_init.shape), None, None
    swing = layers.mlp(store, "swing", flat)
    twist = normalize_twist(layers.mlp(store, "head.twist", ad.as_tensor(f_prime)))
    x = ad.concat([swing, ad.reshape(twist, twist.shape[:-2] + (2 * NUM_TWISTS,))], axis=-1)
    delta = layers.mlp(store, "refine", x)
    return theta_init + ad.reshape(delta, theta_init.shape), swing, twist


# -------------------------------------------------------------------- model


@dataclass
class FusionOutput:
    beta: Tensor  # (..., T, 10)
    theta_init: Tensor  # (..., T, 24, 6)
    theta6: Tensor  # (..., T, 24, 6)
    rotmats: Tensor  # (..., T, 24, 3, 3)
    theta_aa: Tensor  # (..., T, 24, 3)
    twist: Tensor | None = None


@dataclass
class FusionModel:
    body: BodyModel
    cfg: FusionConfig = field(default_factory=FusionConfig)
    store: ParamStore = field(default_factory=ParamStore)

    def init(self, rng) -> "FusionModel":
        init_fusion(self.store, self.cfg, rng)
        return self

    def forward(self, p_com, feats) -> FusionOutput:
        s, cfg = self.store, self.cfg
        c_m = motion_context(s, cfg, p_com)
        f_prime = fuse(s, cfg, c_m, feats)
        beta, theta_init = regress_shape_pose(s, f_prime)
        theta6, _, twist = refine_pose(s, cfg, p_com, f_prime, theta_init)
        R = rot6d_to_matrix_t(theta6)
        return FusionOutput(beta, theta_init, theta6, R, axis_angle_from_matrix_t(R), twist)

    def mesh(self, out: FusionOutput) -> Tensor:
        """Root-relative vertices (..., T, V, 3) from the predicted shape and pose."""
        lead = out.beta.shape[:-1]
        n = int(np.prod(lead))
        beta = ad.reshape(out.beta, (n, NUM_BETAS))
        R = ad.reshape(out.rotmats, (n, NUM_JOINTS, 3, 3))
        verts = skin_t(self.body, beta, R, root_relative=True)
        return ad.reshape(verts, tuple(lead) + verts.shape[-2:])

    def losses(self, out: FusionOutput, target: "FusionTarget") -> dict:
        mesh = self.mesh(out)
        beta_gt = np.broadcast_to(target.beta[..., None, :], out.beta.shape)
        return {
            "pose": loss_pose(out.theta_aa, target.theta),
            "shape": loss_shape(out.beta, beta_gt),
            "mesh": loss_mesh(mesh, target.mesh),
            "joint": loss_joint(mesh, self.body.joint_regressor_eval, target.joints3d),
        }

    def save(self, path) -> None:
        doc = {"config": asdict(self.cfg), "params": self.store.to_json()}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path, body: BodyModel) -> "FusionModel":
        doc = json.loads(Path(path).read_text())
        model = cls(body, FusionConfig(**doc["config"]))
        model.init(np.random.default_rng(0))
        model.store.load_json(doc["params"])
        return model


@dataclass
class FusionTarget:
    theta: np.ndarray  # (..., T, 24, 3)
    beta: np.ndarray  # (..., 10)
    mesh: np.ndarray  # (..., T, V, 3) root-relative
    joints3d: np.ndarray  # (..., T, K, 3) root-relative

    def take(self, idx) -> "FusionTarget":
        return FusionTarget(self.theta[idx], self.beta[idx], self.mesh[idx], self.joints3d[idx])


@dataclass
class BodyParams:
    beta: np.ndarray  # T x 10
    theta_axis_angle: np.ndarray  # T x 72

    def to_json(self) -> dict:
        return {"beta": np.round(self.beta, 6).tolist(),
                "theta_axis_angle": np.round(self.theta_axis_angle, 6).tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def body_params(out: FusionOutput) -> BodyParams:
    T = out.beta.shape[-2]
    return BodyParams(out.beta.numpy().astype(np.float64).reshape(-1, T, NUM_BETAS).squeeze(0),
                      out.theta_aa.numpy().astype(np.float64).reshape(-1, T, 72).squeeze(0))


# ------------------------------------------------------------------ training


@dataclass
class FusionTrainResult:
    history: list = field(default_factory=list)  # per-epoch dicts of mean components + total


def train_fusion(model: FusionModel, p_com, feats, target: FusionTarget, epochs: int = 100, lr: float = 1e-4,
                 batch: int = 8, weights: LossWeights = LossWeights(), seed: int = 0,
                 log=None, start_epoch: int = 0) -> FusionTrainResult:
    """Optimise the weighted sum of pose, shape, mesh and joint losses over clips.

    ``p_com`` (B, T, K, 3), ``feats`` (B, T, C1); targets share the leading B.
    """
    p_com, feats = np.asarray(p_com), np.asarray(feats)
    n = len(p_com)
    if n == 0:
        raise ConfigError("train_fusion needs at least one clip")
    result = FusionTrainResult()
    for epoch in range(start_epoch, epochs):
        sums: dict[str, float] = {}
        for idx in _epoch_batches(np.random.default_rng([seed, epoch]), n, batch):
            with ad.Tape() as tape:
                out = model.forward(p_com[idx], feats[idx])
                parts = model.losses(out, target.take(idx))
                loss = total_loss(parts, weights)
            ad.backward(loss, tape, model.store)
            ad.adam_step(model.store, lr)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item() * len(idx)
            sums["total"] = sums.get("total", 0.0) + loss.item() * len(idx)
        row = {k: v / n for k, v in sums.items()}
        result.history.append(row)
        if log is not None:
            log(epoch, row)
    return result


def _epoch_batches(rng, n: int, batch: int):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def evaluate_fusion(model: FusionModel, p_com, feats, target: FusionTarget, batch: int = 16,
                    weights: LossWeights = LossWeights()) -> dict:
    """Mean loss components over clips without a tape."""
    n = len(p_com)
    sums: dict[str, float] = {}
    for i in range(0, n, batch):
        idx = np.arange(i, min(n, i + batch))
        out = model.forward(p_com[idx], feats[idx])
        parts = model.losses(out, target.take(idx))
        parts["total"] = total_loss(dict(parts), weights)
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v.item() * len(idx)
    return {k: v / n for k, v in sums.items()}
