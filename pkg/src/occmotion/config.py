"""Pipeline configuration: one flat JSON document, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .detector import DETECTOR_LOSSES, DETECTOR_MODES
from .errors import ConfigError
from .fusion import FUSION_MODES, REFINE_MODES, FusionConfig
from .metrics import LossWeights
from .predictor import MixerConfig
from .synth import MOTION_KINDS


@dataclass
class PipelineConfig:
    seed: int = 0
    # data
    num_clips: int = 48
    heldout_clips: int = 8
    clip_length: int = 81
    fps: float = 30.0
    motion_kinds: list = field(default_factory=lambda: list(MOTION_KINDS))
    occluded_fraction: float = 0.75
    max_episodes: int = 3
    feature_noise: float = 0.1
    feature_seed: int = 0
    zero_occluded_features: bool = True
    body_model: str = ""  # empty: the shipped toy model
    # detector
    alpha: float = 0.8
    thred: float = 0.6
    detector_mode: str = "full"
    detector_loss: str = "margin"
    detector_epochs: int = 20
    detector_lr: float = 5e-3
    detector_batch: int = 32
    # lifter
    lifter_epochs: int = 100
    lifter_lr: float = 5e-4
    lifter_batch: int = 32
    lifter_crop: int = 27
    # predictor
    K: int = 17
    N: int = 16
    L: int = 8
    m: int = 48
    predictor_epochs: int = 100
    predictor_lr: float = 5e-4
    predictor_batch: int = 128
    predictor_stride: int = 8
    # fusion / refinement
    feat_dim: int = 1024
    ctx_dim: int = 512
    heads: int = 8
    fusion_mode: str = "cross_attention"
    refine_mode: str = "swing_twist"
    train_epochs: int = 100
    train_lr: float = 1e-4
    train_batch: int = 8
    lambda_p: float = 1.0
    lambda_s: float = 0.001
    lambda_m: float = 1.0
    lambda_j: float = 5.0
    freeze_deocclusion: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(f"config: {msg}")

        need(self.num_clips >= 1, "num_clips must be >= 1")
        need(0 <= self.heldout_clips < self.num_clips, "heldout_clips must lie in [0, num_clips)")
        need(self.clip_length >= 1, "clip_length must be >= 1")
        need(self.fps > 0, "fps must be positive")
        need(len(self.motion_kinds) > 0 and all(k in MOTION_KINDS for k in self.motion_kinds),
             f"motion_kinds must be drawn from {MOTION_KINDS}")
        need(0.0 <= self.occluded_fraction <= 1.0, "occluded_fraction must lie in [0, 1]")
        need(self.feature_noise >= 0, "feature_noise must be >= 0")
        need(0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]")
        need(0.0 < self.thred < 1.0, "thred must lie in (0, 1)")
        need(self.detector_mode in DETECTOR_MODES, f"detector_mode must be one of {DETECTOR_MODES}")
        need(self.detector_loss in DETECTOR_LOSSES, f"detector_loss must be one of {DETECTOR_LOSSES}")
        need(self.fusion_mode in FUSION_MODES, f"fusion_mode must be one of {FUSION_MODES}")
        need(self.refine_mode in REFINE_MODES, f"refine_mode must be one of {REFINE_MODES}")
        need(self.K == 17, "K must be 17 (evaluation skeleton)")
        for name in ("N", "L", "m", "lifter_crop", "predictor_stride", "heads",
                     "detector_batch", "lifter_batch", "predictor_batch", "train_batch"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        for name in ("detector_epochs", "lifter_epochs", "predictor_epochs", "train_epochs"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("detector_lr", "lifter_lr", "predictor_lr", "train_lr"):
            need(getattr(self, name) > 0, f"{name} must be positive")
        for name in ("lambda_p", "lambda_s", "lambda_m", "lambda_j"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.ctx_dim % self.heads == 0, "ctx_dim must be divisible by heads")

    # ------------------------------------------------------------ derived

    @property
    def mixer(self) -> MixerConfig:
        return MixerConfig(self.K, self.N, self.L, self.m)

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.K, self.feat_dim, self.ctx_dim, self.heads, 256, self.fusion_mode,
                            self.refine_mode)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_p, self.lambda_s, self.lambda_m, self.lambda_j)

    # ----------------------------------------------------------------- io

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict, source: str = "<config>") -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}: config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError(f"{source}: unknown config key(s) {', '.join(unknown)}")
        defaults = cls()
        for key, value in doc.items():
            expect = type(getattr(defaults, key))
            ok = isinstance(value, expect) or (expect is float and isinstance(value, int))
            if isinstance(value, bool) and expect is not bool:
                ok = False
            if not ok:
                raise ConfigError(f"{source}: key {key!r} must be {expect.__name__}, got {type(value).__name__}")
        try:
            return cls(**doc)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        return cls.from_json(doc, str(path))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))
