"""The shared per-clip sequence JSON format and its in-memory form."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class Sequence:
    """One clip: 2D detections with confidences, plus optional ground truth.

    ``joints2d`` are pixels; ``joints3d`` root-relative view-frame metres (x right, y up, z towards the viewer);
    ``theta`` axis-angle ``(T, 72)``.
    """

    joints2d: np.ndarray
    conf: np.ndarray
    width: float = 1000.0
    height: float = 1000.0
    fps: float = 30.0
    joints3d: np.ndarray | None = None
    visible: np.ndarray | None = None
    beta: np.ndarray | None = None
    theta: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.joints2d.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints2d.shape[1]

    def normalized_2d(self) -> np.ndarray:
        """Pixels mapped to [-1, 1] by image width and height."""
        scale = np.array([self.width, self.height])
        return 2.0 * self.joints2d / scale - 1.0

    # -------------------------------------------------------------- json io

    def to_json(self, digits: int = 6) -> dict:
        def r(x):
            return np.round(np.asarray(x, np.float64), digits).tolist()

        frames = []
        for t in range(self.num_frames):
            f = {"joints2d": r(self.joints2d[t]), "conf": r(self.conf[t])}
            if self.joints3d is not None:
                f["joints3d"] = r(self.joints3d[t])
            if self.visible is not None:
                f["visible"] = [bool(v) for v in self.visible[t]]
            frames.append(f)
        doc = {"fps": self.fps, "K": self.num_joints, "width": self.width, "height": self.height,
               "frames": frames}
        if self.beta is not None:
            doc["beta"] = r(self.beta)
        if self.theta is not None:
            doc["theta"] = r(np.asarray(self.theta).reshape(self.num_frames, -1))
        return doc

    @classmethod
    def from_json(cls, doc: dict, source: str = "<sequence>") -> "Sequence":
        try:
            K = int(doc["K"])
            frames = doc["frames"]
            if not frames:
                raise DataError(f"{source}: field 'frames' is empty")
            for t, f in enumerate(frames):
                for key, shape in (("joints2d", (K, 2)), ("conf", (K,)), ("joints3d", (K, 3))):
                    if key not in f:
                        if key == "joints3d":
                            continue
                        raise DataError(f"{source}: frame {t}: missing field {key!r}")
                    if np.shape(f[key]) != shape:
                        raise DataError(f"{source}: frame {t}: field {key!r} must have shape {shape}, "
                                        f"got {np.shape(f[key])}")
            j2 = np.asarray([f["joints2d"] for f in frames], np.float64)
            conf = np.asarray([f["conf"] for f in frames], np.float64)
            j3 = vis = None
            if all("joints3d" in f for f in frames):
                j3 = np.asarray([f["joints3d"] for f in frames], np.float64)
                if j3.shape[1:] != (K, 3):
                    raise DataError(f"{source}: field 'joints3d' must be K x 3 per frame")
            if all("visible" in f for f in frames):
                vis = np.asarray([f["visible"] for f in frames], bool)
            beta = np.asarray(doc["beta"], np.float64) if "beta" in doc else None
            theta = np.asarray(doc["theta"], np.float64) if "theta" in doc else None
            if theta is not None and theta.shape != (len(frames), 72):
                raise DataError(f"{source}: field 'theta' must be T x 72")
            if not (np.isfinite(j2).all() and np.isfinite(conf).all()):
                raise DataError(f"{source}: non-finite joints2d/conf values")
            return cls(j2, conf, float(doc["width"]), float(doc["height"]), float(doc["fps"]),
                       j3, vis, beta, theta)
        except KeyError as exc:
            raise DataError(f"{source}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{source}: malformed sequence ({exc})") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Sequence":
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: sequence file not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        return cls.from_json(doc, str(path))


def load_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: feature file not found")
    try:
        frames = np.asarray(json.loads(path.read_text())["frames"], np.float64)
    except (KeyError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"{path}: malformed feature file ({exc})") from None
    if frames.ndim != 2:
        raise DataError(f"{path}: field 'frames' must be T x C")
    return frames


def save_features(path, frames) -> None:
    Path(path).write_text(json.dumps({"frames": np.round(np.asarray(frames, np.float64), 6).tolist()}))
