"""End-to-end orchestration: dataset synthesis, two-stage training, inference, evaluation.

Directory layout
----------------
dataset:      manifest.json, clips/<id>.json (sequence format)
checkpoints:  detector.json, lifter.json, predictor.json, fusion.json
              (+ ``*.opt.json`` optimizer state), ``*_curve.csv``, run.json
"""
from __future__ import annotations

import csv
import json
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .bodymodel import BodyModel, regress_joints, skin, toy_body_model, write_obj
from .config import PipelineConfig
from .detector import Detector, VisibilityReport, detector_f1, train_detector
from .errors import ConfigError, ContractError, DataError
from .fusion import BodyParams, FusionModel, FusionTarget, body_params, train_fusion
from .kinematics import matrix_from_axis_angle
from .lifter import Lifter, evaluate_lifter, pretrain_lifter
from .metrics import (MetricReport, total_loss, accel_error, mpjpe, mpvpe, pa_mpjpe, per_joint_error, reports_to_csv,
                      reports_to_json)
from .predictor import MotionPredictor, complete_t, make_windows, pretrain_predictor
from .sequence import Sequence, load_features
from .synth import OcclusionSchedule, fabricate_features, gt_mesh, make_clip


def _noop(*_args, **_kw):
    pass


def version_string() -> str:
    """``git describe``-style version when run from a checkout, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_body(cfg: PipelineConfig) -> BodyModel:
    return BodyModel.load(cfg.body_model) if cfg.body_model else toy_body_model()


# ------------------------------------------------------------------- dataset


@dataclass
class ClipEntry:
    id: str
    file: str
    kind: str
    seed: int
    split: str
    occluded: bool
    schedule: list

    def load(self, root: Path) -> Sequence:
        return Sequence.load(root / self.file)


def clip_seed(cfg: PipelineConfig, index: int) -> int:
    return cfg.seed * 1_000_003 + index


def cmd_synth(cfg: PipelineConfig, out_dir, log=_noop) -> Path:
    """Write the clip corpus and its manifest; regeneration is byte-identical."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    body = load_body(cfg)
    occluded = np.random.default_rng([cfg.seed, 2]).random(cfg.num_clips) < cfg.occluded_fraction
    entries = []
    for i in range(cfg.num_clips):
        seed = clip_seed(cfg, i)
        kind = cfg.motion_kinds[i % len(cfg.motion_kinds)]
        clip = make_clip(body, kind, cfg.clip_length, seed, fps=cfg.fps,
                         occlusion="random" if occluded[i] else "none", max_episodes=cfg.max_episodes)
        cid = f"clip_{i:05d}"
        clip.to_sequence().save(out / "clips" / f"{cid}.json")
        split = "heldout" if i >= cfg.num_clips - cfg.heldout_clips else "train"
        entries.append({"id": cid, "file": f"clips/{cid}.json", "kind": kind, "seed": seed, "split": split,
                        "occluded": bool(occluded[i]), "schedule": clip.schedule.to_json()})
    manifest = {"version": __version__, "config": cfg.to_json(), "clips": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    log(f"wrote {len(entries)} clips to {out}")
    return path


def load_manifest(data_dir) -> list[ClipEntry]:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"{path}: dataset manifest not found")
    try:
        doc = json.loads(path.read_text())
        return [ClipEntry(**e) for e in doc["clips"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from None


def _load_split(data_dir, split: str) -> list[tuple[ClipEntry, Sequence]]:
    root = Path(data_dir)
    return [(e, e.load(root)) for e in load_manifest(root) if e.split == split]


# --------------------------------------------------------------- checkpoints


def _save_ckpt(out: Path, name: str, config: dict, store: ad.ParamStore, epoch: int) -> None:
    (out / f"{name}.json").write_text(json.dumps({"config": config, "params": store.to_json()}))
    (out / f"{name}.opt.json").write_text(json.dumps({"epoch": epoch, "adam": store.optimizer_json()}))


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None


def _resume(out: Path, name: str, store: ad.ParamStore) -> int:
    """Load params and optimizer state if present; returns the epoch to continue from."""
    ckpt, opt = out / f"{name}.json", out / f"{name}.opt.json"
    if not (ckpt.exists() and opt.exists()):
        return 0
    store.load_json(_read_json(ckpt)["params"])
    doc = _read_json(opt)
    store.load_optimizer_json(doc["adam"])
    return int(doc["epoch"])


def _write_curve(path: Path, header: list[str], rows: list[list], append: bool) -> None:
    mode = "a" if append and path.exists() else "w"
    with path.open(mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])


@dataclass
class DeocclusionModels:
    detector: Detector
    lifter: Lifter
    predictor: MotionPredictor


def new_detector(cfg: PipelineConfig) -> Detector:
    return Detector(cfg.alpha, cfg.thred, cfg.detector_mode).init(np.random.default_rng([cfg.seed, 11]))


def new_lifter(cfg: PipelineConfig) -> Lifter:
    return Lifter(cfg.K).init(np.random.default_rng([cfg.seed, 12]))


def new_predictor(cfg: PipelineConfig) -> MotionPredictor:
    return MotionPredictor(cfg.mixer).init(np.random.default_rng([cfg.seed, 13]))


def load_deocclusion(cfg: PipelineConfig, ckpt_dir) -> DeocclusionModels:
    root = Path(ckpt_dir)
    det, lifter, pred = new_detector(cfg), new_lifter(cfg), new_predictor(cfg)
    for name, store in (("detector", det.store), ("lifter", lifter.store), ("predictor", pred.store)):
        store.load_json(_read_json(root / f"{name}.json")["params"])
    return DeocclusionModels(det, lifter, pred)


# ------------------------------------------------------------------ stage 1


def _crops(x: np.ndarray, length: int) -> list[np.ndarray]:
    if len(x) <= length:
        return [x]
    return [x[s:s + length] for s in range(0, len(x) - length + 1, length)]


def cmd_pretrain(cfg: PipelineConfig, data_dir, out_dir, resume: bool = False, log=_noop) -> dict:
    """Pre-train detector, lifter and predictor; writes checkpoints and training curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = _load_split(data_dir, "train")
    held = _load_split(data_dir, "heldout")
    if not train:
        raise DataError(f"{data_dir}: no training clips")
    summary: dict = {}

    # detector on clips carrying occlusion labels
    det = new_detector(cfg)
    start = _resume(out, "detector", det.store) if resume else 0
    occ = [(s.conf, s.visible) for e, s in train if e.occluded] or [(s.conf, s.visible) for _, s in train]
    occ_held = [(s.conf, s.visible) for e, s in held if e.occluded]
    res = train_detector(det, occ, cfg.detector_epochs, cfg.detector_lr, cfg.detector_batch,
                         seed=cfg.seed, loss=cfg.detector_loss, start_epoch=start,
                         log=lambda e, v: log(f"detector epoch {e + 1}: loss {v:.6f}"))
    _save_ckpt(out, "detector", {"alpha": cfg.alpha, "thred": cfg.thred, "mode": cfg.detector_mode},
               det.store, cfg.detector_epochs)
    _write_curve(out / "detector_curve.csv", ["epoch", "loss"],
                 [[start + i + 1, v] for i, v in enumerate(res.losses)], resume)
    if occ_held:
        summary["detector_f1"] = detector_f1(det, occ_held)

    # lifter on clean (unoccluded) clips
    lifter = new_lifter(cfg)
    start = _resume(out, "lifter", lifter.store) if resume else 0
    clean = [s for e, s in train if not e.occluded] or [s for _, s in train]
    pairs = [(a, b) for s in clean
             for a, b in zip(_crops(s.normalized_2d(), cfg.lifter_crop), _crops(s.joints3d, cfg.lifter_crop))]
    held_pairs = [(s.normalized_2d(), s.joints3d) for e, s in held if not e.occluded]
    res = pretrain_lifter(lifter, pairs, cfg.lifter_epochs, cfg.lifter_lr, cfg.lifter_batch,
                          heldout=held_pairs or None, seed=cfg.seed, start_epoch=start,
                          log=lambda e, v, h: log(f"lifter epoch {e + 1}: loss {v:.6f} heldout {h:.2f} mm"))
    _save_ckpt(out, "lifter", {"K": cfg.K}, lifter.store, cfg.lifter_epochs)
    _write_curve(out / "lifter_curve.csv", ["epoch", "loss", "heldout_mpjpe"],
                 [[start + i + 1, v, res.heldout_mpjpe[i] if res.heldout_mpjpe else float("nan")]
                  for i, v in enumerate(res.losses)], resume)
    if held_pairs:
        summary["lifter_mpjpe"] = evaluate_lifter(lifter, held_pairs)

    # predictor on ground-truth windows
    pred = new_predictor(cfg)
    start = _resume(out, "predictor", pred.store) if resume else 0
    hist, fut = make_windows([s.joints3d for _, s in train], cfg.N, cfg.L, cfg.predictor_stride)
    heldout = make_windows([s.joints3d for _, s in held], cfg.N, cfg.L, cfg.predictor_stride) if held else None
    res = pretrain_predictor(pred, hist, fut, cfg.predictor_epochs, cfg.predictor_lr, cfg.predictor_batch,
                             heldout=heldout, seed=cfg.seed, start_epoch=start,
                             log=lambda e, v, h: log(f"predictor epoch {e + 1}: loss {v:.6f} heldout {h:.2f} mm"))
    _save_ckpt(out, "predictor", {"N": cfg.N, "L": cfg.L, "m": cfg.m}, pred.store, cfg.predictor_epochs)
    _write_curve(out / "predictor_curve.csv", ["epoch", "loss", "heldout_mpjpe"],
                 [[start + i + 1, v, res.heldout_mpjpe[i] if res.heldout_mpjpe else float("nan")]
                  for i, v in enumerate(res.losses)], resume)
    if heldout is not None:
        summary["predictor_mpjpe"] = res.heldout_mpjpe[-1] if res.heldout_mpjpe else float("nan")
        summary["predictor_baseline_mpjpe"] = res.baseline_mpjpe
    _write_run(out, "pretrain", cfg, data_dir, summary)
    return summary


# --------------------------------------------------------------- de-occlusion


def deocclude(models: DeocclusionModels, seqs: list[Sequence]) -> tuple[np.ndarray, np.ndarray, list]:
    """Detector -> lifter -> completion for equal-length sequences.

    Returns lifted poses, completed poses (B, T, K, 3) and visibility reports.
    """
    conf = np.stack([s.conf for s in seqs])
    reports = [models.detector.detect(c) for c in conf]
    lifted = models.lifter.lift(np.stack([s.normalized_2d() for s in seqs]))
    visible = np.stack([r.visible for r in reports])
    return lifted, models.predictor.complete(lifted, visible), reports


def _group_by_length(seqs: list[Sequence]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(s.num_frames, []).append(i)
    return groups


def deocclude_all(models: DeocclusionModels, seqs: list[Sequence], batch: int = 16):
    lifted, completed, reports = [None] * len(seqs), [None] * len(seqs), [None] * len(seqs)
    for idx in _group_by_length(seqs).values():
        for i in range(0, len(idx), batch):
            part = idx[i:i + batch]
            lf, cp, rp = deocclude(models, [seqs[j] for j in part])
            for j, a, b, r in zip(part, lf, cp, rp):
                lifted[j], completed[j], reports[j] = a, b, r
    return lifted, completed, reports


def synth_features(cfg: PipelineConfig, seq: Sequence, seed: int) -> np.ndarray:
    if seq.theta is None or seq.beta is None or seq.visible is None:
        raise ConfigError("synthetic features need theta, beta and visible in the sequence file")
    return fabricate_features(seq.theta, seq.beta, seq.visible, cfg.feature_seed, cfg.feature_noise,
                              noise_seed=seed + 7919, zero_occluded=cfg.zero_occluded_features,
                              dim=cfg.feat_dim)


def fusion_target(body: BodyModel, seqs: list[Sequence]) -> FusionTarget:
    for s in seqs:
        if s.theta is None or s.beta is None or s.joints3d is None:
            raise DataError("training clips need theta, beta and joints3d")
    theta = np.stack([s.theta.reshape(-1, 24, 3) for s in seqs])
    beta = np.stack([s.beta for s in seqs])
    mesh = np.stack([gt_mesh(body, t, b) for t, b in zip(theta, beta)])
    return FusionTarget(theta, beta, mesh, np.stack([s.joints3d for s in seqs]))


# ------------------------------------------------------------------ stage 2


def new_fusion(cfg: PipelineConfig, body: BodyModel) -> FusionModel:
    return FusionModel(body, cfg.fusion).init(np.random.default_rng([cfg.seed, 14]))


def cmd_train(cfg: PipelineConfig, data_dir, pretrained_dir, out_dir, resume: bool = False, log=_noop) -> dict:
    """Stage 2: fusion, regression and refinement on completed motion and features."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = load_body(cfg)
    models = load_deocclusion(cfg, pretrained_dir)
    train = _load_split(data_dir, "train")
    if not train:
        raise DataError(f"{data_dir}: no training clips")
    lengths = {s.num_frames for _, s in train}
    if len(lengths) != 1:
        raise DataError(f"{data_dir}: stage 2 needs equal-length clips, found lengths {sorted(lengths)}")
    seqs = [s for _, s in train]
    feats = np.stack([synth_features(cfg, s, e.seed) for e, s in train])
    target = fusion_target(body, seqs)
    model = new_fusion(cfg, body)
    start = _resume(out, "fusion", model.store) if resume else 0
    logf = lambda e, row: log(f"train epoch {e + 1}: " + " ".join(f"{k} {v:.6f}" for k, v in row.items()))
    if cfg.freeze_deocclusion:
        _, p_com, _ = deocclude_all(models, seqs)
        res = train_fusion(model, np.stack(p_com), feats, target, cfg.train_epochs, cfg.train_lr, cfg.train_batch,
                           cfg.weights, seed=cfg.seed, log=logf, start_epoch=start)
        history = res.history
        # the output directory is self-contained for recover/eval
        for name in ("detector", "lifter", "predictor"):
            shutil.copyfile(Path(pretrained_dir) / f"{name}.json", out / f"{name}.json")
    else:
        history = _train_unfrozen(cfg, model, models, seqs, feats, target, start, logf)
        shutil.copyfile(Path(pretrained_dir) / "detector.json", out / "detector.json")
        for name, store in (("lifter", models.lifter.store), ("predictor", models.predictor.store)):
            _save_ckpt(out, name, {}, store, cfg.train_epochs)
    _save_ckpt(out, "fusion", {"fusion_mode": cfg.fusion_mode, "refine_mode": cfg.refine_mode},
               model.store, cfg.train_epochs)
    cols = ["pose", "shape", "mesh", "joint", "total"]
    _write_curve(out / "train_curve.csv", ["epoch"] + cols,
                 [[start + i + 1] + [row[c] for c in cols] for i, row in enumerate(history)], resume)
    summary = {"final": history[-1] if history else {}, "first": history[0] if history else {}}
    _write_run(out, "train", cfg, data_dir, summary, pretrained=str(pretrained_dir))
    return summary


def _train_unfrozen(cfg, model, models, seqs, feats, target, start, log) -> list[dict]:
    """End-to-end fine-tuning through the lifter and the differentiable completion.

    The detector stays fixed: its thresholded output carries no gradient.
    """
    reports = [models.detector.detect(s.conf) for s in seqs]
    visible = np.stack([r.visible for r in reports])
    p2d = np.stack([s.normalized_2d() for s in seqs])
    stores = [model.store, models.lifter.store, models.predictor.store]
    n = len(seqs)
    history = []
    for epoch in range(start, cfg.train_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums: dict[str, float] = {}
        for i in range(0, n, cfg.train_batch):
            idx = order[i:i + cfg.train_batch]
            with ad.Tape() as tape:
                lifted = models.lifter.lift_t(p2d[idx])
                p_com = complete_t(models.predictor, lifted, visible[idx])
                out = model.forward(p_com, feats[idx])
                parts = model.losses(out, target.take(idx))
                loss = total_loss(parts, cfg.weights)
            ad.backward(loss, tape)
            for st in stores:
                ad.adam_step(st, cfg.train_lr)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item() * len(idx)
            sums["total"] = sums.get("total", 0.0) + loss.item() * len(idx)
        row = {k: v / n for k, v in sums.items()}
        history.append(row)
        log(epoch, row)
    return history


# ------------------------------------------------------------------ inference


@dataclass
class Recovery:
    lifted: np.ndarray
    completed: np.ndarray
    report: VisibilityReport
    params: BodyParams
    mesh: np.ndarray  # T x V x 3, root-relative
    joints3d: np.ndarray  # T x K x 3, root-relative


def recover(cfg: PipelineConfig, models: DeocclusionModels, fusion: FusionModel,
            seqs: list[Sequence], feats: list[np.ndarray]) -> list[Recovery]:
    out: list[Recovery | None] = [None] * len(seqs)
    lifted, completed, reports = deocclude_all(models, seqs)
    body = fusion.body
    for idx in _group_by_length(seqs).values():
        for i in range(0, len(idx), 16):
            part = idx[i:i + 16]
            res = fusion.forward(np.stack([completed[j] for j in part]), np.stack([feats[j] for j in part]))
            for b, j in enumerate(part):
                T = seqs[j].num_frames
                beta = res.beta.numpy()[b].astype(np.float64)
                theta = res.theta_aa.numpy()[b].astype(np.float64).reshape(T, 72)
                rots = matrix_from_axis_angle(theta.reshape(T, 24, 3))
                J0 = body.rest_joints(beta)[..., 0, :]
                mesh = skin(body, beta, rots, -J0)
                out[j] = Recovery(lifted[j], completed[j], reports[j], BodyParams(beta, theta), mesh,
                                  regress_joints(body.joint_regressor_eval, mesh))
    return out


def load_fusion(cfg: PipelineConfig, ckpt_dir, body: BodyModel) -> FusionModel:
    model = new_fusion(cfg, body)
    model.store.load_json(_read_json(Path(ckpt_dir) / "fusion.json")["params"])
    return model


def cmd_complete(cfg: PipelineConfig, seq_path, ckpt_dir, out_path) -> Path:
    seq = Sequence.load(seq_path)
    models = load_deocclusion(cfg, ckpt_dir)
    lifted, completed, reports = deocclude(models, [seq])
    out = Sequence(seq.joints2d, seq.conf, seq.width, seq.height, seq.fps, completed[0], reports[0].visible,
                   seq.beta, seq.theta)
    out_path = Path(out_path)
    out.save(out_path)
    reports[0].save(out_path.with_name(out_path.stem + ".visibility.json"))
    return out_path


def cmd_recover(cfg: PipelineConfig, seq_path, ckpt_dir, out_dir, features_path=None,
                use_synth_features: bool = False, export_obj: bool = False) -> Path:
    seq = Sequence.load(seq_path)
    if features_path is not None:
        feats = load_features(features_path)
        if feats.shape != (seq.num_frames, cfg.feat_dim):
            raise DataError(f"{features_path}: features must be {seq.num_frames} x {cfg.feat_dim}, "
                            f"got {feats.shape[0]} x {feats.shape[1]}")
    elif use_synth_features:
        feats = synth_features(cfg, seq, seed=0)
    else:
        raise ConfigError("no feature file given; pass --features or --synth-features")
    body = load_body(cfg)
    rec = recover(cfg, load_deocclusion(cfg, ckpt_dir), load_fusion(cfg, ckpt_dir, body), [seq], [feats])[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec.params.save(out / "body_params.json")
    rec.report.save(out / "visibility.json")
    if export_obj:
        (out / "obj").mkdir(exist_ok=True)
        for t, verts in enumerate(rec.mesh):
            write_obj(out / "obj" / f"frame_{t:05d}.obj", verts, body.faces)
    return out


# ----------------------------------------------------------------- evaluation


def clip_report(clip_id: str, rec_joints, rec_mesh, seq: Sequence, gt_verts) -> MetricReport:
    gt = seq.joints3d
    occ = ~seq.visible if seq.visible is not None else np.zeros(gt.shape[:2], bool)
    occ_err = float(per_joint_error(rec_joints, gt)[occ].mean()) if occ.any() else float("nan")
    acc = accel_error(rec_joints, gt) if len(gt) >= 3 else float("nan")
    return MetricReport(clip_id, len(gt), seq.fps, mpjpe(rec_joints, gt), pa_mpjpe(rec_joints, gt),
                        mpvpe(rec_mesh, gt_verts), acc, occ_err,
                        per_joint_error(rec_joints, gt).mean(axis=0).tolist())


def cmd_eval(cfg: PipelineConfig, data_dir, ckpt_dir, out_dir, predictions_dir=None) -> list[MetricReport]:
    """Metrics on held-out clips, either by running the pipeline or from saved BodyParams files."""
    body = load_body(cfg)
    held = _load_split(data_dir, "heldout")
    if not held:
        raise DataError(f"{data_dir}: no held-out clips")
    for e, s in held:
        if s.joints3d is None or s.theta is None or s.beta is None:
            raise DataError(f"{e.file}: held-out clips need joints3d, theta and beta")
    if predictions_dir is None:
        feats = [synth_features(cfg, s, e.seed) for e, s in held]
        recs = recover(cfg, load_deocclusion(cfg, ckpt_dir), load_fusion(cfg, ckpt_dir, body),
                       [s for _, s in held], feats)
        preds = {e.id: (r.joints3d, r.mesh) for (e, _), r in zip(held, recs)}
    else:
        preds = _load_predictions(body, Path(predictions_dir), [e.id for e, _ in held])
    reports = []
    for e, s in held:
        joints, mesh = preds[e.id]
        reports.append(clip_report(e.id, joints, mesh, s, gt_mesh(body, s.theta, s.beta)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    (out / "metrics.json").write_text(reports_to_json(reports))
    _write_run(out, "eval", cfg, data_dir, {"metrics": "metrics.csv"}, checkpoints=str(ckpt_dir))
    return reports


def _load_predictions(body: BodyModel, root: Path, ids: list[str]) -> dict:
    if not root.is_dir():
        raise DataError(f"{root}: predictions directory not found")
    have = {p.stem for p in root.glob("*.json")}
    missing = [i for i in ids if i not in have]
    extra = sorted(have - set(ids))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"no predictions for clip(s) {', '.join(missing)}")
        if extra:
            parts.append(f"predictions for unknown clip(s) {', '.join(extra)}")
        raise DataError(f"{root}: " + "; ".join(parts))
    preds = {}
    for i in ids:
        doc = _read_json(root / f"{i}.json")
        beta = np.asarray(doc["beta"], np.float64)
        theta = np.asarray(doc["theta_axis_angle"], np.float64).reshape(len(beta), 24, 3)
        J0 = body.rest_joints(beta)[..., 0, :]
        mesh = skin(body, beta, matrix_from_axis_angle(theta), -J0)
        preds[i] = (regress_joints(body.joint_regressor_eval, mesh), mesh)
    return preds


# -------------------------------------------------------------------- manifest


def _write_run(out: Path, stage: str, cfg: PipelineConfig, data_dir, summary: dict, **paths) -> None:
    doc = {"stage": stage, "version": version_string(), "config": cfg.to_json(), "seed": cfg.seed,
           "data": str(data_dir), "checkpoints": sorted(p.name for p in out.glob("*.json")
                                                          if not p.name.startswith("run")),
           "summary": summary} | paths
    (out / f"run_{stage}.json").write_text(json.dumps(doc, indent=1, default=float))


# ------------------------------------------------------------------ gradcheck

GRADCHECK_MODULES = ("linear", "lifter", "detector", "mixer", "context", "attention", "heads", "refine",
                     "fusion")


def gradcheck_module(name: str, seed: int = 0, samples: int = 3, tol: float = 1e-4) -> ad.GradcheckReport:
    """Finite-difference check of one learned module in 64-bit mode."""
    from . import layers
    from .fusion import FusionConfig, cross_attend, fuse, init_fusion, motion_context, refine_pose, \
        regress_shape_pose
    from .predictor import MixerConfig

    rng = np.random.default_rng(seed)
    store = ad.ParamStore()

    def readout(x, shape_seed=1):
        r = np.random.default_rng(shape_seed).normal(size=x.shape)
        return ad.tsum(x * r)

    if name == "linear":
        layers.init_linear(store, "lin", 5, 4, rng)
        x = rng.normal(size=(3, 5))
        fn = lambda s: readout(layers.linear(s, "lin", x))
    elif name == "lifter":
        Lifter(17, store=store).init(rng)
        x = rng.uniform(-1, 1, size=(2, 3, 17, 2))
        fn = lambda s: readout(Lifter(17, store=s).lift_t(x))
    elif name == "detector":
        Detector(store=store).init(rng)
        store["det.head.w"][...] = rng.normal(0, 0.05, store["det.head.w"].shape)
        conf = rng.uniform(0.3, 0.7, size=(2, 6, 4))
        fn = lambda s: readout(Detector(store=s).final_confidence_t(conf))
    elif name == "mixer":
        cfg = MixerConfig()
        MotionPredictor(cfg, store).init(rng)
        store["mix.w_out"][...] = rng.normal(0, 0.05, store["mix.w_out"].shape)
        hist = rng.normal(0, 0.3, size=(2, cfg.N, cfg.K, 3))
        fn = lambda s: readout(MotionPredictor(cfg, s).predict_t(hist))
    else:
        fcfg = FusionConfig()
        init_fusion(store, fcfg, rng)
        for n in store.names("refine."):
            store[n][...] = rng.normal(0, 0.05, store[n].shape)
        T = 3
        p_com = rng.normal(0, 0.3, size=(1, T, 17, 3))
        feats = rng.normal(size=(1, T, fcfg.feat_dim))
        if name == "context":
            fn = lambda s: readout(motion_context(s, fcfg, p_com))
        elif name == "attention":
            cm = rng.normal(size=(1, T, fcfg.context_dim))
            fn = lambda s: readout(cross_attend(s, fcfg, cm, feats))
        elif name == "heads":
            fp = rng.normal(size=(1, T, fcfg.ctx_dim))

            def fn(s):
                beta, theta = regress_shape_pose(s, fp)
                twist = layers.mlp(s, "head.twist", ad.Tensor(fp))
                return readout(beta, 2) + readout(theta, 3) + readout(twist, 4)
        elif name == "refine":
            fp = rng.normal(size=(1, T, fcfg.ctx_dim))
            th = rng.normal(size=(1, T, 24, 6))
            fn = lambda s: readout(refine_pose(s, fcfg, p_com, fp, ad.Tensor(th))[0])
        elif name == "fusion":
            body = toy_body_model()
            target = FusionTarget(rng.normal(0, 0.3, (1, T, 24, 3)), rng.normal(size=(1, 10)),
                                  rng.normal(0, 0.3, (1, T, body.num_vertices, 3)),
                                  rng.normal(0, 0.3, (1, T, 17, 3)))
            def fn(s):
                model = FusionModel(body, fcfg, s)
                out = model.forward(p_com, feats)
                return total_loss(model.losses(out, target))
        else:
            raise ConfigError(f"unknown gradcheck module {name!r}; choose from {', '.join(GRADCHECK_MODULES)}")
    return ad.gradcheck(fn, store, samples=samples, seed=seed, tol=tol)
