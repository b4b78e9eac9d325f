import json
import subprocess
import sys
import time

import numpy as np
import pytest

from occmotion import autodiff as ad
from occmotion import pipeline
from occmotion.cli import main
from occmotion.config import PipelineConfig
from occmotion.errors import ConfigError, DataError
from occmotion.metrics import MetricReport, aggregate
from occmotion.sequence import Sequence

TINY = dict(num_clips=6, heldout_clips=2, clip_length=30, occluded_fraction=0.5, feat_dim=64, ctx_dim=32, heads=4,
            m=2, detector_epochs=2, lifter_epochs=1, lifter_crop=15, predictor_epochs=2, predictor_stride=4,
            train_epochs=2, train_batch=4)


def tiny(**kw) -> PipelineConfig:
    return PipelineConfig.from_json(TINY | kw)


def write_cfg(path, **kw):
    path.write_text(json.dumps(TINY | kw))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny()
    pipeline.cmd_synth(cfg, root / "data")
    pipeline.cmd_pretrain(cfg, root / "data", root / "pre")
    pipeline.cmd_train(cfg, root / "data", root / "pre", root / "ckpt")
    return cfg, root


# ------------------------------------------------------------------ synth


def test_synth_is_byte_identical(tmp_path):
    cfg = tiny(num_clips=3, heldout_clips=1)
    pipeline.cmd_synth(cfg, tmp_path / "a")
    pipeline.cmd_synth(cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.json")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_manifest_and_splits(run):
    cfg, root = run
    entries = pipeline.load_manifest(root / "data")
    assert len(entries) == 6
    assert [e.split for e in entries] == ["train"] * 4 + ["heldout"] * 2
    seq = entries[0].load(root / "data")
    assert seq.num_frames == 30 and seq.theta.shape == (30, 72)


def test_single_frame_clips(tmp_path):
    cfg = tiny(num_clips=2, heldout_clips=1, clip_length=1)
    pipeline.cmd_synth(cfg, tmp_path)
    seq = pipeline.load_manifest(tmp_path)[0].load(tmp_path)
    assert seq.num_frames == 1 and seq.joints3d.shape == (1, 17, 3)


@pytest.mark.slow
def test_large_walk_corpus_is_fast(tmp_path):
    cfg = PipelineConfig(num_clips=2000, heldout_clips=0, motion_kinds=["walk"])
    t = time.perf_counter()
    pipeline.cmd_synth(cfg, tmp_path)
    elapsed = time.perf_counter() - t
    print(f"2000-clip synth: {elapsed:.1f} s")
    assert elapsed < 120
    assert len(list((tmp_path / "clips").glob("*.json"))) == 2000


# --------------------------------------------------------------- pretrain


def test_zero_epochs_checkpoints_equal_initialisation(tmp_path, run):
    _, root = run
    cfg = tiny(detector_epochs=0, lifter_epochs=0, predictor_epochs=0)
    pipeline.cmd_pretrain(cfg, root / "data", tmp_path)
    for name, model in (("detector", pipeline.new_detector(cfg)), ("lifter", pipeline.new_lifter(cfg)),
                        ("predictor", pipeline.new_predictor(cfg))):
        saved = json.loads((tmp_path / f"{name}.json").read_text())["params"]
        assert saved == json.loads(json.dumps(model.store.to_json()))


def test_pretrain_writes_finite_curves(run):
    _, root = run
    for name in ("detector", "lifter", "predictor"):
        lines = (root / "pre" / f"{name}_curve.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,loss")
        vals = np.array([float(v) for line in lines[1:] for v in line.split(",")[1:2]])
        assert np.all(np.isfinite(vals))
    doc = json.loads((root / "pre" / "run_pretrain.json").read_text())
    assert doc["stage"] == "pretrain" and doc["seed"] == 0 and "predictor.json" in doc["checkpoints"]


def test_resume_continues_identically(tmp_path, run):
    _, root = run
    full, part = tmp_path / "full", tmp_path / "part"
    pipeline.cmd_pretrain(tiny(detector_epochs=3, lifter_epochs=2, predictor_epochs=3), root / "data", full)
    pipeline.cmd_pretrain(tiny(detector_epochs=2, lifter_epochs=1, predictor_epochs=2), root / "data", part)
    pipeline.cmd_pretrain(tiny(detector_epochs=3, lifter_epochs=2, predictor_epochs=3), root / "data", part,
                          resume=True)
    for name in ("detector", "lifter", "predictor"):
        assert (full / f"{name}_curve.csv").read_text() == (part / f"{name}_curve.csv").read_text()
        assert (full / f"{name}.json").read_bytes() == (part / f"{name}.json").read_bytes()


def test_pretrain_missing_dataset(tmp_path):
    with pytest.raises(DataError, match="manifest not found"):
        pipeline.cmd_pretrain(tiny(), tmp_path / "nope", tmp_path / "out")


# ------------------------------------------------------------------ train


def test_frozen_stage_keeps_deocclusion_models(run):
    cfg, root = run
    for name in ("detector", "lifter", "predictor"):
        assert (root / "ckpt" / f"{name}.json").read_bytes() == (root / "pre" / f"{name}.json").read_bytes()
    before = pipeline.load_deocclusion(cfg, root / "pre")
    seqs = [s for _, s in pipeline._load_split(root / "data", "train")]
    a = pipeline.deocclude(before, seqs)[1]
    b = pipeline.deocclude(pipeline.load_deocclusion(cfg, root / "ckpt"), seqs)[1]
    np.testing.assert_array_equal(a, b)
    curve = (root / "ckpt" / "train_curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,pose,shape,mesh,joint,total" and len(curve) == 3


def test_unfrozen_stage_changes_lifter_and_predictor(tmp_path, run):
    _, root = run
    cfg = tiny(freeze_deocclusion=False, train_epochs=1)
    pipeline.cmd_train(cfg, root / "data", root / "pre", tmp_path)
    assert (tmp_path / "detector.json").read_bytes() == (root / "pre" / "detector.json").read_bytes()
    for name in ("lifter", "predictor"):
        new = json.loads((tmp_path / f"{name}.json").read_text())["params"]
        old = json.loads((root / "pre" / f"{name}.json").read_text())["params"]
        assert new != old


def test_train_resume_matches_uninterrupted(tmp_path, run):
    _, root = run
    pipeline.cmd_train(tiny(train_epochs=3), root / "data", root / "pre", tmp_path / "full")
    pipeline.cmd_train(tiny(train_epochs=2), root / "data", root / "pre", tmp_path / "part")
    pipeline.cmd_train(tiny(train_epochs=3), root / "data", root / "pre", tmp_path / "part", resume=True)
    assert (tmp_path / "full" / "train_curve.csv").read_text() == (tmp_path / "part" / "train_curve.csv").read_text()
    assert (tmp_path / "full" / "fusion.json").read_bytes() == (tmp_path / "part" / "fusion.json").read_bytes()


# ---------------------------------------------------------------- recover


def _clean_sequence(cfg, path, T=30):
    from occmotion.bodymodel import toy_body_model
    from occmotion.synth import make_clip
    make_clip(toy_body_model(), "walk", T, 777, occlusion="none").to_sequence().save(path)
    return path


def test_recover_clean_input_completion_is_noop(run, tmp_path):
    cfg, root = run
    seq = Sequence.load(_clean_sequence(cfg, tmp_path / "clean.json"))
    models = pipeline.load_deocclusion(cfg, root / "ckpt")
    fusion = pipeline.load_fusion(cfg, root / "ckpt", pipeline.load_body(cfg))
    rec = pipeline.recover(cfg, models, fusion, [seq], [pipeline.synth_features(cfg, seq, 0)])[0]
    assert rec.report.visible.all()
    assert rec.completed.tobytes() == rec.lifted.tobytes()


def test_recover_outputs_and_determinism(run, tmp_path):
    cfg, root = run
    seq = _clean_sequence(cfg, tmp_path / "s.json")
    a = pipeline.cmd_recover(cfg, seq, root / "ckpt", tmp_path / "a", use_synth_features=True, export_obj=True)
    b = pipeline.cmd_recover(cfg, seq, root / "ckpt", tmp_path / "b", use_synth_features=True)
    assert (a / "body_params.json").read_bytes() == (b / "body_params.json").read_bytes()
    doc = json.loads((a / "body_params.json").read_text())
    assert np.shape(doc["beta"]) == (30, 10) and np.shape(doc["theta_axis_angle"]) == (30, 72)
    assert (a / "visibility.json").exists() and len(list((a / "obj").glob("*.obj"))) == 30


def test_recover_feature_errors(run, tmp_path):
    cfg, root = run
    seq = _clean_sequence(cfg, tmp_path / "s.json")
    with pytest.raises(ConfigError, match="--features"):
        pipeline.cmd_recover(cfg, seq, root / "ckpt", tmp_path / "o")
    bad = tmp_path / "f.json"
    bad.write_text(json.dumps({"frames": np.zeros((30, 7)).tolist()}))
    with pytest.raises(DataError, match="30 x 64"):
        pipeline.cmd_recover(cfg, seq, root / "ckpt", tmp_path / "o", features_path=bad)


def test_complete_command(run, tmp_path):
    cfg, root = run
    entry = [e for e in pipeline.load_manifest(root / "data") if e.occluded][0]
    out = pipeline.cmd_complete(cfg, root / "data" / entry.file, root / "ckpt", tmp_path / "done.json")
    done = Sequence.load(out)
    assert done.joints3d.shape == (30, 17, 3)
    assert (tmp_path / "done.visibility.json").exists()


@pytest.mark.slow
def test_recover_default_sizes_under_five_seconds(tmp_path):
    cfg = PipelineConfig(num_clips=2, heldout_clips=1, detector_epochs=0, lifter_epochs=0, predictor_epochs=0,
                         train_epochs=0)
    pipeline.cmd_synth(cfg, tmp_path / "data")
    pipeline.cmd_pretrain(cfg, tmp_path / "data", tmp_path / "pre")
    pipeline.cmd_train(cfg, tmp_path / "data", tmp_path / "pre", tmp_path / "ckpt")
    seq = tmp_path / "data" / pipeline.load_manifest(tmp_path / "data")[0].file
    t = time.perf_counter()
    pipeline.cmd_recover(cfg, seq, tmp_path / "ckpt", tmp_path / "out", use_synth_features=True)
    elapsed = time.perf_counter() - t
    print(f"81-frame recover: {elapsed:.2f} s")
    assert elapsed < 5.0


# ------------------------------------------------------------------- eval


def _gt_predictions(root, dest):
    dest.mkdir()
    for e in pipeline.load_manifest(root / "data"):
        if e.split == "heldout":
            seq = e.load(root / "data")
            (dest / f"{e.id}.json").write_text(json.dumps({"beta": np.tile(seq.beta, (seq.num_frames, 1)).tolist(),
                                                            "theta_axis_angle": seq.theta.tolist()}))
    return dest


def test_eval_perfect_predictions_score_zero(run, tmp_path):
    cfg, root = run
    reports = pipeline.cmd_eval(cfg, root / "data", root / "ckpt", tmp_path / "ev",
                                _gt_predictions(root, tmp_path / "pred"))
    for r in reports:
        # ground-truth joints are stored at micrometre precision
        assert r.mpjpe < 1e-2 and r.pa_mpjpe < 1e-2 and r.mpvpe < 1e-9 and r.accel_error < 1e-1
        assert np.isnan(r.mpjpe_occluded) or r.mpjpe_occluded < 1e-2


def test_eval_unmatched_ids_are_listed(run, tmp_path):
    cfg, root = run
    pred = _gt_predictions(root, tmp_path / "pred")
    first = sorted(pred.glob("*.json"))[0]
    first.rename(pred / "clip_99999.json")
    with pytest.raises(DataError) as err:
        pipeline.cmd_eval(cfg, root / "data", root / "ckpt", tmp_path / "ev", pred)
    assert first.stem in str(err.value) and "clip_99999" in str(err.value)


def test_eval_pipeline_report_format(run, tmp_path):
    cfg, root = run
    reports = pipeline.cmd_eval(cfg, root / "data", root / "ckpt", tmp_path / "a")
    pipeline.cmd_eval(cfg, root / "data", root / "ckpt", tmp_path / "b")
    csv_a = (tmp_path / "a" / "metrics.csv").read_text()
    assert csv_a == (tmp_path / "b" / "metrics.csv").read_text()
    header = csv_a.splitlines()[0].split(",")
    assert header[:2] == ["clip", "frames"] and "mpjpe_occluded" in header
    assert len(csv_a.splitlines()) == len(reports) + 2  # clips plus the aggregate row
    doc = json.loads((tmp_path / "a" / "metrics.json").read_text())
    agg = aggregate(reports)
    for key in ("mpjpe", "pa_mpjpe", "mpvpe", "accel_error"):
        assert abs(doc["aggregate"][key] - np.mean([getattr(r, key) for r in reports])) <= 1e-9
        assert abs(getattr(agg, key) - doc["aggregate"][key]) <= 1e-9


# -------------------------------------------------------------------- CLI


def test_cli_full_run_and_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", num_clips=3, heldout_clips=1, detector_epochs=1, predictor_epochs=1,
                    train_epochs=1)
    data, pre, ck = str(tmp_path / "d"), str(tmp_path / "p"), str(tmp_path / "k")
    assert main(["-q", "--config", cfg, "synth", data]) == 0
    assert main(["-q", "--config", cfg, "pretrain", data, pre]) == 0
    assert main(["-q", "--config", cfg, "train", data, pre, ck]) == 0
    assert main(["-q", "--config", cfg, "eval", data, ck, str(tmp_path / "e")]) == 0
    seq = str(tmp_path / "d" / "clips" / "clip_00000.json")
    assert main(["-q", "--config", cfg, "recover", seq, ck, str(tmp_path / "r"), "--synth-features"]) == 0
    assert main(["-q", "--config", cfg, "complete", seq, ck, str(tmp_path / "c.seq.json")]) == 0
    # usage and config errors
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    assert main(["--config", str(tmp_path / "missing.json"), "synth", data]) == 1
    assert main(["-q", "--config", cfg, "recover", seq, ck, str(tmp_path / "r")]) == 1
    # data errors
    assert main(["-q", "--config", cfg, "recover", str(tmp_path / "nope.json"), ck, str(tmp_path / "r"),
                 "--synth-features"]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text('{"K": 17, "fps": 30, "width": 10, "height": 10, "frames": [{"joints2d": [[0, 0]], "conf": [1]}]}')
    assert main(["-q", "--config", cfg, "recover", str(broken), ck, str(tmp_path / "r"), "--synth-features"]) == 2
    err = capsys.readouterr().err
    assert "broken.json" in err and "joints2d" in err


def test_cli_gradcheck(capsys, monkeypatch):
    assert main(["gradcheck", "linear"]) == 0
    assert capsys.readouterr().out.startswith("PASS linear")
    monkeypatch.setattr(ad, "_sigmoid_grad", lambda g, out: 2.0 * g * out * (1.0 - out))
    assert main(["gradcheck", "detector"]) == 3
    assert "FAIL detector" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "occmotion", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout


def test_metric_report_aggregate_skips_nan():
    a = MetricReport("a", 3, 30.0, 1.0, 1.0, 1.0, 1.0, float("nan"), [1.0])
    b = MetricReport("b", 3, 30.0, 3.0, 3.0, 3.0, 3.0, 4.0, [3.0])
    agg = aggregate([a, b])
    assert agg.mpjpe == 2.0 and agg.mpjpe_occluded == 4.0
