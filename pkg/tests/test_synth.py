import numpy as np
import pytest

from occmotion.errors import ConfigError, ProjectionError
from occmotion.sequence import Sequence, load_features, save_features
from occmotion.synth import (MOTION_KINDS, VISIBLE_CONFIDENCE, CameraModel, Episode, OcclusionSchedule,
                             apply_occlusion, fabricate_features, generate_motion, gt_mesh, make_clip, project,
                             random_schedule)
from occmotion.bodymodel import regress_joints


@pytest.mark.parametrize("kind", MOTION_KINDS)
def test_motion_is_deterministic(kind):
    a, b = generate_motion(kind, 20, 7), generate_motion(kind, 20, 7)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.beta, b.beta)
    assert not np.array_equal(a.theta, generate_motion(kind, 20, 8).theta)


def test_single_frame_motion(body):
    clip = make_clip(body, "walk", 1, 3)
    assert clip.joints3d.shape == (1, 17, 3)
    np.testing.assert_array_equal(clip.joints3d[:, 0], 0.0)


def test_motion_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        generate_motion("dance", 10, 0)
    with pytest.raises(ConfigError):
        generate_motion("walk", 0, 0)


def test_velocity_sanity_over_100_seeds(body):
    worst = 0.0
    for seed in range(100):
        clip = make_clip(body, MOTION_KINDS[seed % 4], 60, seed, occlusion="none")
        v = np.linalg.norm(np.diff(clip.joints_world, axis=0), axis=-1) * clip.fps
        worst = max(worst, v.max())
    assert worst < 5.0


def test_projection_examples():
    cam = CameraModel()
    np.testing.assert_allclose(project(np.array([[[0.0, 0.0, 3.0]]]), cam)[0, 0], [500, 500])
    np.testing.assert_allclose(project(np.array([[[1.0, 0.0, 5.0]]]), cam)[0, 0], [700, 500])
    near = project(np.array([[[0.4, -0.3, 2.0]]]), cam)[0, 0] - 500
    far = project(np.array([[[0.4, -0.3, 4.0]]]), cam)[0, 0] - 500
    np.testing.assert_allclose(far, near / 2)
    with pytest.raises(ProjectionError, match="frame=0, joint=1"):
        project(np.array([[[0, 0, 1.0], [0, 0, -1.0]]]), cam)


def test_view_frame_is_y_up(body):
    clip = make_clip(body, "walk", 5, 2, occlusion="none")
    head, pelvis = 10, 0
    assert np.all(clip.joints3d[:, head, 1] > clip.joints3d[:, pelvis, 1] + 0.3)


def test_empty_schedule_keeps_clean_projection(body, rng):
    clean = rng.uniform(100, 900, size=(30, 17, 2))
    j2d, conf, vis = apply_occlusion(clean, OcclusionSchedule(), seed=1)
    assert vis.all()
    assert np.abs(j2d - clean).max() <= 1.0
    assert conf.min() >= VISIBLE_CONFIDENCE[0]


def test_drop_episode_labels_exact(rng):
    clean = rng.uniform(100, 900, size=(40, 17, 2))
    sched = OcclusionSchedule([Episode(10, 29, (5,), "drop")])
    _, conf, vis = apply_occlusion(clean, sched, seed=1)
    expect = np.ones((40, 17), bool)
    expect[10:30, 5] = False
    np.testing.assert_array_equal(vis, expect)
    assert conf[10:30, 5].max() <= 0.2


def test_freeze_episode_is_constant(rng):
    clean = rng.uniform(100, 900, size=(40, 17, 2))
    j2d, _, _ = apply_occlusion(clean, OcclusionSchedule([Episode(5, 15, (12, 13), "freeze")]), seed=2)
    np.testing.assert_array_equal(j2d[5:16, [12, 13]], np.broadcast_to(j2d[5, [12, 13]], (11, 2, 2)))


def test_overlapping_episodes_warn(rng):
    clean = rng.uniform(100, 900, size=(20, 17, 2))
    sched = OcclusionSchedule([Episode(0, 9, (3,)), Episode(5, 12, (3, 4))])
    with pytest.warns(UserWarning, match="overlaps"):
        apply_occlusion(clean, sched, seed=0)


def test_schedule_validation_and_json():
    with pytest.raises(ConfigError):
        OcclusionSchedule([Episode(5, 50, (1,))]).validate(40, 17)
    with pytest.raises(ConfigError):
        Episode(0, 1, (1,), "smudge")
    s = random_schedule(81, np.random.default_rng(3), max_episodes=3)
    assert OcclusionSchedule.from_json(s.to_json()) == s


def test_features_deterministic_and_beta_sensitive(body):
    clip = make_clip(body, "wave", 12, 5)
    a = fabricate_features(clip.theta, clip.beta, clip.visible, 0, 0.0)
    b = fabricate_features(clip.theta, clip.beta, clip.visible, 0, 0.0)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (12, 1024)
    c = fabricate_features(clip.theta, clip.beta + 0.1, clip.visible, 0, 0.0)
    assert np.abs(a - c).max() > 1e-3


def test_linear_probe_recovers_beta(body):
    X, Y = [], []
    # 400 training clips keep the 1024-dim least-squares fit well determined
    for seed in range(500):
        clip = make_clip(body, MOTION_KINDS[seed % 4], 8, 500 + seed)
        X.append(clip.features(noise_sigma=0.1))
        Y.append(np.broadcast_to(clip.beta, (8, 10)))
    X, Y = np.concatenate(X), np.concatenate(Y)
    n = 400 * 8
    W, *_ = np.linalg.lstsq(np.c_[X[:n], np.ones(n)], Y[:n], rcond=None)
    pred = np.c_[X[n:], np.ones(len(X) - n)] @ W
    r2 = 1 - ((pred - Y[n:]) ** 2).sum() / ((Y[n:] - Y[n:].mean(0)) ** 2).sum()
    assert r2 > 0.9


def test_gt_mesh_is_root_relative(body):
    clip = make_clip(body, "squat", 4, 1)
    mesh = gt_mesh(body, clip.theta, clip.beta)
    J = regress_joints(body.joint_regressor_eval, mesh)
    np.testing.assert_allclose(J - J[:, :1], clip.joints3d, atol=1e-9)


def test_sequence_round_trip(body, tmp_path):
    seq = make_clip(body, "walk", 6, 4).to_sequence()
    seq.save(tmp_path / "s.json")
    again = Sequence.load(tmp_path / "s.json")
    np.testing.assert_allclose(again.joints2d, seq.joints2d, atol=1e-6)
    np.testing.assert_array_equal(again.visible, seq.visible)
    np.testing.assert_allclose(again.theta, seq.theta, atol=1e-6)


def test_sequence_parse_error_names_field(tmp_path):
    (tmp_path / "bad.json").write_text('{"fps": 30, "K": 17, "width": 1000, "height": 1000, '
                                       '"frames": [{"joints2d": [[0, 0]], "conf": [1.0]}]}')
    with pytest.raises(Exception, match="frame 0: field 'joints2d'"):
        Sequence.load(tmp_path / "bad.json")


def test_features_file_round_trip(tmp_path, rng):
    f = rng.normal(size=(5, 1024))
    save_features(tmp_path / "f.json", f)
    np.testing.assert_allclose(load_features(tmp_path / "f.json"), f, atol=1e-6)
