import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occmotion import autodiff as ad
from occmotion.errors import ContractError, DimensionError
from occmotion.kinematics import matrix_from_axis_angle, quat_to_matrix
from occmotion.metrics import (REPORT_COLUMNS, LossWeights, MetricReport, accel_error, aggregate, loss_joint,
                               loss_mesh, loss_pose, loss_pred, loss_shape, mpjpe, mpvpe, pa_mpjpe,
                               reports_to_csv, reports_to_json, total_loss)


def val(t):
    return float(ad.as_tensor(t).item())


# ------------------------------------------------------------------ losses


def test_loss_pred_examples(rng):
    gt = rng.normal(size=(1, 17, 3))
    assert val(loss_pred(gt, gt)) == 0.0
    pred = gt.copy()
    pred[0, 4, 1] += 0.03
    with ad.float64_mode():
        assert abs(val(loss_pred(pred, gt)) - 0.03 / 51) < 1e-12
    swapped = gt.copy()
    swapped[0, [2, 7]] = swapped[0, [7, 2]]
    assert val(loss_pred(swapped, gt)) > 0


def test_loss_pred_is_homogeneous(rng):
    pred, gt = rng.normal(size=(4, 17, 3)), rng.normal(size=(4, 17, 3))
    with ad.float64_mode():
        assert abs(val(loss_pred(2 * pred, 2 * gt)) - 2 * val(loss_pred(pred, gt))) < 1e-12


@pytest.mark.parametrize("fn,dim", [(loss_pose, 72), (loss_shape, 10)])
def test_rms_losses_one_hot(fn, dim, rng):
    gt = rng.normal(size=(dim,))
    assert val(fn(gt, gt)) == 0.0
    eps = 0.25
    with ad.float64_mode():
        assert abs(val(fn(gt + eps * np.eye(dim)[0], gt)) - eps / np.sqrt(dim)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rms_losses_nonnegative_and_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(3, 72)), r.normal(size=(3, 72))
    with ad.float64_mode():
        x, y = val(loss_pose(a, b)), val(loss_pose(b, a))
    assert x >= 0
    assert abs(x - y) < 1e-12


def test_mesh_and_joint_losses(body, rng):
    V = body.num_vertices
    M = rng.normal(size=(2, V, 3))
    W = body.joint_regressor_eval
    J = np.einsum("kv,tvc->tkc", W, M)
    assert val(loss_mesh(M, M)) == 0.0
    assert val(loss_joint(M, W, J)) < 1e-6
    M2 = rng.normal(size=(2, V, 3))
    t = np.array([0.3, -0.2, 1.0])
    with ad.float64_mode():
        assert abs(val(loss_mesh(M + t, M2 + t)) - val(loss_mesh(M, M2))) < 1e-12
        gt = rng.normal(size=(2, 17, 3))
        naive = np.mean([abs(sum(W[k, v] * M[f, v, c] for v in range(V)) - gt[f, k, c])
                         for f in range(2) for k in range(17) for c in range(3)])
        assert abs(val(loss_joint(M, W, gt)) - naive) < 1e-7


def test_total_loss_weights():
    ones = {k: ad.Tensor(1.0) for k in ("pose", "shape", "mesh", "joint")}
    with ad.float64_mode():
        assert abs(val(total_loss(ones, LossWeights())) - 7.001) < 1e-12
    zeros = {k: ad.Tensor(0.0) for k in ones}
    assert val(total_loss(zeros)) == 0.0
    two = dict(ones, mesh=ad.Tensor(3.0))
    assert abs(val(total_loss(two)) - val(total_loss(ones)) - 2 * 1.0) < 1e-5
    with pytest.raises(ContractError):
        total_loss({"pose": ad.Tensor(1.0), "bogus": ad.Tensor(1.0)})


def test_losses_reject_shape_mismatch():
    with pytest.raises(DimensionError):
        loss_pred(np.zeros((2, 17, 3)), np.zeros((3, 17, 3)))


# ----------------------------------------------------------------- metrics


def test_mpjpe_examples(rng):
    gt = rng.normal(size=(5, 17, 3))
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(gt + np.array([1.0, 2.0, 3.0]), gt) < 1e-9
    pred = gt.copy()
    pred[:, 6, 0] += 0.005
    assert abs(mpjpe(pred, gt) - 5.0 / 17) < 1e-9


def test_pa_mpjpe_removes_similarity(rng):
    for _ in range(50):
        gt = rng.normal(size=(17, 3))
        R = quat_to_matrix(rng.normal(size=4))
        pred = rng.uniform(0.3, 3.0) * gt @ R.T + rng.normal(size=3)
        assert pa_mpjpe(pred[None], gt[None]) < 1e-6


def test_pa_mpjpe_le_mpjpe_random_cases(rng):
    for _ in range(2000):
        gt, pred = rng.normal(size=(1, 17, 3)), rng.normal(size=(1, 17, 3))
        assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


def test_pa_rms_never_exceeds_root_aligned_rms(rng):
    # the least-squares form of the inequality holds for every input
    from occmotion.metrics import similarity_align
    for _ in range(500):
        gt = rng.normal(size=(17, 3))
        pred = gt + rng.normal(0, rng.uniform(0.01, 1), size=(17, 3))
        pred[rng.integers(17)] += rng.normal(0, 2, 3)
        pa = np.sqrt(((similarity_align(pred, gt) - gt) ** 2).sum(-1).mean())
        ra = np.sqrt((((pred - pred[0]) - (gt - gt[0])) ** 2).sum(-1).mean())
        assert pa <= ra + 1e-12


def _grid_oracle(pred, gt, starts=16, coarse_n=25):
    """Brute-force least-squares similarity fit over shrinking axis-angle grids.

    The best ``starts`` cells of the coarse grid are each refined, so a single
    misleading coarse cell cannot trap the search.
    """
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    X, Y = pred - mu_p, gt - mu_g

    def sse_of(aa):
        R = matrix_from_axis_angle(aa)
        XR = np.einsum("nij,kj->nki", R, X)
        s = np.clip(np.einsum("nki,ki->n", XR, Y) / (X**2).sum(), 0, None)
        return ((s[:, None, None] * XR - Y) ** 2).sum((1, 2)), s[:, None, None] * XR

    def grid(centre, half, n=13):
        g = np.linspace(-half, half, n)
        return np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) + centre

    coarse = grid(np.zeros(3), np.pi, coarse_n)
    coarse = coarse[np.linalg.norm(coarse, axis=-1) <= np.pi + 1e-9]
    sse, _ = sse_of(coarse)
    best = np.inf, None
    for centre in coarse[np.argsort(sse)[:starts]]:
        half = 2 * np.pi / (coarse_n - 1)
        for _ in range(8):
            aa = grid(centre, half)
            sse, fit = sse_of(aa)
            i = int(np.argmin(sse))
            centre = aa[i]
            if sse[i] < best[0]:
                best = (sse[i], fit[i] + mu_g)
            half /= 3.0
    return np.linalg.norm(best[1] - gt, axis=-1).mean() * 1000.0


def test_pa_mpjpe_matches_grid_oracle_on_three_points(rng):
    for _ in range(20):
        gt = rng.normal(0, 0.3, size=(3, 3))
        pred = quat_to_matrix(rng.normal(size=4)) @ gt.T
        pred = pred.T * 1.2 + rng.normal(0, 0.05, size=(3, 3))
        assert abs(pa_mpjpe(pred[None], gt[None]) - _grid_oracle(pred, gt)) <= 0.5


def test_pa_mpjpe_needs_three_joints():
    with pytest.raises(ContractError):
        pa_mpjpe(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)))


def test_mpvpe_and_accel_examples(rng):
    m = rng.normal(size=(4, 30, 3))
    assert mpvpe(m, m) == 0.0
    gt = rng.normal(size=(10, 17, 3))
    assert accel_error(gt, gt) == 0.0
    t = np.arange(10)[:, None, None]
    drift = gt + 0.01 * t * np.array([1.0, -2.0, 0.5]) + 0.3
    assert accel_error(drift, gt) < 1e-9
    z = np.zeros((3, 1, 3))
    p = z.copy()
    p[1, 0, 0] = 0.001
    assert accel_error(p, z) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ContractError):
        accel_error(z[:2], z[:2])


def test_accel_error_mask_selects_centre_frames():
    z = np.zeros((5, 2, 3))
    p = z.copy()
    p[2, 1, 0] = 0.001
    mask = np.zeros((5, 2), bool)
    mask[2, 0] = True
    assert accel_error(p, z, mask) == 0.0
    mask[2, 1] = True
    assert accel_error(p, z, mask) == pytest.approx(1.0)


# --------------------------------------------------------------- reporting


def _report(name, rng, occ=True):
    v = rng.uniform(1, 100, size=5)
    return MetricReport(name, 81, 30.0, *v[:4], v[4] if occ else float("nan"), list(rng.uniform(0, 9, 17)))


def test_report_aggregate_is_mean(rng):
    reps = [_report(f"c{i}", rng, occ=i % 2 == 0) for i in range(7)]
    agg = aggregate(reps)
    for c in ("mpjpe", "pa_mpjpe", "mpvpe", "accel_error"):
        assert abs(getattr(agg, c) - np.mean([getattr(r, c) for r in reps])) < 1e-9
    assert abs(agg.mpjpe_occluded - np.nanmean([r.mpjpe_occluded for r in reps])) < 1e-9


def test_report_csv_columns_stable(rng):
    reps = [_report(f"c{i}", rng) for i in range(3)]
    text = reports_to_csv(reps)
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert [r[0] for r in rows[1:]] == ["c0", "c1", "c2", "ALL"]
    assert text == reports_to_csv(reps)
    doc = json.loads(reports_to_json(reps))
    assert doc["aggregate"]["clip"] == "ALL"
