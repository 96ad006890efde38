import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_recon, rel_pose_errors
from horeg.errors import DataError, EmptyGroup, LengthMismatch
from horeg.evaluate import (CONSECUTIVE, ReconReport, align_samples, eval_poses, eval_recon, grouped_report,
                            recon_metrics, report_from_dict, report_to_dict)
from horeg.geom import PoseSequence, RigidTransform, Rotation, SimilarityTransform, so3_exp
from horeg.synth import make_mesh, make_trajectory, perturb_poses

seeds = st.integers(0, 10**6)


@given(seeds, st.lists(st.floats(1e-4, 0.05), min_size=1, max_size=4))
@settings(max_examples=40, deadline=None)
def test_recon_metrics_equal_brute_force(seed, thresholds):
    rng = np.random.default_rng(seed)
    P = rng.normal(0, 0.05, (rng.integers(5, 200), 3))
    G = rng.normal(0, 0.05, (rng.integers(5, 200), 3))
    rep = recon_metrics(P, G, thresholds)
    acc, comp, by_t = brute_recon(P, G, thresholds)
    assert rep.acc == pytest.approx(acc, rel=1e-12) and rep.comp == pytest.approx(comp, rel=1e-12)
    for t in thresholds:
        k = repr(float(t))
        assert (rep.acc_ratio_at[k], rep.comp_ratio_at[k], rep.fscore_at[k]) == by_t[t]


def test_thresholds_are_inclusive():
    P = np.array([[0.0, 0, 0]])
    G = np.array([[0.25, 0, 0]])
    rep = recon_metrics(P, G, (0.25, 0.2))
    assert rep.fscore_at["0.25"] == 100.0 and rep.fscore_at["0.2"] == 0.0


def test_identical_meshes_score_perfectly():
    m = make_mesh("bumpy_sphere", 0.1, subdivisions=3)
    rep = eval_recon(m, m, n_samples=20000)
    assert rep.fscore_at["0.005"] >= 99.9 and rep.rec_rate == 100.0


def test_alignment_removes_a_similarity():
    m = make_mesh("bumpy_sphere", 0.1, seed=2, subdivisions=3)
    S = SimilarityTransform(1.3, so3_exp([0.04, -0.03, 0.05]), np.array([0.01, -0.02, 0.015]))
    moved = m.transformed(S.rigid())
    moved = type(m)(S.apply(m.vertices), m.faces)
    rep = eval_recon(moved, m, n_samples=5000)
    raw = eval_recon(moved, m, n_samples=5000, align=False)
    assert rep.fscore_at["0.005"] > 95.0 > raw.fscore_at["0.005"]


def test_align_samples_recovers_transform():
    rng = np.random.default_rng(0)
    G = rng.normal(0, 0.1, (800, 3)) * [1.0, 0.6, 0.3]
    S = SimilarityTransform(0.8, so3_exp([0.05, 0.02, -0.04]), np.array([0.01, 0.0, 0.02]))
    P = S.inverse().apply(G)
    T = align_samples(P, G)
    np.testing.assert_allclose(T.apply(P), G, atol=1e-9)


def test_failed_reconstruction():
    rep = eval_recon(None, make_mesh("sphere", subdivisions=1))
    assert rep.rec_rate == 0.0 and np.isnan(rep.fscore_at["0.005"])
    assert ReconReport.failed((0.01,)).metrics()[0] == ("rec_rate", "", 0.0)


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_pose_quality_matches_recount(seed):
    gt = make_trajectory(15, seed=seed % 50)
    pred = perturb_poses(gt, 1.0, 0.004, seed=seed)
    pairs = ((0.003, 0.8), (0.006, 1.5))
    rep = eval_poses(pred, gt, pairs)
    rot, tr = rel_pose_errors(pred.rotation_matrices(), pred.translations(), gt.rotation_matrices(),
                              gt.translations())
    np.testing.assert_allclose(rep.rot_error_deg, rot, atol=1e-7)
    np.testing.assert_allclose(rep.trans_error_m, tr, atol=1e-12)
    for tt, tr_deg in pairs:
        n = sum(1 for a, b in zip(rot, tr) if b <= tt and a <= tr_deg)
        assert rep.quality_at[f"{tt!r}m&{tr_deg!r}deg"] == 100.0 * n / len(rot)
    assert rep.trans_mse == pytest.approx(np.mean(tr**2))


def test_relative_errors_ignore_a_global_transform():
    gt = make_trajectory(10, seed=1)
    G = RigidTransform(so3_exp([0.3, 0.1, -0.2]), np.array([0.2, -0.1, 0.3]))
    # the same cameras expressed in another world frame
    pred = PoseSequence([p.compose(G) for p in gt.poses])
    rep = eval_poses(pred, gt)
    assert max(rep.rot_error_deg) < 1e-9 and max(rep.trans_error_m) < 1e-12


def test_scale_free_absorbs_gauge():
    gt = make_trajectory(12, seed=2)
    pred = PoseSequence([RigidTransform(p.rotation, 2.5 * p.t) for p in gt.poses])
    assert max(eval_poses(pred, gt).trans_error_m) > 1e-3
    rep = eval_poses(pred, gt, scale_free=True)
    assert rep.scale == pytest.approx(0.4) and max(rep.trans_error_m) < 1e-12


def test_invalid_frames_and_consecutive_mode():
    gt = make_trajectory(8, seed=3)
    valid = np.ones(8, bool)
    valid[[0, 4]] = False
    pred = PoseSequence(perturb_poses(gt, 0.5, 0.001, seed=1).poses, valid)
    rep = eval_poses(pred, gt)
    assert rep.det_rate == 75.0
    assert rep.frames == [2, 3, 5, 6, 7]
    cons = eval_poses(pred, gt, relative=CONSECUTIVE)
    assert cons.frames == [2, 3, 6, 7]
    with pytest.raises(LengthMismatch):
        eval_poses(PoseSequence(pred.poses[:3]), gt)
    with pytest.raises(DataError):
        eval_poses(pred, gt, relative="global")


def test_grouping_mean_and_population_std():
    gt = make_trajectory(6, seed=0)
    a = eval_poses(perturb_poses(gt, 0.5, 0.001, seed=1), gt)
    b = eval_poses(perturb_poses(gt, 1.5, 0.003, seed=2), gt)
    out = grouped_report([("x", a), ("x", b), ("y", a)])
    mean, std = out["x"][("rot_error_deg_mean", "")]
    assert mean == pytest.approx((a.rot_error_mean + b.rot_error_mean) / 2)
    assert std == pytest.approx(abs(a.rot_error_mean - b.rot_error_mean) / 2)
    assert out["y"][("det_rate", "")] == (100.0, 0.0)
    with pytest.raises(EmptyGroup):
        grouped_report([("x", a)], tags=["z"])
    with pytest.raises(EmptyGroup):
        grouped_report([])


def test_report_dict_round_trip():
    gt = make_trajectory(5, seed=0)
    rep = eval_poses(perturb_poses(gt, 0.5, 0.001), gt)
    back = report_from_dict(report_to_dict(rep))
    assert back.metrics() == rep.metrics()
    rr = recon_metrics(np.zeros((3, 3)), np.ones((3, 3)))
    assert report_from_dict(report_to_dict(rr)).metrics() == rr.metrics()
    with pytest.raises(DataError):
        report_from_dict({"kind": "other"})
