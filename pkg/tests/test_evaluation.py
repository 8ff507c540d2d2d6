from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynobs.dataset_io import GtBox, GtLabel, ResultFrame, ResultObstacle
from dynobs.evaluation import evaluate, iou_grid, match_frame, sweep
from dynobs.geometry import AABB3, iou3d

from oracles import brute_force_max_tp, hand_fixture


def cube(x, y=0.0, s=1.0):
    return AABB3([x, y, 0.5], [s, s, 1.0])


def random_frame(rng, max_boxes=5):
    gts = [cube(*rng.uniform(0, 3, 2), rng.uniform(0.5, 1.5)) for _ in range(rng.integers(0, max_boxes + 1))]
    preds = [cube(*rng.uniform(0, 3, 2), rng.uniform(0.5, 1.5)) for _ in range(rng.integers(0, max_boxes + 1))]
    return preds, gts


def test_grid():
    g = iou_grid()
    assert len(g) == 19 and g[0] == 0.05 and g[-1] == 0.95 and 0.3 in g and 0.5 in g and 0.7 in g


def test_match_exact_and_empty():
    gts = [cube(0), cube(3)]
    m = match_frame(gts, gts, 0.9)
    assert (m.tp, m.fp, m.fn) == (2, 0, 0)
    m = match_frame([], gts, 0.3)
    assert (m.tp, m.fp, m.fn) == (0, 0, 2)
    m = match_frame(gts, [], 0.3)
    assert (m.tp, m.fp, m.fn) == (0, 2, 0)


def test_one_pred_over_two_gts():
    gts = [cube(0.0), cube(1.0)]
    pred = [cube(0.4)]
    m = match_frame(pred, gts, 0.3)
    assert (m.tp, m.fp, m.fn) == (1, 0, 1)
    assert m.pairs[0][1] == 0  # better overlap wins


def test_optimal_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(300):
        preds, gts = random_frame(rng)
        ious = np.array([[iou3d(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))
        for th in (0.1, 0.3, 0.5):
            assert match_frame(preds, gts, th, optimal=True).tp == brute_force_max_tp(ious, th)


def test_greedy_within_one_of_optimal_on_small_frames():
    rng = np.random.default_rng(6)
    worst = 0
    for _ in range(500):
        preds, gts = random_frame(rng)
        for th in iou_grid():
            g = match_frame(preds, gts, th).tp
            o = match_frame(preds, gts, th, optimal=True).tp
            assert g <= o
            worst = max(worst, o - g)
    assert worst <= 1


def test_perfect_predictions():
    rng = np.random.default_rng(7)
    frames = [(gts, gts) for _, gts in (random_frame(rng) for _ in range(20))]
    rep = sweep(frames)
    assert all(r.precision == 1.0 and r.recall == 1.0 and r.mean_pos_err == 0.0 for r in rep.rows if r.tp)
    assert all(r.fp == 0 and r.fn == 0 for r in rep.rows)


@given(st.integers(0, 10_000), st.booleans())
def test_tp_monotone_and_counts(seed, optimal):
    rng = np.random.default_rng(seed)
    frames = [random_frame(rng) for _ in range(5)]
    rep = sweep(frames, optimal=optimal)
    tps = [r.tp for r in rep.rows]
    fns = [r.fn for r in rep.rows]
    assert tps == sorted(tps, reverse=True) and fns == sorted(fns)
    for r in rep.rows:
        assert r.tp + r.fn == rep.n_gt and r.tp + r.fp == rep.n_pred
        assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1
        expect = 2 * r.precision * r.recall / (r.precision + r.recall) if r.precision + r.recall else 0.0
        assert r.f1 == pytest.approx(expect)


def test_hand_fixture():
    results, gts, expected = hand_fixture()
    rep = evaluate(results, gts, [0.3, 0.5, 0.7])
    for th, exp in expected.items():
        m = rep.at(th)
        assert (m.tp, m.fp, m.fn) == (exp["tp"], exp["fp"], exp["fn"])
        assert m.precision == pytest.approx(exp["precision"])
        assert m.recall == pytest.approx(exp["recall"])
        assert m.mean_pos_err == pytest.approx(exp["pos_err"])


@given(st.permutations(range(3)))
def test_report_order_invariant(perm):
    results, gts, _ = hand_fixture()
    a = evaluate(results, gts).to_dict()
    b = evaluate([results[k] for k in perm], [gts[k] for k in perm]).to_dict()
    assert a == b


def test_only_dynamic_scored():
    box = cube(0)
    res = [ResultFrame(0.0, [ResultObstacle(0, box.center, box.size, np.zeros(3), "static", "lidar")])]
    gt = [GtLabel(0.0, [GtBox(box, 0, True)])]
    rep = evaluate(res, gt, [0.5])
    assert (rep.at(0.5).tp, rep.at(0.5).fp, rep.at(0.5).fn) == (0, 0, 1)
    assert rep.at(0.5).precision == 0.0 and rep.at(0.5).f1 == 0.0


def test_missing_result_frame_counts_as_missed():
    _, gts, _ = hand_fixture()
    rep = evaluate([], gts, [0.3])
    assert rep.at(0.3).fn == 4 and rep.at(0.3).tp == 0


def test_csv_outputs(tmp_path):
    results, gts, _ = hand_fixture()
    rep = evaluate(results, gts)
    rep.write_table_csv(tmp_path / "t.csv")
    rep.write_curve_csv(tmp_path / "c.csv")
    table = (tmp_path / "t.csv").read_text().splitlines()
    assert table[0].startswith("method,precision@0.3,recall@0.3,f1@0.3,pos_err@0.3")
    assert table[1].split(",")[1] == "0.7500"
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 20
