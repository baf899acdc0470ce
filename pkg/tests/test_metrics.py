import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coinfer.gating import Decision
from coinfer.metrics import (TraceRow, UpdateRecord, auc_low_is_positive, avg_latency,
                             build_report, collab_miou, cur, gate_auc, hard_input_truth,
                             iou_per_class, mean_iou, report_csv, report_text, trace_csv)
from coinfer.tensors import SemanticMask

E, C = Decision.EDGE, Decision.CLOUD


def row(i, decision, conf=0.5, lat=1.0, edge=0.5, fused=0.8, task=0):
    return TraceRow(i, task, decision, conf, lat, edge, fused)


def test_iou_two_by_two_by_hand():
    pred = SemanticMask([[0, 0], [1, 1]], 2)
    truth = SemanticMask([[0, 1], [1, 1]], 2)
    # class 0: inter 1, union 2; class 1: inter 2, union 3
    np.testing.assert_allclose(iou_per_class(pred, truth), [0.5, 2 / 3])
    assert mean_iou(pred, truth) == pytest.approx(0.5833, abs=1e-4)


def test_absent_classes_are_excluded():
    pred = SemanticMask([[0, 1]], 4)
    truth = SemanticMask([[0, 1]], 4)
    ious = iou_per_class(pred, truth)
    assert ious[:2].tolist() == [1.0, 1.0] and np.isnan(ious[2:]).all()
    assert mean_iou(pred, truth) == 1.0
    with pytest.raises(ValueError):
        iou_per_class(pred, SemanticMask([[0, 1]], 3))


def test_iou_against_pixel_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        m = int(rng.integers(1, 5))
        h, w = rng.integers(1, 7, size=2)
        p, t = rng.integers(0, m, size=(h, w)), rng.integers(0, m, size=(h, w))
        got = iou_per_class(SemanticMask(p, m), SemanticMask(t, m))
        for k in range(m):
            inter = sum(1 for a, b in zip(p.ravel(), t.ravel()) if a == k and b == k)
            union = sum(1 for a, b in zip(p.ravel(), t.ravel()) if a == k or b == k)
            if union == 0:
                assert math.isnan(got[k])
            else:
                assert got[k] == pytest.approx(inter / union)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_miou_bounds_and_identity(seed):
    rng = np.random.default_rng(seed)
    t = SemanticMask(rng.integers(0, 3, size=(4, 4)), 3)
    p = SemanticMask(rng.integers(0, 3, size=(4, 4)), 3)
    assert 0.0 <= mean_iou(p, t) <= 1.0
    assert mean_iou(t, t) == 1.0


def test_hard_input_examples():
    assert hard_input_truth(0.8, 0.6) is True
    assert hard_input_truth(0.8, 0.75) is False
    assert hard_input_truth(0.7, 0.6) is True


def test_trace_aggregates():
    trace = [row(0, E, lat=1.0, edge=0.4, fused=0.9), row(1, C, lat=5.0, edge=0.4, fused=0.9),
             row(2, E, lat=1.0, edge=1.0, fused=1.0), row(3, C, lat=5.0, edge=0.2, fused=0.6)]
    assert collab_miou(trace) == pytest.approx((0.4 + 0.9 + 1.0 + 0.6) / 4)
    assert cur(trace) == 0.5
    assert avg_latency(trace) == 3.0
    with pytest.raises(ValueError):
        cur([])


def test_cur_latency_identity():
    rng = np.random.default_rng(0)
    d1, d0 = 1.12, 5.11
    trace = [row(i, d, lat=d1 if d is E else d0)
             for i, d in enumerate(rng.choice([E, C], size=50))]
    assert avg_latency(trace) == pytest.approx((1 - cur(trace)) * d1 + cur(trace) * d0)


def test_auc_examples():
    assert auc_low_is_positive([0.5, 0.5, 0.5, 0.5], [True, False, True, False]) == 0.5
    assert auc_low_is_positive([0.1, 0.2, 0.8, 0.9], [True, True, False, False]) == 1.0
    assert auc_low_is_positive([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 0.0
    # one inverted pair out of four
    assert auc_low_is_positive([0.1, 0.6, 0.5, 0.9], [True, True, False, False]) == 0.75
    with pytest.raises(ValueError):
        auc_low_is_positive([0.1, 0.2], [True, True])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.1, 0.3, 0.5, 0.7]), st.booleans()), min_size=2, max_size=20))
def test_auc_matches_pair_count(pairs):
    confs = [c for c, _ in pairs]
    pos = [p for _, p in pairs]
    if all(pos) or not any(pos):
        return
    wins = 0.0
    for cp, pp in pairs:
        for cn, pn in pairs:
            if pp and not pn:
                wins += 1.0 if cp < cn else 0.5 if cp == cn else 0.0
    expected = wins / (sum(pos) * (len(pos) - sum(pos)))
    assert auc_low_is_positive(confs, pos) == pytest.approx(expected)


def test_gate_auc_from_trace():
    trace = [row(0, C, conf=0.1, edge=0.2, fused=0.9), row(1, E, conf=0.9, edge=0.9, fused=0.9)]
    assert trace[0].hard_truth and not trace[1].hard_truth
    assert gate_auc(trace) == 1.0
    with pytest.raises(ValueError):
        gate_auc([row(0, C, edge=None)])


def test_report_per_task_and_csv_layout():
    trace = [row(0, E, edge=0.5, task=0), row(1, C, lat=5.0, fused=1.0, task=0),
             row(2, C, lat=5.0, fused=0.25, task=1)]
    rep = build_report(trace, [UpdateRecord(1, 2, 0.3, 0.1)])
    assert [t.task for t in rep.tasks] == ["0", "1"]
    assert rep.aggregate.samples == 3 and rep.samples == 3
    text = report_csv(rep)
    assert text.splitlines() == [
        "task,samples,miou,cur,avg_latency_s",
        "0,2,0.750000,0.500000,3.000000",
        "1,1,0.250000,1.000000,5.000000",
        "all,3,0.583333,0.666667,3.666667",
    ]
    lines = trace_csv(rep).splitlines()
    assert lines[0] == "sample,decision,confidence,iou_edge,iou_fused,latency_s,hard_truth"
    assert lines[1] == "0,EDGE,0.500000,0.500000,0.800000,1.000000,1"
    assert '"aggregate"' in report_text(rep)


def test_empty_report():
    rep = build_report([])
    assert rep.aggregate is None and rep.samples == 0
    assert report_csv(rep) == "task,samples,miou,cur,avg_latency_s\n"
