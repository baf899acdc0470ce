import numpy as np
import pytest

from coinfer.adapt import TrainConfig
from coinfer.gating import Decision, Gate, GatePolicy, Scorer
from coinfer.metrics import collab_miou
from coinfer.models import OracleCloudModel, OracleEdgeModel, TrainableEdgeModel, TruthTable
from coinfer.orchestrator import Orchestrator, OrchestratorConfig, SampleError
from coinfer.simenv import (ClassAppearance, LatencyModel, StreamSpec, TaskSpec, expected_latency,
                            generate_stream, preset_latency)
from coinfer.tensors import argmax_labels
from coinfer.wire import InProcessChannel, TransportError

APPEARANCE = (ClassAppearance((60, 140, 60)), ClassAppearance((140, 140, 140)),
              ClassAppearance((170, 90, 60)))


def small_stream(n=40, seed=0, h=6, w=6):
    tasks = (TaskSpec(n // 2, (0.6, 0.3, 0.1)), TaskSpec(n - n // 2, (0.1, 0.3, 0.6)))
    return generate_stream(StreamSpec(3, h, w, tasks, APPEARANCE, regions_per_sample=2, seed=seed))


def config(delta=0.75, scorer=Scorer.LEARNED, adaptive=True, maxsize=32, maxtime=1000, lr=0.5):
    return OrchestratorConfig(preset_latency("cloud-robotics", (6, 6)), GatePolicy(scorer, delta),
                              TrainConfig(lr, 0.1, 5), maxsize, maxtime, adaptive)


def oracle_orch(cfg, rho=0.8, tau=0.1, pi=0.0):
    tt = TruthTable()
    return Orchestrator(cfg, OracleEdgeModel(tt, rho, tau), OracleCloudModel(tt, pi), Gate.initialize(16, 0), tt)


def trainable_orch(cfg, seed=0):
    tt = TruthTable()
    rng = np.random.default_rng(seed)
    edge = TrainableEdgeModel(rng.normal(0, 0.5, size=(3, 5)), np.zeros(3))
    return Orchestrator(cfg, edge, OracleCloudModel(tt), Gate.initialize(16, seed), tt)


def test_zero_threshold_keeps_everything_on_edge():
    o = oracle_orch(config(delta=0.0))
    rep = o.run_stream(small_stream())
    assert all(r.decision is Decision.EDGE for r in rep.trace)
    assert len(o.buffer) == 0 and rep.aggregate.cur == 0.0
    assert o.cloud.handled == 0


def test_unit_threshold_sends_everything_to_cloud():
    o = oracle_orch(config(delta=1.0, adaptive=False))
    rep = o.run_stream(small_stream())
    assert rep.aggregate.cur == 1.0
    assert rep.aggregate.miou == pytest.approx(np.mean([r.iou_fused for r in rep.trace]))
    assert o.cloud.handled == len(rep.trace) == len(o.buffer)


@pytest.mark.parametrize("delta", [0.0, 0.5, 0.75, 1.0])
def test_perfect_oracles_reproduce_truth(delta):
    o = oracle_orch(config(delta=delta, adaptive=False), rho=1.0, tau=0.01)
    for s in small_stream(20):
        assert o.process_sample(s.image, s.truth).output == s.truth


def test_outputs_follow_decision():
    o = oracle_orch(config(delta=0.5, adaptive=False), rho=0.7, tau=0.3)
    for s in small_stream(30):
        before = len(o.buffer)
        out = o.process_sample(s.image, s.truth)
        pred = o.edge.model.infer(s.image)
        if out.decision is Decision.EDGE:
            assert out.output == argmax_labels(pred)
            assert len(o.buffer) == before
        else:
            assert len(o.buffer) == before + 1
            assert o.buffer.items()[-1] == (s.image, out.output)


def test_buffer_trigger_fires_above_maxsize():
    o = trainable_orch(config(delta=1.0, maxsize=2))
    stream = small_stream(3)
    for s in stream[:2]:
        o.process_sample(s.image, s.truth)
        assert o.maybe_update() is None
    o.process_sample(stream[2].image, stream[2].truth)
    rec = o.maybe_update()
    assert rec is not None and rec.buffer_size == 3
    assert len(o.buffer) == 0 and o.interval == 0
    assert o.edge.updates_applied == 1
    assert rec.loss_f is not None and rec.loss_h is not None


def test_empty_buffer_at_maxtime_only_resets_interval():
    o = trainable_orch(config(delta=0.0, maxtime=3))
    before = o.edge.model
    for s in small_stream(4):
        o.process_sample(s.image, s.truth)
        o.maybe_update()
    assert o.interval == 0 and o.updates == []
    assert o.edge.model == before


def test_frozen_run_keeps_parameters_bit_identical():
    o = trainable_orch(config(delta=0.9, adaptive=False, maxsize=1))
    model, gate = o.edge.model, o.edge.gate
    vec = model.params().copy(), gate.to_vector().copy()
    rep = o.run_stream(small_stream(40))
    assert rep.aggregate.cur > 0 and rep.updates == []
    assert np.array_equal(o.edge.model.params(), vec[0])
    assert np.array_equal(o.edge.gate.to_vector(), vec[1])


def test_adaptive_run_trains_in_rounds():
    o = trainable_orch(config(delta=1.0, maxsize=4))
    rep = o.run_stream(small_stream(20))
    assert len(rep.updates) == 4
    assert [u.after_sample for u in rep.updates] == [5, 10, 15, 20]
    assert o.edge.updates_applied == 4


def test_heuristic_scorer_updates_only_the_edge_model():
    o = trainable_orch(config(delta=1.0, scorer=Scorer.SPP, maxsize=2))
    gate = o.edge.gate
    o.run_stream(small_stream(6))
    assert o.updates and all(u.loss_h is None for u in o.updates)
    assert o.edge.gate == gate


def test_cur_and_latency_identities():
    o = oracle_orch(config(delta=0.5, adaptive=False), rho=0.6, tau=0.5)
    rep = o.run_stream(small_stream(60))
    n_cloud = sum(r.decision is Decision.CLOUD for r in rep.trace)
    assert rep.aggregate.cur == n_cloud / len(rep.trace)
    lm = o.config.latency
    assert rep.aggregate.avg_latency_s == pytest.approx(
        expected_latency(rep.aggregate.cur, lm.d0((6, 6)), lm.d1), rel=1e-12)
    assert rep.aggregate.miou == collab_miou(rep.trace)
    assert [t.samples for t in rep.tasks] == [30, 30]


def test_runs_are_deterministic():
    a = trainable_orch(config(delta=0.6, maxsize=4)).run_stream(small_stream(30))
    b = trainable_orch(config(delta=0.6, maxsize=4)).run_stream(small_stream(30))
    assert a.trace == b.trace and a.updates == b.updates


def test_empty_stream_gives_empty_report():
    rep = oracle_orch(config()).run_stream([])
    assert rep.trace == [] and rep.updates == [] and rep.aggregate is None


class DroppingChannel(InProcessChannel):
    def recv(self):
        raise TransportError("link down")


def test_transport_failure_surfaces_with_sample_index():
    tt = TruthTable()
    o = Orchestrator(config(delta=1.0), OracleEdgeModel(tt), OracleCloudModel(tt),
                     Gate.zeros(4), tt, uplink=DroppingChannel())
    with pytest.raises(SampleError) as info:
        o.run_stream(small_stream(3))
    assert info.value.index == 0
    assert isinstance(info.value.__cause__, TransportError)


def test_learned_scorer_requires_gate():
    tt = TruthTable()
    with pytest.raises(ValueError):
        Orchestrator(config(), OracleEdgeModel(tt), OracleCloudModel(tt), None, tt)
    with pytest.raises(ValueError):
        OrchestratorConfig(LatencyModel(1.0, 1.0), maxsize=0)
