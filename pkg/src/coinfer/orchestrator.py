"""Stream loop: edge inference, gating, cloud round-trip, replay buffer, updates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from . import wire
from .adapt import ReplayBuffer, TrainConfig, gate_batch, update_f, update_h
from .fusion import assisted_inference
from .gating import Decision, Gate, GatePolicy, Scorer, confidence, decide
from .metrics import RunReport, TraceRow, UpdateRecord, build_report, mean_iou
from .models import TrainableEdgeModel, TruthTable
from .simenv import LatencyModel, Sample, sample_latency
from .tensors import Image, SemanticMask, argmax_labels


class SampleError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"sample {index}: {cause}")
        self.index = index


@dataclass(frozen=True)
class OrchestratorConfig:
    latency: LatencyModel
    policy: GatePolicy = field(default_factory=GatePolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    maxsize: int = 32
    maxtime: int = 1000
    adaptive_updates: bool = True

    def __post_init__(self):
        if self.maxsize < 1 or self.maxtime < 1:
            raise ValueError("maxsize and maxtime must be >= 1")


@dataclass(frozen=True)
class InferenceOutcome:
    decision: Decision
    confidence: float
    output: SemanticMask
    latency_s: float
    iou_edge: float | None = None
    iou_fused: float | None = None


class CloudNode:
    """Answers UPLOAD_IMAGE frames with MASK_RESULT frames."""

    def __init__(self, model):
        self.model = model
        self.handled = 0

    def handle(self, frame: bytes) -> bytes:
        msg = wire.decode(frame)
        if msg.kind is not wire.MessageKind.UPLOAD_IMAGE:
            raise wire.FrameError(f"cloud node cannot handle {msg.kind.name}")
        masks = self.model.infer(msg.body)
        self.handled += 1
        return wire.encode(wire.WireMessage(wire.MessageKind.MASK_RESULT, masks))


class EdgeNode:
    """Holds the deployed edge model and gate; applies MODEL_UPDATE frames atomically."""

    def __init__(self, model, gate: Gate | None):
        self.model = model
        self.gate = gate
        self.updates_applied = 0

    def apply(self, frame: bytes) -> None:
        msg = wire.decode(frame)
        if msg.kind is not wire.MessageKind.MODEL_UPDATE:
            raise wire.FrameError(f"edge node cannot apply {msg.kind.name}")
        upd = msg.body
        if upd.edge is not None and not isinstance(self.model, TrainableEdgeModel):
            raise wire.FrameError("edge model is not trainable")
        if upd.gate is not None and self.gate is None:
            raise wire.FrameError("edge node has no gate to update")
        # decode fully before touching state
        if upd.edge is not None:
            self.model = upd.edge
        if upd.gate is not None:
            self.gate = upd.gate
        self.updates_applied += 1


class Orchestrator:
    """One edge node, one cloud node and the replay buffer between them."""

    def __init__(self, config: OrchestratorConfig, edge_model, cloud_model,
                 gate: Gate | None = None, truth_table: TruthTable | None = None,
                 uplink=None, downlink=None):
        if config.policy.scorer is Scorer.LEARNED and gate is None:
            raise ValueError("learned gating needs a gate")
        self.config = config
        self.edge = EdgeNode(edge_model, gate)
        self.cloud = CloudNode(cloud_model)
        self.truth_table = truth_table
        self.uplink = uplink if uplink is not None else wire.InProcessChannel()
        self.downlink = downlink if downlink is not None else wire.InProcessChannel()
        self.buffer = ReplayBuffer()
        self.interval = 0
        self.processed = 0
        self.updates: list[UpdateRecord] = []

    # -- per sample ---------------------------------------------------------

    def _cloud_masks(self, img: Image):
        self.uplink.send(wire.encode(wire.WireMessage(wire.MessageKind.UPLOAD_IMAGE, img)))
        reply = self.cloud.handle(self.uplink.recv())
        self.downlink.send(reply)
        msg = wire.decode(self.downlink.recv())
        if msg.kind is not wire.MessageKind.MASK_RESULT:
            raise wire.TransportError(f"expected MASK_RESULT, got {msg.kind.name}")
        return msg.body

    def process_sample(self, img: Image, truth: SemanticMask | None = None,
                       diagnostics: bool = True) -> InferenceOutcome:
        """Route one image through the edge model, the gate and, if hard, the cloud.

        With ``truth`` and ``diagnostics``, both the edge-only and the fused
        IoU are recorded; the non-emitted one is computed out of band.
        """
        if truth is not None and self.truth_table is not None:
            self.truth_table.register(img, truth)
        pred = self.edge.model.infer(img)
        conf = confidence(pred, self.config.policy, self.edge.gate)
        decision = decide(conf, self.config.policy)
        edge_out = argmax_labels(pred)
        fused = None
        if decision is Decision.CLOUD:
            fused = assisted_inference(pred, self._cloud_masks(img)).semantic
            self.buffer.append(img, fused)
            output = fused
        else:
            output = edge_out
        self.interval += 1
        self.processed += 1
        iou_edge = iou_fused = None
        if truth is not None:
            if decision is Decision.EDGE or diagnostics:
                iou_edge = mean_iou(edge_out, truth)
            if fused is None and diagnostics:
                fused = assisted_inference(pred, self.cloud.model.infer(img)).semantic
            if fused is not None:
                iou_fused = mean_iou(fused, truth)
        latency = sample_latency(decision, self.config.latency, img)
        return InferenceOutcome(decision, conf, output, latency, iou_edge, iou_fused)

    # -- adaptation ---------------------------------------------------------

    def triggered(self) -> bool:
        if not self.config.adaptive_updates:
            return False
        return len(self.buffer) > self.config.maxsize or self.interval > self.config.maxtime

    def maybe_update(self) -> UpdateRecord | None:
        """Run a training round when the buffer or interval trigger fires."""
        if not self.triggered():
            return None
        batch = self.buffer.items()
        self.interval = 0
        if not batch:
            return None
        cfg = self.config.train
        model, gate = self.edge.model, self.edge.gate
        loss_f = loss_h = None
        new_model = new_gate = None
        if isinstance(model, TrainableEdgeModel):
            new_model, loss_f = update_f(model, batch, cfg)
            model = new_model
        if self.config.policy.scorer is Scorer.LEARNED and gate is not None:
            new_gate, loss_h = update_h(gate, gate_batch(model, batch, cfg.eps), cfg)
        if new_model is not None or new_gate is not None:
            frame = wire.encode(wire.WireMessage(wire.MessageKind.MODEL_UPDATE,
                                                 wire.ModelUpdate(new_model, new_gate)))
            self.downlink.send(frame)
            self.edge.apply(self.downlink.recv())
        self.buffer.clear()
        record = UpdateRecord(self.processed, len(batch), loss_f, loss_h)
        self.updates.append(record)
        return record

    # -- stream -------------------------------------------------------------

    def run_stream(self, stream: Iterable[Sample], diagnostics: bool = True) -> RunReport:
        trace = []
        for i, sample in enumerate(stream):
            try:
                out = self.process_sample(sample.image, sample.truth, diagnostics)
                self.maybe_update()
            except Exception as exc:
                raise SampleError(i, exc) from exc
            trace.append(TraceRow(i, sample.task, out.decision, out.confidence, out.latency_s,
                                  out.iou_edge, out.iou_fused))
        return build_report(trace, self.updates)
