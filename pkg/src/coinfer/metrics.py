"""IoU, collaborative mIoU, cloud upload rate, latency and gate separation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .gating import Decision
from .tensors import SemanticMask

HARD_GAP = 0.1


def iou_per_class(pred: SemanticMask, truth: SemanticMask) -> np.ndarray:
    """Per-class IoU; classes absent from both masks come back as NaN."""
    if pred.shape != truth.shape or pred.class_count != truth.class_count:
        raise ValueError("prediction and truth must share dimensions and class count")
    m = truth.class_count
    p = pred.labels.ravel()
    t = truth.labels.ravel()
    inter = np.bincount(p[p == t], minlength=m).astype(float)
    union = np.bincount(p, minlength=m) + np.bincount(t, minlength=m) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def mean_iou(pred: SemanticMask, truth: SemanticMask) -> float:
    return float(np.nanmean(iou_per_class(pred, truth)))


def hard_input_truth(iou_fused: float, iou_edge: float) -> bool:
    # small slack so that e.g. 0.7 - 0.6 counts as the inclusive boundary
    return iou_fused - iou_edge >= HARD_GAP - 1e-12


@dataclass(frozen=True)
class TraceRow:
    sample: int
    task: int
    decision: Decision
    confidence: float
    latency_s: float
    iou_edge: float | None = None
    iou_fused: float | None = None

    @property
    def emitted_iou(self) -> float | None:
        return self.iou_edge if self.decision is Decision.EDGE else self.iou_fused

    @property
    def hard_truth(self) -> bool | None:
        if self.iou_edge is None or self.iou_fused is None:
            return None
        return hard_input_truth(self.iou_fused, self.iou_edge)


def _require(trace: Sequence[TraceRow]) -> None:
    if not trace:
        raise ValueError("trace is empty")


def collab_miou(trace: Sequence[TraceRow]) -> float:
    _require(trace)
    vals = [r.emitted_iou for r in trace]
    if any(v is None for v in vals):
        raise ValueError("trace lacks IoU for an emitted output")
    return float(np.mean(vals))


def cur(trace: Sequence[TraceRow]) -> float:
    _require(trace)
    return sum(r.decision is Decision.CLOUD for r in trace) / len(trace)


def avg_latency(trace: Sequence[TraceRow]) -> float:
    _require(trace)
    return float(np.mean([r.latency_s for r in trace]))


def auc_low_is_positive(confidences, positive) -> float:
    """Rank AUC where a *lower* confidence should flag the positive class; ties count half."""
    conf = np.asarray(confidences, dtype=float)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both hard and easy samples")
    ranks = rankdata(-conf)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def gate_auc(trace: Sequence[TraceRow]) -> float:
    labels = [r.hard_truth for r in trace]
    if any(l is None for l in labels):
        raise ValueError("gate_auc needs both IoUs on every sample")
    return auc_low_is_positive([r.confidence for r in trace], labels)


# -- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class TaskRecord:
    task: str
    samples: int
    miou: float
    cur: float
    avg_latency_s: float


@dataclass(frozen=True)
class UpdateRecord:
    after_sample: int
    buffer_size: int
    loss_f: float | None
    loss_h: float | None


@dataclass
class RunReport:
    tasks: list[TaskRecord] = field(default_factory=list)
    aggregate: TaskRecord | None = None
    trace: list[TraceRow] = field(default_factory=list)
    updates: list[UpdateRecord] = field(default_factory=list)

    @property
    def samples(self) -> int:
        return self.aggregate.samples if self.aggregate else 0


def _record(name: str, rows: Sequence[TraceRow]) -> TaskRecord:
    emitted = [r.emitted_iou for r in rows]
    miou = collab_miou(rows) if all(v is not None for v in emitted) else math.nan
    return TaskRecord(name, len(rows), miou, cur(rows), avg_latency(rows))


def build_report(trace: Sequence[TraceRow], updates: Sequence[UpdateRecord] = ()) -> RunReport:
    trace = list(trace)
    if not trace:
        return RunReport(updates=list(updates))
    by_task: dict[int, list[TraceRow]] = {}
    for row in trace:
        by_task.setdefault(row.task, []).append(row)
    tasks = [_record(str(t), rows) for t, rows in sorted(by_task.items())]
    return RunReport(tasks, _record("all", trace), trace, list(updates))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


REPORT_COLUMNS = ("task", "samples", "miou", "cur", "avg_latency_s")
TRACE_COLUMNS = ("sample", "decision", "confidence", "iou_edge", "iou_fused", "latency_s",
                 "hard_truth")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def report_csv(report: RunReport) -> str:
    recs = list(report.tasks) + ([report.aggregate] if report.aggregate else [])
    return _csv(REPORT_COLUMNS, [[_fmt(getattr(r, c)) for c in REPORT_COLUMNS] for r in recs])


def trace_csv(report: RunReport) -> str:
    rows = []
    for r in report.trace:
        rows.append([_fmt(r.sample), r.decision.value, _fmt(r.confidence), _fmt(r.iou_edge),
                     _fmt(r.iou_fused), _fmt(r.latency_s), _fmt(r.hard_truth)])
    return _csv(TRACE_COLUMNS, rows)


def report_text(report: RunReport) -> str:
    """Structured text mirror of the report, one brace block per record."""
    lines = ["{", f'  "samples": {report.samples},', f'  "updates": {len(report.updates)},',
             '  "tasks": [']
    recs = list(report.tasks)
    for i, r in enumerate(recs):
        sep = "," if i < len(recs) - 1 else ""
        lines.append("    {" + ", ".join(f'"{c}": {_quote(getattr(r, c))}' for c in REPORT_COLUMNS)
                     + "}" + sep)
    lines.append("  ],")
    agg = report.aggregate
    if agg is None:
        lines.append('  "aggregate": null')
    else:
        lines.append('  "aggregate": {' + ", ".join(
            f'"{c}": {_quote(getattr(agg, c))}' for c in REPORT_COLUMNS) + "}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _quote(v) -> str:
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, float) and math.isnan(v):
        return "null"
    return _fmt(v)
