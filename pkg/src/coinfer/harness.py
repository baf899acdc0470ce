"""Experiment configuration, the strategy matrix, delta sweeps and result export.

Configs are sectioned ``key = value`` files. Every key has a default taken
from the named preset, so a config may be as short as ``[experiment]`` with
``preset = drift``. ``config_text`` writes the fully resolved form; feeding
it back reproduces a run exactly.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adapt import TrainConfig, gate_batch, update_f, update_h
from .fusion import assisted_inference
from .gating import (Gate, GatePolicy, Scorer, extract_features, score_mess, score_sm,
                     score_spp)
from .metrics import (RunReport, auc_low_is_positive, hard_input_truth, mean_iou, report_csv,
                      trace_csv)
from .models import (OracleCloudModel, OracleEdgeModel, TrainableEdgeModel, TruthTable)
from .orchestrator import Orchestrator, OrchestratorConfig
from .simenv import (LATENCY_PRESETS, ClassAppearance, LatencyModel, StreamSpec, TaskSpec,
                     generate_stream, preset_latency)
from .tensors import argmax_labels

STRATEGIES = ("adaptive", "frozen", "mess", "sm", "spp", "edge", "cloud")
GATED = ("adaptive", "frozen", "mess", "sm", "spp")
BASELINE_SCORERS = {"mess": Scorer.MESS, "sm": Scorer.SM, "spp": Scorer.SPP}
SWEEP_SCORERS = ("learned", "mess", "sm", "spp")
PRETRAIN_SEED_OFFSET = 100_003


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class ModelSettings:
    edge: str = "trainable"  # or "oracle"
    rho: float = 0.9
    tau: float = 0.1
    cloud_pi: float = 0.0
    pretrain_samples: int = 200
    pretrain_learning_rate: float = 3.0
    pretrain_epochs: int = 3000
    gate_pretrain_epochs: int = 30000


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    stream: StreamSpec
    models: ModelSettings
    hidden_dim: int
    policy: GatePolicy
    # per-baseline thresholds; None means calibrate on the pretraining samples
    baseline_thresholds: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    maxsize: int = 32
    maxtime: int = 1000
    latency_preset: str | None = "cloud-robotics"
    latency: LatencyModel | None = None
    seeds: tuple[int, ...] = (0,)
    strategies: tuple[str, ...] = STRATEGIES
    sweep_deltas: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(21))
    sweep_scorers: tuple[str, ...] = SWEEP_SCORERS
    out: str = "results"
    # heuristic scorers run on the pretrained edge model unless this is set
    baseline_updates: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"unknown strategies {bad}; choose from {list(STRATEGIES)}")
        if any(not 0.0 <= d <= 1.0 for d in self.sweep_deltas):
            raise ConfigError("sweep deltas must lie in [0, 1]")
        if any(s not in SWEEP_SCORERS for s in self.sweep_scorers):
            raise ConfigError(f"sweep scorers must come from {list(SWEEP_SCORERS)}")
        for k, v in self.baseline_thresholds.items():
            if k not in BASELINE_SCORERS or (v is not None and not 0.0 <= v <= 1.0):
                raise ConfigError(f"bad baseline threshold {k} = {v}")
        if self.latency is None and self.latency_preset not in LATENCY_PRESETS:
            raise ConfigError(f"unknown latency preset {self.latency_preset!r}")
        if self.models.edge not in ("trainable", "oracle"):
            raise ConfigError("models.edge must be 'trainable' or 'oracle'")
        if self.models.pretrain_samples < 1:
            raise ConfigError("pretrain_samples must be >= 1")

    def latency_model(self) -> LatencyModel:
        if self.latency is not None:
            return self.latency
        return preset_latency(self.latency_preset, (self.stream.height, self.stream.width))


DRIFT_FREQUENCIES = ((0.55, 0.25, 0.10, 0.10), (0.25, 0.45, 0.20, 0.10),
                     (0.10, 0.20, 0.50, 0.20), (0.10, 0.10, 0.25, 0.55),
                     (0.30, 0.10, 0.10, 0.50))
# cumulative illumination drift, one step per task
DRIFT_SHIFTS = ((0, 0, 0), (10, 6, -8), (20, 12, -16), (30, 18, -24), (40, 24, -32))
DRIFT_APPEARANCE = (ClassAppearance((60, 140, 60), 35.0, 0.3),
                    ClassAppearance((140, 140, 140), 35.0, 0.3),
                    ClassAppearance((170, 90, 60), 35.0, 0.25),
                    ClassAppearance((70, 80, 170), 35.0, 0.25))


def drift_preset(task_length: int = 300) -> ExperimentConfig:
    tasks = tuple(TaskSpec(task_length, f, s) for f, s in zip(DRIFT_FREQUENCIES, DRIFT_SHIFTS))
    stream = StreamSpec(4, 16, 16, tasks, DRIFT_APPEARANCE, regions_per_sample=4, seed=0,
                        noise_range=(0.15, 0.9))
    return ExperimentConfig(
        name="drift",
        stream=stream,
        models=ModelSettings(),
        hidden_dim=16,
        policy=GatePolicy(Scorer.LEARNED, 0.75, 0.5),
        baseline_thresholds={"mess": None, "sm": None, "spp": None},
        train=TrainConfig(learning_rate=0.2, beta=0.03, epochs=50, gate_learning_rate=10.0),
        seeds=(0, 1, 2, 3, 4),
    )


PRESETS: dict[str, Callable[[], ExperimentConfig]] = {"drift": drift_preset}


def _nums(text: str, conv=float) -> list:
    return [conv(t) for t in text.replace(",", " ").split()]


def _groups(text: str, conv=float) -> list[list]:
    return [_nums(g, conv) for g in text.split("|")]


def _fmt_num(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def _fmt_list(vals) -> str:
    return " ".join(_fmt_num(v) for v in vals)


def _fmt_groups(groups) -> str:
    return " | ".join(_fmt_list(g) for g in groups)


_SECTIONS = {
    "experiment": {"preset", "name", "seeds", "strategies", "out", "baseline_updates"},
    "stream": {"class_count", "height", "width", "regions_per_sample", "noise_low", "noise_high",
               "task_lengths", "frequencies", "shifts", "appearance_mean", "appearance_std",
               "appearance_scale"},
    "models": {f.name for f in dataclasses.fields(ModelSettings)},
    "gate": {"hidden_dim", "scorer", "threshold", "mess_pixel_threshold", "threshold_mess",
             "threshold_sm", "threshold_spp"},
    "train": {"learning_rate", "gate_learning_rate", "beta", "epochs", "eps"},
    "orchestrator": {"maxsize", "maxtime"},
    "latency": {"preset", "edge_compute_s", "cloud_compute_s", "bandwidth_bytes_per_s"},
    "sweep": {"deltas", "scorers"},
}


def parse_config(text: str) -> ExperimentConfig:
    """Build a config from sectioned key = value text on top of its preset."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        extra = set(cp[sec]) - _SECTIONS[sec]
        if extra:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(extra)}")

    def get(sec, key):
        raw = cp.get(sec, key, fallback=None) if cp.has_section(sec) else None
        if raw is not None and not raw.strip():
            raise ConfigError(f"[{sec}] {key} is empty")
        return raw

    preset = get("experiment", "preset") or "drift"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    try:
        return _apply(cfg, get)
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _apply(cfg: ExperimentConfig, get) -> ExperimentConfig:
    st = cfg.stream
    m = int(get("stream", "class_count") or st.class_count)
    lengths = _nums(get("stream", "task_lengths"), int) if get("stream", "task_lengths") else \
        [t.length for t in st.tasks]
    freqs = _groups(get("stream", "frequencies")) if get("stream", "frequencies") else \
        [t.frequencies for t in st.tasks]
    shifts = _groups(get("stream", "shifts")) if get("stream", "shifts") else \
        [t.shift for t in st.tasks]
    if not (len(lengths) == len(freqs) == len(shifts)):
        raise ConfigError("task_lengths, frequencies and shifts must list the same number of tasks")
    means = _groups(get("stream", "appearance_mean")) if get("stream", "appearance_mean") else \
        [a.mean for a in st.appearance]
    stds = _nums(get("stream", "appearance_std")) if get("stream", "appearance_std") else \
        [a.std for a in st.appearance]
    scales = _nums(get("stream", "appearance_scale")) if get("stream", "appearance_scale") else \
        [a.scale for a in st.appearance]
    if not (len(means) == len(stds) == len(scales) == m):
        raise ConfigError("appearance entries must number class_count")
    noise = (float(get("stream", "noise_low") or st.noise_range[0]),
             float(get("stream", "noise_high") or st.noise_range[1]))
    stream = StreamSpec(
        m, int(get("stream", "height") or st.height), int(get("stream", "width") or st.width),
        tuple(TaskSpec(n, tuple(f), tuple(s)) for n, f, s in zip(lengths, freqs, shifts)),
        tuple(ClassAppearance(tuple(mu), sd, sc) for mu, sd, sc in zip(means, stds, scales)),
        int(get("stream", "regions_per_sample") or st.regions_per_sample), 0, noise)

    mkw = {}
    for f in dataclasses.fields(ModelSettings):
        raw = get("models", f.name)
        if raw is not None:
            mkw[f.name] = raw.strip() if f.name == "edge" else type(getattr(cfg.models, f.name))(raw)
    models = dataclasses.replace(cfg.models, **mkw)

    pol = cfg.policy
    policy = GatePolicy(Scorer(get("gate", "scorer") or pol.scorer.value),
                        float(get("gate", "threshold") or pol.threshold),
                        float(get("gate", "mess_pixel_threshold") or pol.mess_pixel_threshold))
    thresholds = dict(cfg.baseline_thresholds)
    for name in BASELINE_SCORERS:
        raw = get("gate", f"threshold_{name}")
        if raw is not None:
            thresholds[name] = None if raw.strip() == "auto" else float(raw)
        thresholds.setdefault(name, None)

    tr = cfg.train
    glr = get("train", "gate_learning_rate")
    train = TrainConfig(float(get("train", "learning_rate") or tr.learning_rate),
                        float(get("train", "beta") or tr.beta),
                        int(get("train", "epochs") or tr.epochs),
                        float(get("train", "eps") or tr.eps),
                        (None if glr.strip() == "auto" else float(glr)) if glr is not None
                        else tr.gate_learning_rate)

    lat_preset = get("latency", "preset")
    latency, preset_name = cfg.latency, cfg.latency_preset
    if get("latency", "edge_compute_s") is not None:
        latency = LatencyModel(float(get("latency", "edge_compute_s")),
                               float(get("latency", "cloud_compute_s") or 0.0),
                               float(get("latency", "bandwidth_bytes_per_s") or 500000.0))
        preset_name = None
    elif lat_preset is not None:
        preset_name, latency = lat_preset.strip(), None

    seeds = tuple(_nums(get("experiment", "seeds"), int)) if get("experiment", "seeds") else cfg.seeds
    strategies = tuple(get("experiment", "strategies").split()) if get("experiment", "strategies") \
        else cfg.strategies
    deltas = tuple(_nums(get("sweep", "deltas"))) if get("sweep", "deltas") else cfg.sweep_deltas
    scorers = tuple(get("sweep", "scorers").split()) if get("sweep", "scorers") else cfg.sweep_scorers

    raw_bu = get("experiment", "baseline_updates")
    if raw_bu is None:
        baseline_updates = cfg.baseline_updates
    elif raw_bu.strip().lower() in ("true", "false"):
        baseline_updates = raw_bu.strip().lower() == "true"
    else:
        raise ConfigError(f"baseline_updates must be true or false, got {raw_bu!r}")

    return ExperimentConfig(
        name=(get("experiment", "name") or cfg.name).strip(),
        stream=stream, models=models,
        hidden_dim=int(get("gate", "hidden_dim") or cfg.hidden_dim),
        policy=policy, baseline_thresholds=thresholds, train=train,
        maxsize=int(get("orchestrator", "maxsize") or cfg.maxsize),
        maxtime=int(get("orchestrator", "maxtime") or cfg.maxtime),
        latency_preset=preset_name, latency=latency, seeds=seeds, strategies=strategies,
        sweep_deltas=deltas, sweep_scorers=scorers,
        out=(get("experiment", "out") or cfg.out).strip(),
        baseline_updates=baseline_updates,
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_text(cfg: ExperimentConfig) -> str:
    """Fully resolved config; parsing it back yields an equal config."""
    st, mo, tr = cfg.stream, cfg.models, cfg.train
    lines = ["[experiment]", "preset = drift", f"name = {cfg.name}",
             f"seeds = {_fmt_list(cfg.seeds)}", f"strategies = {' '.join(cfg.strategies)}",
             f"out = {cfg.out}", f"baseline_updates = {_fmt_num(cfg.baseline_updates)}", "",
             "[stream]", f"class_count = {st.class_count}", f"height = {st.height}",
             f"width = {st.width}", f"regions_per_sample = {st.regions_per_sample}",
             f"noise_low = {_fmt_num(st.noise_range[0])}",
             f"noise_high = {_fmt_num(st.noise_range[1])}",
             f"task_lengths = {_fmt_list(t.length for t in st.tasks)}",
             f"frequencies = {_fmt_groups(t.frequencies for t in st.tasks)}",
             f"shifts = {_fmt_groups(map(float, t.shift) for t in st.tasks)}",
             f"appearance_mean = {_fmt_groups(map(float, a.mean) for a in st.appearance)}",
             f"appearance_std = {_fmt_list(a.std for a in st.appearance)}",
             f"appearance_scale = {_fmt_list(a.scale for a in st.appearance)}", "",
             "[models]"]
    for f in dataclasses.fields(ModelSettings):
        v = getattr(mo, f.name)
        lines.append(f"{f.name} = {v if isinstance(v, str) else _fmt_num(v)}")
    lines += ["", "[gate]", f"hidden_dim = {cfg.hidden_dim}", f"scorer = {cfg.policy.scorer.value}",
              f"threshold = {_fmt_num(cfg.policy.threshold)}",
              f"mess_pixel_threshold = {_fmt_num(cfg.policy.mess_pixel_threshold)}"]
    for name in BASELINE_SCORERS:
        v = cfg.baseline_thresholds.get(name)
        lines.append(f"threshold_{name} = {'auto' if v is None else _fmt_num(v)}")
    lines += ["", "[train]", f"learning_rate = {_fmt_num(tr.learning_rate)}",
              f"gate_learning_rate = "
              f"{'auto' if tr.gate_learning_rate is None else _fmt_num(tr.gate_learning_rate)}",
              f"beta = {_fmt_num(tr.beta)}", f"epochs = {tr.epochs}", f"eps = {_fmt_num(tr.eps)}",
              "", "[orchestrator]", f"maxsize = {cfg.maxsize}", f"maxtime = {cfg.maxtime}",
              "", "[latency]"]
    if cfg.latency is None:
        lines.append(f"preset = {cfg.latency_preset}")
    else:
        lat = cfg.latency
        lines += [f"edge_compute_s = {_fmt_num(lat.edge_compute_s)}",
                  f"cloud_compute_s = {_fmt_num(lat.cloud_compute_s)}",
                  f"bandwidth_bytes_per_s = {_fmt_num(lat.bandwidth_bytes_per_s)}"]
    lines += ["", "[sweep]", f"deltas = {_fmt_list(cfg.sweep_deltas)}",
              f"scorers = {' '.join(cfg.sweep_scorers)}"]
    return "\n".join(lines) + "\n"


# -- pretraining ------------------------------------------------------------


@dataclass(frozen=True)
class Pretrained:
    """Deployable starting point for one seed: models plus calibrated baseline thresholds."""

    edge: object
    gate: Gate
    thresholds: dict
    pretrain_cur: float


_PRETRAIN_CACHE: dict[tuple[str, int], Pretrained] = {}


def _pretrain_stream(cfg: ExperimentConfig, seed: int):
    first = cfg.stream.tasks[0]
    task = TaskSpec(cfg.models.pretrain_samples, first.frequencies, first.shift)
    spec = dataclasses.replace(cfg.stream, tasks=(task,), seed=seed + PRETRAIN_SEED_OFFSET)
    return generate_stream(spec)


def _edge_model(cfg: ExperimentConfig, truth: TruthTable, seed: int):
    if cfg.models.edge == "oracle":
        return OracleEdgeModel(truth, cfg.models.rho, cfg.models.tau, seed)
    return TrainableEdgeModel.zeros(cfg.stream.class_count)


def _baseline_score(name: str, pred, cfg: ExperimentConfig) -> float:
    if name == "mess":
        return score_mess(pred, cfg.policy.mess_pixel_threshold)
    if name == "sm":
        return score_sm(pred)
    return score_spp(pred)


def calibrate_threshold(scores, target_share: float) -> float:
    """Largest threshold whose cloud share ``mean(scores <= t)`` stays within the target."""
    scores = np.asarray(scores, dtype=float)
    best = 0.0
    for v in np.unique(scores):
        if np.mean(scores <= v) <= target_share + 1e-12:
            best = float(v)
        else:
            break
    return best


def pretrain(cfg: ExperimentConfig, seed: int) -> Pretrained:
    """Fit the edge model on labelled task-0 samples, then the gate on their pseudo-labels.

    Baseline thresholds left on ``auto`` are set so each heuristic scorer
    sends the same share of pretraining samples to the cloud as the learned
    gate does at the configured threshold.
    """
    key = (config_text(cfg), seed)
    if key in _PRETRAIN_CACHE:
        return _PRETRAIN_CACHE[key]
    samples = _pretrain_stream(cfg, seed)
    truth = TruthTable()
    for s in samples:
        truth.register(s.image, s.truth)
    edge = _edge_model(cfg, truth, seed)
    if isinstance(edge, TrainableEdgeModel):
        pcfg = TrainConfig(cfg.models.pretrain_learning_rate, cfg.train.beta,
                           cfg.models.pretrain_epochs, cfg.train.eps)
        edge, _ = update_f(edge, [(s.image, s.truth) for s in samples], pcfg)
    cloud = OracleCloudModel(truth, cfg.models.cloud_pi, seed)
    pairs = [(s.image, assisted_inference(edge.infer(s.image), cloud.infer(s.image)).semantic)
             for s in samples]
    gcfg = TrainConfig(cfg.train.gate_lr, cfg.train.beta, cfg.models.gate_pretrain_epochs,
                       cfg.train.eps)
    gate, _ = update_h(Gate.initialize(cfg.hidden_dim, seed), gate_batch(edge, pairs, cfg.train.eps),
                       gcfg)
    preds = [edge.infer(s.image) for s in samples]
    conf = gate.forward(np.vstack([extract_features(p).as_array() for p in preds]))
    target = float(np.mean(conf <= cfg.policy.threshold))
    thresholds = {}
    for name in BASELINE_SCORERS:
        fixed = cfg.baseline_thresholds.get(name)
        if fixed is not None:
            thresholds[name] = fixed
            continue
        scores = np.array([_baseline_score(name, p, cfg) for p in preds])
        thresholds[name] = calibrate_threshold(scores, target)
    out = Pretrained(edge, gate, thresholds, target)
    _PRETRAIN_CACHE[key] = out
    return out


# -- the strategy matrix ----------------------------------------------------


def strategy_setup(cfg: ExperimentConfig, strategy: str, pre: Pretrained) -> OrchestratorConfig:
    lat = cfg.latency_model()
    pol = cfg.policy
    if strategy == "adaptive":
        policy, adaptive = pol, True
    elif strategy == "frozen":
        policy, adaptive = pol, False
    elif strategy in BASELINE_SCORERS:
        policy = GatePolicy(BASELINE_SCORERS[strategy], pre.thresholds[strategy],
                            pol.mess_pixel_threshold)
        adaptive = cfg.baseline_updates
    elif strategy == "edge":
        # the learned gate is strictly positive, so every sample stays on the edge
        policy, adaptive = GatePolicy(Scorer.LEARNED, 0.0), False
    elif strategy == "cloud":
        policy, adaptive = GatePolicy(Scorer.LEARNED, 1.0), False
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return OrchestratorConfig(lat, policy, cfg.train, cfg.maxsize, cfg.maxtime, adaptive)


def stream_for(cfg: ExperimentConfig, seed: int):
    return generate_stream(cfg.stream.with_seed(seed))


def _fresh_models(cfg: ExperimentConfig, seed: int, pre: Pretrained):
    truth = TruthTable()
    edge = pre.edge
    if isinstance(edge, OracleEdgeModel):
        edge = dataclasses.replace(edge, truth=truth)
    return edge, OracleCloudModel(truth, cfg.models.cloud_pi, seed), truth


def run_cell(cfg: ExperimentConfig, strategy: str, seed: int, stream=None) -> RunReport:
    pre = pretrain(cfg, seed)
    edge, cloud, truth = _fresh_models(cfg, seed, pre)
    orch = Orchestrator(strategy_setup(cfg, strategy, pre), edge, cloud, pre.gate, truth)
    return orch.run_stream(stream if stream is not None else stream_for(cfg, seed))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: dict = field(default_factory=dict)  # (strategy, seed) -> RunReport
    failures: dict = field(default_factory=dict)  # (strategy, seed) -> message

    @property
    def ok(self) -> bool:
        return not self.failures

    def cells(self):
        return [(s, seed) for s in self.config.strategies for seed in self.config.seeds]


def run_experiment(cfg: ExperimentConfig, log: Callable[[str], None] | None = None,
                   cell_runner=None) -> ExperimentResult:
    """Run every (strategy, seed) cell; a failing cell is recorded and the rest still run."""
    cell_runner = cell_runner or run_cell
    result = ExperimentResult(cfg)
    for strategy, seed in result.cells():
        try:
            rep = cell_runner(cfg, strategy, seed)
        except Exception as exc:  # noqa: BLE001 - any cell failure is recorded, not fatal
            result.failures[(strategy, seed)] = f"{type(exc).__name__}: {exc}"
            if log:
                log(f"{strategy} seed {seed}: FAILED ({exc})")
            continue
        result.reports[(strategy, seed)] = rep
        if log:
            agg = rep.aggregate
            log(f"{strategy} seed {seed}: miou {agg.miou:.4f} cur {agg.cur:.4f} "
                f"latency {agg.avg_latency_s:.4f}")
    return result


def comparison_table(result: ExperimentResult) -> list[dict]:
    """Seed-averaged per-strategy rows: per-task mIoU/CUR, overall mIoU, CUR and latency."""
    rows = []
    n_tasks = len(result.config.stream.tasks)
    for strategy in result.config.strategies:
        reps = [result.reports[(strategy, s)] for s in result.config.seeds
                if (strategy, s) in result.reports]
        if not reps:
            continue
        row = {"strategy": strategy, "seeds": len(reps)}
        for t in range(n_tasks):
            row[f"task{t}_miou"] = float(np.mean([r.tasks[t].miou for r in reps]))
            row[f"task{t}_cur"] = float(np.mean([r.tasks[t].cur for r in reps]))
        row["miou"] = float(np.mean([r.aggregate.miou for r in reps]))
        row["cur"] = float(np.mean([r.aggregate.cur for r in reps]))
        row["avg_latency_s"] = float(np.mean([r.aggregate.avg_latency_s for r in reps]))
        rows.append(row)
    return rows


# -- delta sweep ------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    scorer: str
    seed: int
    delta: float
    cur: float
    miou: float


def _score_samples(cfg, edge, gate, cloud, truth, samples):
    conf = {name: [] for name in SWEEP_SCORERS}
    iou_edge, iou_fused = [], []
    for s in samples:
        truth.register(s.image, s.truth)
        pred = edge.infer(s.image)
        conf["learned"].append(float(gate.forward(extract_features(pred).as_array())[0]))
        for name in BASELINE_SCORERS:
            conf[name].append(_baseline_score(name, pred, cfg))
        iou_edge.append(mean_iou(argmax_labels(pred), s.truth))
        fused = assisted_inference(pred, cloud.infer(s.image)).semantic
        iou_fused.append(mean_iou(fused, s.truth))
    return {k: np.array(v) for k, v in conf.items()}, np.array(iou_edge), np.array(iou_fused)


def sweep_scores(cfg: ExperimentConfig, seed: int, stream=None):
    """Per-sample confidences under every scorer plus edge and fused IoU, with frozen models."""
    pre = pretrain(cfg, seed)
    edge, cloud, truth = _fresh_models(cfg, seed, pre)
    samples = stream if stream is not None else stream_for(cfg, seed)
    return _score_samples(cfg, edge, pre.gate, cloud, truth, samples)


def gate_separation(cfg: ExperimentConfig, seed: int, holdout: int = 200,
                    rounds: int = 1) -> dict[str, float]:
    """Hard-input AUC of every scorer after ``rounds`` adaptation rounds.

    The adaptive pipeline runs until its round count is reached; the next
    ``holdout`` stream samples, never seen by training, are then scored
    with the updated edge model and gate.
    """
    pre = pretrain(cfg, seed)
    edge, cloud, truth = _fresh_models(cfg, seed, pre)
    orch = Orchestrator(strategy_setup(cfg, "adaptive", pre), edge, cloud, pre.gate, truth)
    stream = stream_for(cfg, seed)
    i = 0
    while len(orch.updates) < rounds:
        if i >= len(stream):
            raise ValueError(f"stream ended after {len(orch.updates)} of {rounds} rounds")
        orch.process_sample(stream[i].image, stream[i].truth, diagnostics=False)
        orch.maybe_update()
        i += 1
    held = stream[i:i + holdout]
    if not held:
        raise ValueError("no samples left for the held-out evaluation")
    conf, e, f = _score_samples(cfg, orch.edge.model, orch.edge.gate, cloud, truth, held)
    hard = [hard_input_truth(fi, ei) for fi, ei in zip(f, e)]
    return {name: auc_low_is_positive(c, hard) for name, c in conf.items()}


def sweep_delta(cfg: ExperimentConfig, deltas: Sequence[float] | None = None) -> list[SweepPoint]:
    """mIoU-vs-CUR points: one per (scorer, seed, delta), models frozen across the sweep.

    A frozen run's decisions depend on delta only through ``confidence > delta``,
    so each point follows from a single scoring pass over the stream.
    """
    deltas = tuple(cfg.sweep_deltas if deltas is None else deltas)
    if any(not 0.0 <= d <= 1.0 for d in deltas):
        raise ConfigError("sweep deltas must lie in [0, 1]")
    points = []
    for seed in cfg.seeds:
        conf, e, f = sweep_scores(cfg, seed)
        for name in cfg.sweep_scorers:
            c = conf[name]
            for d in deltas:
                edge_side = c > d
                points.append(SweepPoint(name, seed, float(d), float(np.mean(~edge_side)),
                                         float(np.mean(np.where(edge_side, e, f)))))
    return points


def mean_curve(points: Sequence[SweepPoint], scorer: str) -> list[tuple[float, float, float]]:
    """Seed-averaged (delta, cur, miou) for one scorer, ordered by delta."""
    by_delta: dict[float, list[SweepPoint]] = {}
    for p in points:
        if p.scorer == scorer:
            by_delta.setdefault(p.delta, []).append(p)
    return [(d, float(np.mean([p.cur for p in ps])), float(np.mean([p.miou for p in ps])))
            for d, ps in sorted(by_delta.items())]


def binned_comparison(points: Sequence[SweepPoint], a: str, b: str, width: float = 0.02,
                      seed: int | None = None) -> list[tuple[float, float, float]]:
    """(bin start, mIoU of a, mIoU of b) for CUR bins where both scorers have points."""
    def bins(name):
        out: dict[int, list[float]] = {}
        for p in points:
            if p.scorer == name and (seed is None or p.seed == seed):
                out.setdefault(int(math.floor(p.cur / width + 1e-9)), []).append(p.miou)
        return out
    ba, bb = bins(a), bins(b)
    return [(k * width, float(np.mean(ba[k])), float(np.mean(bb[k])))
            for k in sorted(set(ba) & set(bb))]


# -- export -----------------------------------------------------------------


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def summary_rows(result: ExperimentResult) -> list[list[str]]:
    n_tasks = len(result.config.stream.tasks)
    header = ["strategy", "seed", "status"]
    for t in range(n_tasks):
        header += [f"task{t}_miou", f"task{t}_cur"]
    header += ["miou", "cur", "avg_latency_s"]
    rows = [header]
    for strategy, seed in result.cells():
        rep = result.reports.get((strategy, seed))
        if rep is None or rep.aggregate is None:
            status = "failed" if (strategy, seed) in result.failures else "empty"
            rows.append([strategy, str(seed), status] + [""] * (len(header) - 3))
            continue
        row = [strategy, str(seed), "ok"]
        for t in range(n_tasks):
            rec = rep.tasks[t] if t < len(rep.tasks) else None
            row += [_num(rec.miou if rec else None), _num(rec.cur if rec else None)]
        agg = rep.aggregate
        row += [_num(agg.miou), _num(agg.cur), _num(agg.avg_latency_s)]
        rows.append(row)
    return rows


def _lines(rows) -> str:
    return "".join(",".join(r) + "\n" for r in rows)


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export(result: ExperimentResult | None, out_dir: str, cfg: ExperimentConfig | None = None,
           sweep: Sequence[SweepPoint] | None = None) -> list[str]:
    """Write per-cell CSVs, traces, summary and config echo; returns the written paths.

    With no result, or one that ran no cells, only the config echo is written.
    """
    cfg = cfg if cfg is not None else (result.config if result else None)
    if cfg is None:
        raise ValueError("export needs a config or a result")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        _write(path, text)
        written.append(path)

    put("config.echo.txt", config_text(cfg))
    if result is not None and (result.reports or result.failures):
        for (strategy, seed), rep in sorted(result.reports.items(),
                                            key=lambda kv: (STRATEGIES.index(kv[0][0]), kv[0][1])):
            put(f"{strategy}_{seed}.csv", report_csv(rep))
            put(f"{strategy}_{seed}_trace.csv", trace_csv(rep))
        put("summary.csv", _lines(summary_rows(result)))
        table = comparison_table(result)
        if table:
            keys = list(table[0])
            put("comparison.csv", _lines([keys] + [[_num(r[k]) for k in keys] for r in table]))
    if sweep:
        rows = [["scorer", "seed", "delta", "cur", "miou"]]
        rows += [[p.scorer, str(p.seed), _num(p.delta), _num(p.cur), _num(p.miou)] for p in sweep]
        put("sweep.csv", _lines(rows))
    return written
