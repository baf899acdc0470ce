"""Synthetic drifting streams and the edge/cloud latency model."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .gating import Decision
from .tensors import Image, SemanticMask

FOUR_MBPS = 4_000_000 / 8  # bytes per second


@dataclass(frozen=True)
class TaskSpec:
    length: int
    frequencies: tuple[float, ...]
    # additive RGB offset applied to every pixel of the task (illumination drift)
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        freqs = tuple(float(f) for f in self.frequencies)
        object.__setattr__(self, "frequencies", freqs)
        shift = tuple(float(v) for v in self.shift)
        if len(shift) != 3:
            raise ValueError("shift needs one offset per channel")
        object.__setattr__(self, "shift", shift)
        if self.length < 1:
            raise ValueError("task length must be >= 1")
        if any(f < 0 for f in freqs) or abs(sum(freqs) - 1.0) > 1e-6:
            raise ValueError(f"frequencies must be non-negative and sum to 1: {freqs}")


@dataclass(frozen=True)
class ClassAppearance:
    mean: tuple[float, float, float]
    std: float = 30.0
    scale: float = 0.3  # region half-extent as a fraction of the grid side


@dataclass(frozen=True)
class StreamSpec:
    class_count: int
    height: int
    width: int
    tasks: tuple[TaskSpec, ...]
    appearance: tuple[ClassAppearance, ...]
    regions_per_sample: int = 4
    seed: int = 0
    # per-sample multiplier on every class std, drawn uniformly from this range
    noise_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "noise_range", tuple(float(v) for v in self.noise_range))
        lo, hi = self.noise_range
        if not 0 <= lo <= hi:
            raise ValueError("noise_range must satisfy 0 <= low <= high")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "appearance", tuple(self.appearance))
        if self.class_count < 1 or self.height < 1 or self.width < 1:
            raise ValueError("class_count, height and width must be positive")
        if len(self.appearance) != self.class_count:
            raise ValueError("need one appearance entry per class")
        for t in self.tasks:
            if len(t.frequencies) != self.class_count:
                raise ValueError("frequency vectors must have one entry per class")
        if self.regions_per_sample < 0:
            raise ValueError("regions_per_sample must be >= 0")

    @property
    def length(self) -> int:
        return sum(t.length for t in self.tasks)

    def with_seed(self, seed: int) -> "StreamSpec":
        return dataclasses.replace(self, seed=seed)


class Sample(NamedTuple):
    image: Image
    truth: SemanticMask
    task: int


def _place_region(rng, h, w, scale) -> np.ndarray:
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry = max(0.5, scale * h * rng.uniform(0.5, 1.5))
    rx = max(0.5, scale * w * rng.uniform(0.5, 1.5))
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    if rng.random() < 0.5:
        return (np.abs(rows - cy) <= ry) & (np.abs(cols - cx) <= rx)
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def draw_sample(rng: np.random.Generator, spec: StreamSpec,
                task: TaskSpec) -> tuple[Image, SemanticMask]:
    h, w, m = spec.height, spec.width, spec.class_count
    freqs = task.frequencies
    labels = np.full((h, w), rng.choice(m, p=freqs))
    for _ in range(spec.regions_per_sample):
        cls = rng.choice(m, p=freqs)
        labels[_place_region(rng, h, w, spec.appearance[cls].scale)] = cls
    means = np.array([a.mean for a in spec.appearance], dtype=float)  # (M, 3)
    means = means + np.asarray(task.shift)
    stds = np.array([a.std for a in spec.appearance], dtype=float)
    stds = stds * rng.uniform(*spec.noise_range)
    noise = rng.standard_normal((3, h, w))
    pixels = means[labels].transpose(2, 0, 1) + stds[labels][None] * noise
    img = Image(np.clip(np.rint(pixels), 0, 255).astype(np.uint8))
    return img, SemanticMask(labels, m)


def generate_stream(spec: StreamSpec) -> list[Sample]:
    """Samples task by task; the class-frequency vector switches at task boundaries."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for t, task in enumerate(spec.tasks):
        for _ in range(task.length):
            img, truth = draw_sample(rng, spec, task)
            out.append(Sample(img, truth, t))
    return out


# -- latency ----------------------------------------------------------------


def image_bytes(shape: tuple[int, int]) -> int:
    return 3 * shape[0] * shape[1]


def label_bytes(shape: tuple[int, int]) -> int:
    return shape[0] * shape[1]


class InfeasibleBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    """Per-sample latency: d1 on the edge path, d0 on the cloud-assisted path.

    Payload sizes are functions of the (H, W) grid.
    """

    edge_compute_s: float
    cloud_compute_s: float
    bandwidth_bytes_per_s: float = FOUR_MBPS
    upload_bytes: Callable[[tuple[int, int]], int] = field(default=image_bytes, compare=False)
    download_bytes: Callable[[tuple[int, int]], int] = field(default=label_bytes, compare=False)

    def __post_init__(self):
        if self.edge_compute_s <= 0 or self.cloud_compute_s < 0 or self.bandwidth_bytes_per_s <= 0:
            raise ValueError("latency components must be positive")

    @classmethod
    def calibrated(cls, d1: float, d0: float, shape: tuple[int, int],
                   bandwidth_bytes_per_s: float = FOUR_MBPS) -> "LatencyModel":
        """Pick the cloud compute time so the cloud path costs exactly ``d0`` at ``shape``."""
        transfer = (image_bytes(shape) + label_bytes(shape)) / bandwidth_bytes_per_s
        t_c = d0 - d1 - transfer
        if t_c < 0:
            raise ValueError("transfer time alone exceeds d0 - d1")
        return cls(d1, t_c, bandwidth_bytes_per_s)

    @property
    def d1(self) -> float:
        return self.edge_compute_s

    def d0(self, shape: tuple[int, int]) -> float:
        bw = self.bandwidth_bytes_per_s
        return (self.edge_compute_s + self.upload_bytes(shape) / bw
                + self.cloud_compute_s + self.download_bytes(shape) / bw)


def sample_latency(decision: Decision, lm: LatencyModel, img: Image) -> float:
    if decision is Decision.EDGE:
        return lm.d1
    return lm.d0(img.shape)


def expected_latency(cur: float, d0: float, d1: float) -> float:
    if not 0.0 <= cur <= 1.0:
        raise ValueError("cur must be in [0, 1]")
    return (1.0 - cur) * d1 + cur * d0


@dataclass(frozen=True)
class LatencyBudget:
    delay_max: float

    def __post_init__(self):
        if not self.delay_max > 0:
            raise ValueError("delay_max must be positive")

    def check(self, d1: float) -> None:
        if self.delay_max < d1:
            raise InfeasibleBudgetError(f"delay_max {self.delay_max} is below the edge latency {d1}")


def min_edge_fraction(d0: float, d1: float, delay_max: "float | LatencyBudget",
                      literal_denominator: bool = False) -> float:
    """Smallest fraction of edge-served samples keeping mean latency within ``delay_max``.

    With ``literal_denominator`` the unclamped ratio
    ``(d0 - delay_max) / (delay_max - d1)`` is returned instead, for comparison.
    """
    if not d0 > d1 > 0:
        raise ValueError("need d0 > d1 > 0")
    if not isinstance(delay_max, LatencyBudget):
        delay_max = LatencyBudget(delay_max)
    delay_max.check(d1)
    delay_max = delay_max.delay_max
    if literal_denominator:
        return (d0 - delay_max) / (delay_max - d1)
    return min(1.0, max(0.0, (d0 - delay_max) / (d0 - d1)))


LATENCY_PRESETS: dict[str, tuple[float, float]] = {
    "cloud-robotics": (1.12, 5.11),
    "cityscapes": (1.09, 5.83),
    "ade20k": (1.05, 4.88),
    "synthia": (1.06, 5.07),
}


def preset_latency(name: str, shape: tuple[int, int],
                   bandwidth_bytes_per_s: float = FOUR_MBPS) -> LatencyModel:
    try:
        d1, d0 = LATENCY_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown latency preset {name!r}; "
                       f"choose from {sorted(LATENCY_PRESETS)}") from None
    return LatencyModel.calibrated(d1, d0, shape, bandwidth_bytes_per_s)
