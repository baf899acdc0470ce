"""Edge and cloud model implementations.

``TrainableEdgeModel`` is a per-pixel softmax classifier. The oracle models
derive their output from ground truth with controllable corruption, standing
in for a real segmentation network and a class-agnostic mask generator.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage

from .tensors import Image, ProbMap, RegionMaskSet, SemanticMask, format_block, read_blocks

PIXEL_FEATURES = 5
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class EdgeModel(Protocol):
    def infer(self, img: Image) -> ProbMap: ...


class CloudMaskModel(Protocol):
    def infer(self, img: Image) -> RegionMaskSet: ...


class TruthTable:
    """Ground-truth provider keyed by image content, used by the oracles."""

    def __init__(self):
        self._table: dict[bytes, SemanticMask] = {}

    def register(self, img: Image, truth: SemanticMask) -> None:
        if truth.shape != img.shape:
            raise ValueError("truth does not match image dimensions")
        self._table[img.key()] = truth

    def __call__(self, img: Image) -> SemanticMask:
        try:
            return self._table[img.key()]
        except KeyError:
            raise LookupError("no ground truth registered for this image") from None

    def __len__(self):
        return len(self._table)


def _sample_rng(seed: int, img: Image, truth: SemanticMask) -> np.random.Generator:
    # pure function of (inputs, seed): mix in content checksums
    return np.random.default_rng([seed, zlib.crc32(img.data.tobytes()),
                                  zlib.crc32(truth.labels.tobytes())])


# -- trainable edge model ---------------------------------------------------


def pixel_features(img: Image) -> np.ndarray:
    """(H*W, 5) features: RGB scaled to [0, 1], normalized row, normalized column."""
    h, w = img.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rn = rows / (h - 1) if h > 1 else np.zeros_like(rows, dtype=float)
    cn = cols / (w - 1) if w > 1 else np.zeros_like(cols, dtype=float)
    rgb = img.data.reshape(3, -1).T / 255.0
    return np.column_stack([rgb, rn.ravel(), cn.ravel()])


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True, eq=False)
class TrainableEdgeModel:
    weights: np.ndarray  # (M, 5)
    bias: np.ndarray  # (M,)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != PIXEL_FEATURES or w.shape[0] < 1:
            raise ValueError(f"weights must be (M, {PIXEL_FEATURES}), got {w.shape}")
        b = np.array(self.bias, dtype=np.float64).reshape(w.shape[0])
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def zeros(cls, class_count: int) -> "TrainableEdgeModel":
        return cls(np.zeros((class_count, PIXEL_FEATURES)), np.zeros(class_count))

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def parameter_count(self) -> int:
        return self.weights.size + self.bias.size

    def params(self) -> np.ndarray:
        """Per-class rows of (5 weights, bias), flattened."""
        return np.column_stack([self.weights, self.bias]).ravel()

    @classmethod
    def from_params(cls, vec, class_count: int) -> "TrainableEdgeModel":
        mat = np.asarray(vec, dtype=np.float64).reshape(class_count, PIXEL_FEATURES + 1)
        return cls(mat[:, :PIXEL_FEATURES], mat[:, PIXEL_FEATURES])

    def logits(self, img: Image) -> np.ndarray:
        return pixel_features(img) @ self.weights.T + self.bias

    def infer(self, img: Image) -> ProbMap:
        h, w = img.shape
        probs = softmax(self.logits(img), axis=1)
        return ProbMap(probs.T.reshape(self.class_count, h, w))

    def __eq__(self, other):
        if not isinstance(other, TrainableEdgeModel):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)

    __hash__ = None


def trainable_infer(m: TrainableEdgeModel, img: Image) -> ProbMap:
    return m.infer(img)


def dumps_edge(m: TrainableEdgeModel) -> str:
    return format_block("EW", (m.class_count,), m.params(), floats=True)


def edge_from_block(dims, tokens) -> TrainableEdgeModel:
    (m,) = dims
    if m < 1:
        raise ValueError("class count must be positive")
    return TrainableEdgeModel.from_params([float(t) for t in tokens], m)


def loads_edge(text: str) -> TrainableEdgeModel:
    blocks = read_blocks(text)
    if len(blocks) != 1 or blocks[0][0] != "EW":
        raise ValueError("expected a single EW block")
    return edge_from_block(blocks[0][1], blocks[0][2])


# -- oracles ----------------------------------------------------------------


def oracle_edge_infer(img: Image, truth: SemanticMask, rho: float, tau: float,
                      seed: int = 0) -> ProbMap:
    """Noisy edge prediction derived from ``truth``.

    Each pixel peaks at its true class with probability ``rho``, otherwise at
    a uniformly drawn wrong class. The peak logit is 1, the rest uniform in
    [0, 0.5); dividing by ``tau`` sets how sharp the peak is.
    """
    if truth.shape != img.shape:
        raise ValueError("truth does not match image dimensions")
    m = truth.class_count
    h, w = truth.shape
    rng = _sample_rng(seed, img, truth)
    correct = rng.random((h, w)) < rho
    if m > 1:
        offset = rng.integers(1, m, size=(h, w))
        peak = np.where(correct, truth.labels, (truth.labels + offset) % m)
    else:
        peak = truth.labels
    logits = rng.uniform(0.0, 0.5, size=(m, h, w))
    np.put_along_axis(logits, peak[None], 1.0, axis=0)
    return ProbMap(softmax(logits / tau, axis=0))


@dataclass(frozen=True)
class OracleEdgeModel:
    truth: Callable[[Image], SemanticMask]
    rho: float = 0.9
    tau: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def infer(self, img: Image) -> ProbMap:
        return oracle_edge_infer(img, self.truth(img), self.rho, self.tau, self.seed)


def label_components(labels: np.ndarray) -> list[np.ndarray]:
    """4-connected same-label components, largest first, ties by first pixel in scan order."""
    comps = []
    for cls in np.unique(labels):
        lab, n = ndimage.label(labels == cls, structure=_FOUR_CONNECTED)
        for k in range(1, n + 1):
            comps.append(lab == k)
    return sort_regions(comps)


def sort_regions(masks: list[np.ndarray]) -> list[np.ndarray]:
    def key(m):
        return (-int(m.sum()), int(np.flatnonzero(m.ravel())[0]))
    return sorted(masks, key=key)


def _perturb(mask: np.ndarray, pi: float, rng: np.random.Generator) -> np.ndarray:
    """Erode inner-boundary and dilate outer-boundary pixels, each with prob. pi/2."""
    inner = mask & ~ndimage.binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=1)
    outer = ndimage.binary_dilation(mask, structure=_FOUR_CONNECTED) & ~mask
    drop = inner & (rng.random(mask.shape) < pi / 2)
    grow = outer & (rng.random(mask.shape) < pi / 2)
    return (mask & ~drop) | grow


def oracle_cloud_infer(img: Image, truth: SemanticMask, pi: float = 0.0,
                       seed: int = 0) -> RegionMaskSet:
    if truth.shape != img.shape:
        raise ValueError("truth does not match image dimensions")
    comps = label_components(truth.labels)
    if pi > 0:
        rng = _sample_rng(seed, img, truth)
        comps = sort_regions([m for m in (_perturb(c, pi, rng) for c in comps) if m.any()])
    return RegionMaskSet(comps, shape=truth.shape)


@dataclass(frozen=True)
class OracleCloudModel:
    truth: Callable[[Image], SemanticMask]
    pi: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must be in [0, 1]")

    def infer(self, img: Image) -> RegionMaskSet:
        return oracle_cloud_infer(img, self.truth(img), self.pi, self.seed)
