"""Hard-input mining: confidence scorers and the edge/cloud threshold decision."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .tensors import ProbMap, format_block, read_blocks, top1_map, top2_margin_map

FEATURE_DIM = 6
_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


class Decision(enum.Enum):
    EDGE = "EDGE"
    CLOUD = "CLOUD"


class Scorer(enum.Enum):
    LEARNED = "learned"
    MESS = "mess"
    SM = "sm"
    SPP = "spp"


@dataclass(frozen=True)
class GateFeatures:
    mean_top1: float
    mean_margin: float
    mean_entropy: float
    frac_top1_50: float
    frac_top1_70: float
    frac_top1_90: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mean_top1, self.mean_margin, self.mean_entropy,
                         self.frac_top1_50, self.frac_top1_70, self.frac_top1_90])


def extract_features(pred: ProbMap) -> GateFeatures:
    m = pred.class_count
    if m < 2:
        raise ValueError("gate features need at least 2 classes")
    top1 = top1_map(pred)
    margin = top2_margin_map(pred)
    p = pred.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    entropy = np.clip(-plogp.sum(axis=0) / math.log(m), 0.0, 1.0)
    return GateFeatures(
        float(top1.mean()),
        float(margin.mean()),
        float(entropy.mean()),
        float(np.mean(top1 >= 0.5)),
        float(np.mean(top1 >= 0.7)),
        float(np.mean(top1 >= 0.9)),
    )


def sigmoid(z):
    # split by sign to avoid overflow in exp
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep the output strictly inside (0, 1) even when exp saturates
    return np.clip(out, _TINY, _ONE_MINUS)


@dataclass(frozen=True, eq=False)
class Gate:
    """One-hidden-layer scorer: 6 -> hidden (tanh) -> 1 (sigmoid)."""

    w1: np.ndarray  # (hidden, 6)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float

    def __post_init__(self):
        w1 = np.array(self.w1, dtype=np.float64)
        hidden = w1.shape[0]
        if w1.shape != (hidden, FEATURE_DIM) or hidden < 1:
            raise ValueError(f"w1 must be (hidden, {FEATURE_DIM}), got {w1.shape}")
        b1 = np.array(self.b1, dtype=np.float64).reshape(hidden)
        w2 = np.array(self.w2, dtype=np.float64).reshape(hidden)
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "b2", float(self.b2))

    @classmethod
    def initialize(cls, hidden_dim: int = 16, seed: int = 0) -> "Gate":
        rng = np.random.default_rng(seed)
        w = rng.uniform(-0.1, 0.1, size=8 * hidden_dim + 1)
        return cls.from_vector(w, hidden_dim)

    @classmethod
    def zeros(cls, hidden_dim: int = 16) -> "Gate":
        return cls.from_vector(np.zeros(8 * hidden_dim + 1), hidden_dim)

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    def to_vector(self) -> np.ndarray:
        """Weights in layer order: w1 (row-major), b1, w2, b2."""
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def from_vector(cls, vec, hidden_dim: int) -> "Gate":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (8 * hidden_dim + 1,):
            raise ValueError(f"expected {8 * hidden_dim + 1} gate weights, got {vec.size}")
        k = FEATURE_DIM * hidden_dim
        return cls(vec[:k].reshape(hidden_dim, FEATURE_DIM), vec[k:k + hidden_dim],
                   vec[k + hidden_dim:k + 2 * hidden_dim], vec[-1])

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass over rows of ``x``; returns confidences."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        hidden = np.tanh(x @ self.w1.T + self.b1)
        return sigmoid(hidden @ self.w2 + self.b2)

    def __eq__(self, other):
        if not isinstance(other, Gate):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector()) and self.hidden_dim == other.hidden_dim

    __hash__ = None


def gate_score(g: Gate, feats: GateFeatures) -> float:
    return float(g.forward(feats.as_array())[0])


def dumps_gate(g: Gate) -> str:
    return format_block("GW", (g.hidden_dim,), g.to_vector(), floats=True)


def loads_gate(text: str) -> Gate:
    blocks = read_blocks(text)
    if len(blocks) != 1 or blocks[0][0] != "GW":
        raise ValueError("expected a single GW block")
    return gate_from_block(blocks[0][1], blocks[0][2])


def gate_from_block(dims, tokens) -> Gate:
    (hidden,) = dims
    if hidden < 1:
        raise ValueError("hidden_dim must be positive")
    return Gate.from_vector([float(t) for t in tokens], hidden)


# -- heuristic scorers ------------------------------------------------------


def score_mess(pred: ProbMap, thre_pix: float = 0.5) -> float:
    return float(np.mean(top1_map(pred) >= thre_pix))


def score_sm(pred: ProbMap) -> float:
    return float(top2_margin_map(pred).mean())


def score_spp(pred: ProbMap) -> float:
    return float(top1_map(pred).mean())


@dataclass(frozen=True)
class GatePolicy:
    scorer: Scorer = Scorer.LEARNED
    threshold: float = 0.75
    mess_pixel_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scorer", Scorer(self.scorer))
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if not 0.0 <= self.mess_pixel_threshold <= 1.0:
            raise ValueError("mess_pixel_threshold must be in [0, 1]")


def confidence(pred: ProbMap, policy: GatePolicy, gate: Gate | None = None) -> float:
    if policy.scorer is Scorer.LEARNED:
        if gate is None:
            raise ValueError("the learned scorer needs a gate")
        return gate_score(gate, extract_features(pred))
    if policy.scorer is Scorer.MESS:
        return score_mess(pred, policy.mess_pixel_threshold)
    if policy.scorer is Scorer.SM:
        return score_sm(pred)
    return score_spp(pred)


def decide(conf: float, policy: GatePolicy) -> Decision:
    return Decision.EDGE if conf > policy.threshold else Decision.CLOUD
