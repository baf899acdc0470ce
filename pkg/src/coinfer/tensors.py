"""Value types shared by every stage of the pipeline, plus the text tensor format.

Text format: a header line ``<TAG> <dim> <dim> ...`` followed by whitespace
separated values in storage order. Several blocks may be concatenated.
"""
from __future__ import annotations

import hashlib
from typing import Iterator, Sequence

import numpy as np

PROB_TOL = 1e-6


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


class Image:
    """An RGB image stored channel-major as a (3, H, W) uint8 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"image must have shape (3, H, W), got {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError("image must be at least 1x1")
        if np.any(arr < 0) or np.any(arr > 255):
            raise ValueError("image intensities must lie in [0, 255]")
        if arr.dtype != np.uint8:
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("image intensities must be integral")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(arr))

    def __setattr__(self, name, value):
        raise AttributeError("Image is immutable")

    def __reduce__(self):
        return Image, (self.data,)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def key(self) -> bytes:
        """Content digest; equal images share a key."""
        h = hashlib.sha1(np.asarray(self.data.shape, dtype=np.int64).tobytes())
        h.update(self.data.tobytes())
        return h.digest()

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"Image(H={self.height}, W={self.width})"


class SemanticMask:
    """Per-pixel class labels in ``{0, ..., M-1}``."""

    __slots__ = ("labels", "class_count")

    def __init__(self, labels, class_count: int):
        arr = np.asarray(labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"labels must be a non-empty 2-D grid, got shape {arr.shape}")
        if class_count < 1:
            raise ValueError("class_count must be positive")
        if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("labels must be integers")
        arr = arr.astype(np.int64)
        if arr.min() < 0 or arr.max() >= class_count:
            raise ValueError(f"labels must lie in [0, {class_count - 1}]")
        object.__setattr__(self, "labels", _frozen(arr))
        object.__setattr__(self, "class_count", int(class_count))

    def __setattr__(self, name, value):
        raise AttributeError("SemanticMask is immutable")

    def __reduce__(self):
        return SemanticMask, (self.labels, self.class_count)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, SemanticMask):
            return NotImplemented
        return self.class_count == other.class_count and np.array_equal(self.labels, other.labels)

    __hash__ = None

    def __repr__(self):
        h, w = self.shape
        return f"SemanticMask(M={self.class_count}, H={h}, W={w})"


class ProbMap:
    """Per-pixel class probabilities, shape (M, H, W).

    Pixels whose probabilities sum to 1 within ``PROB_TOL`` are renormalized;
    anything further off is rejected.
    """

    __slots__ = ("probs",)

    def __init__(self, probs):
        arr = np.asarray(probs, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"probs must have shape (M, H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("probs must be finite")
        if arr.min() < -PROB_TOL or arr.max() > 1 + PROB_TOL:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = arr.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > PROB_TOL:
            raise ValueError("per-pixel probabilities must sum to 1")
        arr = np.clip(arr, 0.0, 1.0)
        # already-normalized input is stored bit-exact so text round-trips are lossless
        if np.max(np.abs(arr.sum(axis=0) - 1.0)) > 1e-12:
            arr = arr / arr.sum(axis=0, keepdims=True)
        object.__setattr__(self, "probs", _frozen(arr))

    def __setattr__(self, name, value):
        raise AttributeError("ProbMap is immutable")

    def __reduce__(self):
        return ProbMap, (self.probs,)

    @property
    def class_count(self) -> int:
        return self.probs.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[1], self.probs.shape[2]

    def __eq__(self, other):
        if not isinstance(other, ProbMap):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    __hash__ = None

    def __repr__(self):
        m, h, w = self.probs.shape
        return f"ProbMap(M={m}, H={h}, W={w})"


class RegionMaskSet:
    """Ordered, unlabeled binary region masks over an H x W grid."""

    __slots__ = ("masks", "_shape")

    def __init__(self, masks: Sequence, shape: tuple[int, int] | None = None):
        arrs = [np.asarray(m).astype(bool) for m in masks]
        if shape is None:
            if not arrs:
                raise ValueError("shape is required for an empty mask set")
            shape = arrs[0].shape
        shape = (int(shape[0]), int(shape[1]))
        if shape[0] < 1 or shape[1] < 1:
            raise ValueError("grid must be at least 1x1")
        for i, m in enumerate(arrs):
            if m.shape != shape:
                raise ValueError(f"mask {i} has shape {m.shape}, expected {shape}")
            if not m.any():
                raise ValueError(f"mask {i} is empty")
        stacked = np.stack(arrs) if arrs else np.zeros((0,) + shape, dtype=bool)
        object.__setattr__(self, "masks", _frozen(stacked))
        object.__setattr__(self, "_shape", shape)

    def __setattr__(self, name, value):
        raise AttributeError("RegionMaskSet is immutable")

    def __reduce__(self):
        return RegionMaskSet, (list(self.masks), self._shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self._shape

    def __len__(self):
        return self.masks.shape[0]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.masks)

    def __getitem__(self, i) -> np.ndarray:
        return self.masks[i]

    def __eq__(self, other):
        if not isinstance(other, RegionMaskSet):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.masks, other.masks)

    __hash__ = None

    def __repr__(self):
        return f"RegionMaskSet(count={len(self)}, H={self.shape[0]}, W={self.shape[1]})"


# -- per-pixel statistics ---------------------------------------------------


def argmax_labels(p: ProbMap) -> SemanticMask:
    # np.argmax returns the first maximal index, i.e. lowest class on ties
    return SemanticMask(np.argmax(p.probs, axis=0), p.class_count)


def top1_map(p: ProbMap) -> np.ndarray:
    return p.probs.max(axis=0)


def top2_margin_map(p: ProbMap) -> np.ndarray:
    if p.class_count < 2:
        raise ValueError("top-2 margin needs at least 2 classes")
    part = np.partition(p.probs, -2, axis=0)
    return np.clip(part[-1] - part[-2], 0.0, 1.0)


# -- text format ------------------------------------------------------------


def format_block(tag: str, dims: Sequence[int], values, floats: bool = False) -> str:
    head = " ".join([tag, *(str(int(d)) for d in dims)])
    flat = np.asarray(values).ravel().tolist()
    if floats:
        body = " ".join(repr(float(v)) for v in flat)
    else:
        body = " ".join(str(int(v)) for v in flat)
    return f"{head}\n{body}\n" if body else f"{head}\n"


_DIM_COUNTS = {"PM": 3, "SM": 3, "RM": 3, "IM": 2, "EW": 1, "GW": 1}


def _value_count(tag: str, dims: list[int]) -> int:
    if tag == "PM":
        return dims[0] * dims[1] * dims[2]
    if tag == "SM":
        return dims[1] * dims[2]
    if tag == "RM":
        return dims[0] * dims[1] * dims[2]
    if tag == "IM":
        return 3 * dims[0] * dims[1]
    if tag == "EW":
        return dims[0] * 6
    if tag == "GW":
        return 8 * dims[0] + 1
    raise ValueError(f"unknown tensor tag {tag!r}")


def read_blocks(text: str) -> list[tuple[str, list[int], list[str]]]:
    """Split text into ``(tag, dims, raw value tokens)`` blocks."""
    tokens = text.split()
    blocks = []
    i = 0
    while i < len(tokens):
        tag = tokens[i]
        if tag not in _DIM_COUNTS:
            raise ValueError(f"unknown tensor tag {tag!r}")
        nd = _DIM_COUNTS[tag]
        if i + 1 + nd > len(tokens):
            raise ValueError(f"truncated {tag} header")
        try:
            dims = [int(t) for t in tokens[i + 1:i + 1 + nd]]
        except ValueError as exc:
            raise ValueError(f"bad {tag} header") from exc
        if any(d < 0 for d in dims):
            raise ValueError(f"negative dimension in {tag} header")
        n = _value_count(tag, dims)
        start = i + 1 + nd
        if start + n > len(tokens):
            raise ValueError(f"{tag} block declares {n} values, found {len(tokens) - start}")
        blocks.append((tag, dims, tokens[start:start + n]))
        i = start + n
    return blocks


def _ints(tokens: list[str]) -> np.ndarray:
    try:
        return np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError as exc:
        raise ValueError("expected integer values") from exc


def _floats(tokens: list[str]) -> np.ndarray:
    try:
        return np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise ValueError("expected float values") from exc


def dumps(obj) -> str:
    if isinstance(obj, ProbMap):
        return format_block("PM", obj.probs.shape, obj.probs, floats=True)
    if isinstance(obj, SemanticMask):
        return format_block("SM", (obj.class_count, *obj.shape), obj.labels)
    if isinstance(obj, RegionMaskSet):
        return format_block("RM", (len(obj), *obj.shape), obj.masks.astype(np.int64))
    if isinstance(obj, Image):
        return format_block("IM", obj.shape, obj.data)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def decode_block(tag: str, dims: list[int], tokens: list[str]):
    if tag == "PM":
        return ProbMap(_floats(tokens).reshape(dims))
    if tag == "SM":
        m, h, w = dims
        return SemanticMask(_ints(tokens).reshape(h, w), m)
    if tag == "RM":
        n, h, w = dims
        vals = _ints(tokens)
        if np.any((vals != 0) & (vals != 1)):
            raise ValueError("mask values must be 0 or 1")
        return RegionMaskSet(list(vals.reshape(n, h, w)), shape=(h, w))
    if tag == "IM":
        h, w = dims
        return Image(_ints(tokens).reshape(3, h, w))
    raise ValueError(f"{tag} blocks are decoded by their owning module")


def loads(text: str):
    """Parse exactly one tensor-core block."""
    blocks = read_blocks(text)
    if len(blocks) != 1:
        raise ValueError(f"expected one block, found {len(blocks)}")
    return decode_block(*blocks[0])
