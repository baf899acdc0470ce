"""Relabel unlabeled cloud region masks with the edge model's class vote."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensors import ProbMap, RegionMaskSet, SemanticMask, argmax_labels


@dataclass(frozen=True)
class RegionVote:
    scores: np.ndarray
    chosen: int


@dataclass(frozen=True)
class FusionResult:
    semantic: SemanticMask
    per_region_votes: tuple[RegionVote, ...]


def assisted_inference(pred: ProbMap, masks: RegionMaskSet) -> FusionResult:
    """Fuse an edge probability map with region masks.

    Starts from the per-pixel argmax of ``pred``. Each mask, in list order,
    sums the class probabilities over its pixels and stamps the winning class
    onto all of them, so later masks overwrite earlier ones where they overlap.
    """
    if pred.shape != masks.shape:
        raise ValueError(f"prediction is {pred.shape} but masks are {masks.shape}")
    labels = np.array(argmax_labels(pred).labels)
    votes = []
    for region in masks:
        scores = pred.probs[:, region].sum(axis=1)
        top = int(np.argmax(scores))
        labels[region] = top
        votes.append(RegionVote(scores, top))
    return FusionResult(SemanticMask(labels, pred.class_count), tuple(votes))
