"""Prediction containers shared by the model and the training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import Tensor


@dataclass
class LayerPrediction:
    """One prediction set: boxes [k,4] normalized (cx,cy,w,h), class logits [k,C],
    optional mask logits [k,Hm,Wm]."""

    boxes: Tensor
    logits: Tensor
    masks: Tensor | None = None

    @property
    def num_queries(self) -> int:
        return self.boxes.shape[0]


@dataclass
class DetectionOutput:
    """Per-decoder-layer predictions plus the encoder proposal set that seeded them."""

    layers: list[LayerPrediction]
    proposals: LayerPrediction | None = None
    windows: list[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> LayerPrediction:
        return self.layers[-1]


@dataclass
class PanopticOutput:
    masks: Tensor
    segments: np.ndarray
    segment_classes: dict[int, int]
