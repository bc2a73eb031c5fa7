"""Unbiased final labels by averaging the member models' soft predictions.

Averaging (rather than majority voting on hard labels) keeps the result from
leaning toward any single architecture and preserves soft information for
downstream entropy. Members are unweighted.
"""

from __future__ import annotations

import numpy as np

from .volume import (
    LabelVolume,
    OrganLabelMap,
    PredictionSet,
    VolumeGrid,
    labels_from_soft,
    stable_mean,
)


def mean_soft(preds: PredictionSet) -> tuple[VolumeGrid, ...]:
    """Per-organ arithmetic mean of the K members' probability channels."""
    ref = preds.reference_grid
    out = []
    for c in range(preds.num_organs):
        mean = stable_mean([m.channels[c].values for m in preds.members])
        out.append(ref.with_values(mean.astype(np.float32)))
    return tuple(out)


def ensemble_label(
    preds: PredictionSet,
    binarize_threshold: float = 0.5,
    labels: OrganLabelMap | None = None,
) -> LabelVolume:
    """Discrete consensus labels: threshold-gated argmax of the mean channels."""
    return labels_from_soft(mean_soft(preds), binarize_threshold, labels)
