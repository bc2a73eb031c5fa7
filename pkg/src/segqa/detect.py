"""Attention-map construction from model disagreement, entropy and overlap.

Three per-voxel criteria flag probable label errors in a case:

* inconsistency - the population standard deviation of the member models'
  soft outputs; large spread means the architectures disagree.
* uncertainty - the binary entropy of the consensus (mean) probability of
  each organ channel, normalized to [0, 1]; values near 1 mean the ensemble
  itself is on the fence.
* overlap - voxels claimed by two or more organ channels at once, which is
  anatomically impossible for the target structures.

The attention map is the union of the thresholded criterion masks, with
connected components below a configurable voxel count dropped as speckle.
All thresholds default to round values because no canonical setting exists;
they are surfaced on the command line and echoed into every output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import regions
from .volume import (
    PredictionSet,
    VolumeGrid,
    physical_volume,
    require_aligned,
    stable_mean_std,
)


class InsufficientMembersError(ValueError):
    """Cross-model inconsistency needs at least two member predictions."""


@dataclass(frozen=True)
class DetectionConfig:
    """Thresholds steering attention-map construction.

    std_threshold applies to the member standard deviation (bounded by 0.5),
    entropy_threshold to the normalized binary entropy of the consensus,
    binarize_threshold to probability-to-mask conversion, and components of
    the union smaller than min_component_voxels are discarded.
    """

    std_threshold: float = 0.1
    entropy_threshold: float = 0.5
    binarize_threshold: float = 0.5
    min_component_voxels: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.std_threshold <= 0.5:
            raise ValueError(f"std_threshold must be in (0, 0.5], got {self.std_threshold}")
        if not 0.0 < self.entropy_threshold <= 1.0:
            raise ValueError(
                f"entropy_threshold must be in (0, 1], got {self.entropy_threshold}"
            )
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError(
                f"binarize_threshold must be in (0, 1), got {self.binarize_threshold}"
            )
        if self.min_component_voxels < 0:
            raise ValueError(
                f"min_component_voxels must be >= 0, got {self.min_component_voxels}"
            )

    def as_dict(self) -> dict[str, float | int]:
        return {
            "std_threshold": self.std_threshold,
            "entropy_threshold": self.entropy_threshold,
            "binarize_threshold": self.binarize_threshold,
            "min_component_voxels": self.min_component_voxels,
        }


@dataclass(frozen=True)
class CriterionMasks:
    """The three binary source masks the attention union is built from."""

    inconsistency: VolumeGrid
    uncertainty: VolumeGrid
    overlap: VolumeGrid


@dataclass(frozen=True)
class AttentionMap:
    """Binary attention volume plus per-organ sub-masks and sizes in mm^3.

    per_organ_masks[i] belongs to organ code i + 1. The union mask equals the
    voxelwise OR of the source masks after speckle filtering; per-organ masks
    are not speckle-filtered.
    """

    case_id: str
    union_mask: VolumeGrid
    per_organ_masks: tuple[VolumeGrid, ...]
    source_masks: CriterionMasks
    per_organ_mm3: tuple[float, ...]
    total_mm3: float

    def organ_mask(self, code: int) -> VolumeGrid:
        return self.per_organ_masks[code - 1]


def binary_entropy(p: np.ndarray | float) -> np.ndarray | float:
    """Normalized binary entropy, in bits: H(0.5) = 1, H(0) = H(1) = 0.

    The 0 * log 0 terms are taken as zero, so the function is exact at the
    endpoints and symmetric in p and 1 - p.
    """
    arr = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(arr > 0.0, arr * np.log2(arr), 0.0)
        b = np.where(arr < 1.0, (1.0 - arr) * np.log2(1.0 - arr), 0.0)
    out = -(a + b) + 0.0
    if np.isscalar(p):
        return float(out)
    return out


def _member_channel_values(preds: PredictionSet, organ_index: int) -> list[np.ndarray]:
    return [m.channels[organ_index].values for m in preds.members]


def inconsistency_map(preds: PredictionSet) -> tuple[VolumeGrid, ...]:
    """Per-organ cross-model standard deviation (population form, in [0, 0.5])."""
    if preds.num_members < 2:
        raise InsufficientMembersError(
            f"case {preds.case_id!r}: inconsistency needs >= 2 members, got {preds.num_members}"
        )
    ref = preds.reference_grid
    maps = []
    for c in range(preds.num_organs):
        _, std = stable_mean_std(_member_channel_values(preds, c))
        maps.append(ref.with_values(np.clip(std, 0.0, 0.5).astype(np.float32)))
    return tuple(maps)


def uncertainty_map(soft: Sequence[VolumeGrid]) -> tuple[VolumeGrid, ...]:
    """Per-organ normalized binary entropy of the given probability channels.

    The input may be one model's channels or the ensemble mean; this module
    uses the mean so a single map reflects the consensus.
    """
    if not soft:
        raise ValueError("uncertainty_map: need at least one channel")
    require_aligned(*soft, context="soft channels")
    maps = []
    for ch in soft:
        v = ch.values
        lo, hi = float(v.min()), float(v.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"uncertainty_map: probabilities out of [0, 1] ({lo}..{hi})")
        maps.append(ch.with_values(binary_entropy(v).astype(np.float32)))
    return tuple(maps)


def overlap_map(mean_soft: Sequence[VolumeGrid], binarize_threshold: float = 0.5) -> VolumeGrid:
    """Mask of voxels where two or more organ channels pass the threshold."""
    if not mean_soft:
        raise ValueError("overlap_map: need at least one channel")
    require_aligned(*mean_soft, context="soft channels")
    count = np.zeros(mean_soft[0].dims, dtype=np.int32)
    for ch in mean_soft:
        count += ch.values >= binarize_threshold
    return mean_soft[0].with_values((count >= 2).astype(np.uint8))


def build_attention(preds: PredictionSet, cfg: DetectionConfig | None = None) -> AttentionMap:
    """Union the three criterion masks for one case into an attention map.

    Per organ, a voxel enters the union if the member standard deviation or
    the entropy of the mean passes its threshold; overlap voxels enter
    unconditionally. A per-organ sub-mask additionally claims overlap voxels
    where that organ's mean probability passes the binarize threshold.
    """
    cfg = cfg or DetectionConfig()
    if preds.num_members < 2:
        raise InsufficientMembersError(
            f"case {preds.case_id!r}: attention needs >= 2 members, got {preds.num_members}"
        )
    ref = preds.reference_grid
    dims = ref.dims

    inconsistent_any = np.zeros(dims, dtype=bool)
    uncertain_any = np.zeros(dims, dtype=bool)
    pass_count = np.zeros(dims, dtype=np.int32)
    organ_parts: list[np.ndarray] = []
    organ_passes: list[np.ndarray] = []

    for c in range(preds.num_organs):
        mean, std = stable_mean_std(_member_channel_values(preds, c))
        entropy = binary_entropy(mean)
        inconsistent = std >= cfg.std_threshold
        uncertain = entropy >= cfg.entropy_threshold
        passes = mean >= cfg.binarize_threshold

        inconsistent_any |= inconsistent
        uncertain_any |= uncertain
        pass_count += passes
        organ_parts.append(inconsistent | uncertain)
        organ_passes.append(passes)

    overlap = pass_count >= 2
    union = inconsistent_any | uncertain_any | overlap

    union_grid = ref.with_values(union.astype(np.uint8))
    if cfg.min_component_voxels > 1:
        union_grid = regions.remove_small_components(union_grid, cfg.min_component_voxels)

    per_organ = tuple(
        ref.with_values((organ_parts[c] | (overlap & organ_passes[c])).astype(np.uint8))
        for c in range(preds.num_organs)
    )
    sizes = tuple(physical_volume(m) for m in per_organ)
    return AttentionMap(
        case_id=preds.case_id,
        union_mask=union_grid,
        per_organ_masks=per_organ,
        source_masks=CriterionMasks(
            inconsistency=ref.with_values(inconsistent_any.astype(np.uint8)),
            uncertainty=ref.with_values(uncertain_any.astype(np.uint8)),
            overlap=ref.with_values(overlap.astype(np.uint8)),
        ),
        per_organ_mm3=sizes,
        total_mm3=physical_volume(union_grid),
    )
