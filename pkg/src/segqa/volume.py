"""Voxel-grid data model and the elementwise primitives shared by every module.

All per-voxel quantities (CT intensities, soft probabilities, discrete labels,
binary masks) ride on :class:`VolumeGrid`. Grids are treated as immutable and
operations are pure, so many cases can be processed concurrently without
locking. There is deliberately no resampling: all inputs for one case must
already live on the same voxel lattice, and mismatches are hard errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.uint8), np.dtype(np.int16), np.dtype(np.float32))

# Nine target structures, codes 1..9 in the fixed reporting order.
DEFAULT_ORGANS = (
    (1, "Spl"),
    (2, "RKid"),
    (3, "LKid"),
    (4, "Gall"),
    (5, "Liv"),
    (6, "Sto"),
    (7, "Aor"),
    (8, "IVC"),
    (9, "Pan"),
)


class AlignmentError(ValueError):
    """Two volumes that must share a voxel lattice do not."""


def _read_only(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False, repr=False)
class VolumeGrid:
    """A dense 3D scalar field with voxel spacing and an index-to-mm affine.

    ``values`` is indexed ``[x, y, z]``; the flattened x-fastest order matches
    the on-disk order of the volume file format, so I/O never permutes data.
    Spacing is quantized to float32 (the precision the file format stores).
    Element kind is one of uint8, int16, float32.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"expected a 3D value array, got shape {v.shape}")
        if v.dtype not in SUPPORTED_DTYPES:
            raise TypeError(
                f"unsupported element kind {v.dtype}; expected uint8, int16 or float32"
            )
        object.__setattr__(self, "values", _read_only(v))

        sp = tuple(float(np.float32(s)) for s in self.spacing)
        if len(sp) != 3 or any(not np.isfinite(s) or s <= 0.0 for s in sp):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing!r}")
        object.__setattr__(self, "spacing", sp)

        if self.affine is None:
            aff = np.diag((*sp, 1.0))
        else:
            aff = np.asarray(self.affine, dtype=np.float64)
            if aff.shape != (4, 4):
                raise ValueError(f"affine must be 4x4, got shape {aff.shape}")
        object.__setattr__(self, "affine", _read_only(aff))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_values(self, values: np.ndarray) -> "VolumeGrid":
        """New grid with the same geometry but different values."""
        return VolumeGrid(values, self.spacing, self.affine)

    def __repr__(self) -> str:
        return f"VolumeGrid(dims={self.dims}, spacing={self.spacing}, kind={self.values.dtype})"


def grids_aligned(a: VolumeGrid, b: VolumeGrid) -> bool:
    return (
        a.dims == b.dims
        and a.spacing == b.spacing
        and np.allclose(a.affine, b.affine, atol=1e-5)
    )


def require_aligned(*grids: VolumeGrid, context: str = "volumes") -> None:
    """Raise AlignmentError unless all grids share dims, spacing and orientation."""
    first = grids[0]
    for g in grids[1:]:
        if not grids_aligned(first, g):
            raise AlignmentError(
                f"{context} are not grid-aligned: "
                f"{first.dims}/{first.spacing} vs {g.dims}/{g.spacing}"
            )


@dataclass(frozen=True)
class OrganLabelMap:
    """Ordered (code, name) pairs for the target structures; background is 0."""

    entries: tuple[tuple[int, str], ...]

    def __post_init__(self) -> None:
        codes = [code for code, _ in self.entries]
        if codes != list(range(1, len(codes) + 1)):
            raise ValueError(f"organ codes must be contiguous from 1, got {codes}")
        names = [name for _, name in self.entries]
        if len(set(names)) != len(names) or any(not n for n in names):
            raise ValueError("organ names must be unique and non-empty")

    @classmethod
    def default(cls) -> "OrganLabelMap":
        return cls(DEFAULT_ORGANS)

    @classmethod
    def generic(cls, n: int) -> "OrganLabelMap":
        """Placeholder names organ1..organN for corpora without the standard set."""
        if n < 1:
            raise ValueError("need at least one organ")
        return cls(tuple((i, f"organ{i}") for i in range(1, n + 1)))

    @classmethod
    def for_channel_count(cls, n: int) -> "OrganLabelMap":
        return cls.default() if n == len(DEFAULT_ORGANS) else cls.generic(n)

    @property
    def codes(self) -> tuple[int, ...]:
        return tuple(code for code, _ in self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.entries)

    def name_of(self, code: int) -> str:
        return self.entries[code - 1][1]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Discrete per-voxel organ codes on a grid; 0 is background."""

    grid: VolumeGrid
    labels: OrganLabelMap

    def __post_init__(self) -> None:
        v = self.grid.values
        if v.dtype not in (np.dtype(np.uint8), np.dtype(np.int16)):
            raise TypeError(f"label volumes must be integer-kind, got {v.dtype}")
        if v.size and (int(v.min()) < 0 or int(v.max()) > len(self.labels)):
            raise ValueError(
                f"label values must lie in 0..{len(self.labels)}, "
                f"found range {int(v.min())}..{int(v.max())}"
            )

    def organ_mask(self, code: int) -> VolumeGrid:
        return self.grid.with_values((self.grid.values == code).astype(np.uint8))


@dataclass(frozen=True, eq=False)
class SoftPrediction:
    """One model's per-organ probability channels for a single case."""

    model_id: str
    channels: tuple[VolumeGrid, ...]

    def __post_init__(self) -> None:
        if not self.channels:
            raise ValueError("a soft prediction needs at least one organ channel")
        object.__setattr__(self, "channels", tuple(self.channels))
        for ch in self.channels:
            if ch.values.dtype != np.dtype(np.float32):
                raise TypeError(f"soft channels must be float32, got {ch.values.dtype}")
            lo, hi = float(ch.values.min()), float(ch.values.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"probabilities out of [0, 1]: range {lo}..{hi}")
        require_aligned(*self.channels, context=f"channels of model {self.model_id!r}")

    @property
    def num_organs(self) -> int:
        return len(self.channels)


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """K grid-aligned soft predictions (one per model) for a single case."""

    case_id: str
    members: tuple[SoftPrediction, ...]

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError(f"case {self.case_id!r}: need at least one member prediction")
        object.__setattr__(self, "members", tuple(self.members))
        counts = {m.num_organs for m in self.members}
        if len(counts) != 1:
            raise AlignmentError(
                f"case {self.case_id!r}: members disagree on channel count {sorted(counts)}"
            )
        require_aligned(
            *(m.channels[0] for m in self.members),
            context=f"members of case {self.case_id!r}",
        )

    @property
    def num_members(self) -> int:
        return len(self.members)

    @property
    def num_organs(self) -> int:
        return self.members[0].num_organs

    @property
    def reference_grid(self) -> VolumeGrid:
        return self.members[0].channels[0]


def _require_binary(mask: VolumeGrid, op: str) -> np.ndarray:
    v = mask.values
    if v.dtype == np.dtype(np.float32):
        raise ValueError(f"{op}: mask must be integer-kind binary, got float32")
    if v.size and (int(v.min()) < 0 or int(v.max()) > 1):
        raise ValueError(f"{op}: mask is not binary (values {int(v.min())}..{int(v.max())})")
    return v


def _check_threshold(threshold: float) -> float:
    t = float(threshold)
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return t


def binarize(channel: VolumeGrid, threshold: float = 0.5) -> VolumeGrid:
    """Binary mask of voxels with value >= threshold."""
    t = _check_threshold(threshold)
    return channel.with_values((channel.values >= t).astype(np.uint8))


def labels_from_soft(
    channels: Sequence[VolumeGrid],
    threshold: float = 0.5,
    labels: OrganLabelMap | None = None,
) -> LabelVolume:
    """Discrete labels from per-organ probabilities.

    Per voxel the label is the argmax channel's code if that maximum reaches
    the threshold, else background. Ties break toward the lowest code so the
    result is deterministic and independent of evaluation order.
    """
    if not channels:
        raise ValueError("labels_from_soft: need at least one channel")
    if len(channels) > 255:
        raise ValueError("labels_from_soft: at most 255 organ channels supported")
    t = _check_threshold(threshold)
    require_aligned(*channels, context="soft channels")
    stack = np.stack([ch.values for ch in channels], axis=0)
    best = np.argmax(stack, axis=0)  # first maximum, i.e. lowest code
    peak = np.max(stack, axis=0)
    codes = np.where(peak >= t, best.astype(np.uint8) + 1, np.uint8(0)).astype(np.uint8)
    if labels is None:
        labels = OrganLabelMap.for_channel_count(len(channels))
    return LabelVolume(channels[0].with_values(codes), labels)


def physical_volume(mask: VolumeGrid) -> float:
    """Physical volume in mm^3 of the set voxels of a binary mask."""
    v = _require_binary(mask, "physical_volume")
    return float(np.count_nonzero(v)) * mask.voxel_volume_mm3


def soft_from_labels(label: LabelVolume) -> tuple[VolumeGrid, ...]:
    """Hard 0/1 probability channels from a label volume (one per organ code)."""
    return tuple(
        label.grid.with_values((label.grid.values == code).astype(np.float32))
        for code in label.labels.codes
    )


def _sorted_stack_f64(arrays: Sequence[np.ndarray]) -> np.ndarray:
    stack = np.stack([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
    stack.sort(axis=0)
    return stack


def stable_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean, accumulated in value-sorted order.

    Sorting before summation makes the float result independent of the order
    in which the member arrays are supplied, which keeps reductions bit-exact
    under permutation of the members.
    """
    s = _sorted_stack_f64(arrays)
    acc = s[0].copy()
    for k in range(1, s.shape[0]):
        acc += s[k]
    return acc / s.shape[0]


def stable_mean_std(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise mean and population standard deviation, order-stable.

    Uses the 1/K normalization, so for probabilities the result is bounded
    by 0.5 and thresholds on it are interpretable on a fixed scale.
    """
    s = _sorted_stack_f64(arrays)
    k = s.shape[0]
    acc = s[0].copy()
    for i in range(1, k):
        acc += s[i]
    mean = acc / k
    dev = s[0] - mean
    var = dev * dev
    for i in range(1, k):
        dev = s[i] - mean
        var += dev * dev
    var /= k
    return mean, np.sqrt(var)
