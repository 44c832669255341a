"""Numeric kernels over C x H x W activation tensors.

The detector never touches model weights: everything it needs is computed
from raw feature maps with four small operations — per-channel variance,
variance aggregation across a calibration set, top-N channel selection, and
two pooling steps (channel selection followed by non-overlapping max
pooling) whose composition produces the embedding vector.

All reductions accumulate in float64 even though tensor payloads are
float32, so results do not drift with the size of the calibration set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "FeatureTensor",
    "ChannelMask",
    "channel_variance",
    "aggregate_channel_information",
    "select_top_channels",
    "indexed_pool",
    "max_pool",
    "embed",
    "embedding_dim",
]


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """One activation block: float32 array of shape (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise InvalidInputError(
                f"feature tensor must be 3-dimensional (C, H, W), got shape {arr.shape}"
            )
        if min(arr.shape) < 1:
            raise InvalidInputError(f"feature tensor dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidInputError("feature tensor contains NaN or infinite values")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class ChannelMask:
    """Binary channel-selection vector; at least one channel must be selected."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits)
        if arr.ndim != 1 or arr.size < 1:
            raise InvalidInputError("channel mask must be a nonempty 1-D vector")
        if not np.isin(arr, (0, 1)).all():
            raise InvalidInputError("channel mask entries must be 0 or 1")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        if int(arr.sum()) < 1:
            raise InvalidInputError("channel mask must select at least one channel")
        object.__setattr__(self, "bits", arr)

    def __len__(self) -> int:
        return int(self.bits.size)

    @property
    def selected_count(self) -> int:
        return int(self.bits.sum())

    @property
    def selected_indices(self) -> np.ndarray:
        """Indices of selected channels, ascending."""
        return np.flatnonzero(self.bits)


def channel_variance(grid) -> float:
    """Population variance (divide by the cell count) of one 2-D feature map."""
    arr = np.asarray(grid, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("channel variance of an empty grid is undefined")
    if not np.isfinite(arr).all():
        raise InvalidInputError("feature map contains NaN or infinite values")
    return float(arr.var())


def aggregate_channel_information(samples: Iterable[FeatureTensor]) -> np.ndarray:
    """Per-channel information scores over a calibration set.

    Score j is the sum over samples of the population variance of channel j,
    so channels whose maps vary a lot across the in-distribution data rank
    highest.  Accumulation is streaming: one sample is held in memory at a
    time and the running totals are float64.
    """
    psi: np.ndarray | None = None
    shape: tuple[int, int, int] | None = None
    for sample in samples:
        if shape is None:
            shape = sample.shape
            psi = np.zeros(shape[0], dtype=np.float64)
        elif sample.shape != shape:
            raise InvalidInputError(
                f"all samples must share one shape; saw {shape} then {sample.shape}"
            )
        psi += sample.data.astype(np.float64).var(axis=(1, 2))
    if psi is None:
        raise InvalidInputError("cannot aggregate channel information from an empty sample set")
    return psi


def select_top_channels(psi, n: int) -> ChannelMask:
    """Mask with ones at the n highest-scoring channels (ties: lower index wins)."""
    scores = np.asarray(psi, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise InvalidInputError("channel scores must be a nonempty 1-D vector")
    if not 1 <= n <= scores.size:
        raise InvalidInputError(f"n must be in [1, {scores.size}], got {n}")
    # Stable sort on negated scores keeps equal-score channels in index order.
    order = np.argsort(-scores, kind="stable")
    bits = np.zeros(scores.size, dtype=np.uint8)
    bits[order[:n]] = 1
    return ChannelMask(bits)


def indexed_pool(x: FeatureTensor, mask: ChannelMask) -> FeatureTensor:
    """Keep only the masked channels, preserving ascending channel order."""
    if len(mask) != x.channels:
        raise InvalidInputError(
            f"mask length {len(mask)} does not match channel count {x.channels}"
        )
    return FeatureTensor(x.data[mask.bits.astype(bool)])


def max_pool(x: FeatureTensor, k: int) -> FeatureTensor:
    """Non-overlapping k x k max pooling with stride k.

    Output spatial dims are floor(H/k) x floor(W/k); trailing rows/columns
    that do not fill a complete window are discarded.
    """
    if k < 1:
        raise InvalidInputError(f"pool size must be >= 1, got {k}")
    c, h, w = x.shape
    if k > h or k > w:
        raise InvalidInputError(f"pool size {k} exceeds spatial dims {h}x{w}")
    ho, wo = h // k, w // k
    windows = x.data[:, : ho * k, : wo * k].reshape(c, ho, k, wo, k)
    return FeatureTensor(windows.max(axis=(2, 4)))


def embed(x: FeatureTensor, mask: ChannelMask, k: int) -> np.ndarray:
    """Embedding vector: flattened (channel-major) max-pooled selected channels."""
    return max_pool(indexed_pool(x, mask), k).data.ravel()


def embedding_dim(shape: Sequence[int], selected_count: int, k: int) -> int:
    """Length of the embedding produced for the given tensor shape and mask size."""
    _, h, w = shape
    return selected_count * (h // k) * (w // k)
