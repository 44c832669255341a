"""Building a detector profile from in-distribution feature dumps.

Calibration needs no OOD data and no model retraining: it ranks channels by
aggregate variance, embeds every calibration sample, takes the element-wise
mean as the centroid, and places the distance threshold at the nearest-rank
upper quantile so that at least a ``p`` fraction of calibration samples fall
inside it.  The optional layer sweep is the one place OOD data may enter,
and only through an explicit validation dump.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError
from .fmap import (
    ChannelMask,
    FeatureTensor,
    aggregate_channel_information,
    embed,
    embedding_dim,
    select_top_channels,
)

__all__ = [
    "DetectorProfile",
    "LayerSweepResult",
    "compute_centroid",
    "distance",
    "fit_threshold",
    "nearest_rank",
    "calibrate",
    "sweep_layers",
]

PROFILE_FORMAT_VERSION = 1

# Below this many calibration distances the quantile threshold is noisy.
SMALL_CALIBRATION_SET = 100


@dataclass(frozen=True, eq=False)
class DetectorProfile:
    """Frozen calibration artifact deployed at the edge.

    ``centroid`` is stored as float32 (matching the on-disk profile format),
    so a freshly calibrated profile and its saved/loaded copy score inputs
    identically.
    """

    layer_id: str
    input_shape: tuple[int, int, int]
    mask: ChannelMask
    pool_k: int
    centroid: np.ndarray
    threshold: float
    confidence: float
    calibration_count: int
    format_version: int = PROFILE_FORMAT_VERSION

    def __post_init__(self) -> None:
        c, h, w = self.input_shape
        if min(c, h, w) < 1:
            raise InvalidInputError(f"input shape must be positive, got {self.input_shape}")
        if len(self.mask) != c:
            raise InvalidInputError(
                f"mask length {len(self.mask)} does not match channel count {c}"
            )
        if self.pool_k < 1 or self.pool_k > h or self.pool_k > w:
            raise InvalidInputError(f"pool size {self.pool_k} invalid for {h}x{w} maps")
        centroid = np.ascontiguousarray(self.centroid, dtype=np.float32)
        if centroid.ndim != 1:
            raise InvalidInputError("centroid must be a 1-D vector")
        if not np.isfinite(centroid).all():
            raise InvalidInputError("centroid contains NaN or infinite values")
        expected = self.embedding_dim
        if centroid.size != expected:
            raise InvalidInputError(
                f"centroid length {centroid.size} does not match embedding dim {expected}"
            )
        if not math.isfinite(self.threshold) or self.threshold < 0:
            raise InvalidInputError(f"threshold must be finite and >= 0, got {self.threshold}")
        if not 0.0 < self.confidence < 1.0:
            raise InvalidInputError(f"confidence must lie in (0, 1), got {self.confidence}")
        if self.calibration_count < 1:
            raise InvalidInputError("calibration count must be positive")
        object.__setattr__(self, "centroid", centroid)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    @property
    def embedding_dim(self) -> int:
        return embedding_dim(self.input_shape, self.mask.selected_count, self.pool_k)


@dataclass(frozen=True)
class LayerSweepResult:
    """Outcome of trying the detector at several candidate layers."""

    rows: tuple[tuple[str, float], ...]
    chosen_layer: str

    def tnr_for(self, layer_id: str) -> float:
        for layer, tnr in self.rows:
            if layer == layer_id:
                return tnr
        raise KeyError(layer_id)


def compute_centroid(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean of the embedding vectors, in float64."""
    if len(embeddings) == 0:
        raise InvalidInputError("cannot compute centroid of an empty embedding set")
    first_len = len(embeddings[0])
    acc = np.zeros(first_len, dtype=np.float64)
    for e in embeddings:
        vec = np.asarray(e, dtype=np.float64)
        if vec.shape != (first_len,):
            raise InvalidInputError("embeddings must all have the same length")
        acc += vec
    return acc / len(embeddings)


def distance(e, c) -> float:
    """Euclidean distance between an embedding and the centroid."""
    ev = np.asarray(e, dtype=np.float64)
    cv = np.asarray(c, dtype=np.float64)
    if ev.shape != cv.shape:
        raise InvalidInputError(f"length mismatch: {ev.shape} vs {cv.shape}")
    return float(np.linalg.norm(ev - cv))


def nearest_rank(n: int, p: float) -> int:
    """Smallest rank r in [1, n] with r/n >= p (nearest-rank quantile rule)."""
    if n < 1:
        raise InvalidInputError("rank undefined for empty data")
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"quantile level must lie in (0, 1), got {p}")
    rank = math.ceil(p * n)
    # ceil(p*n) can land one too high when p*n overshoots an exact integer
    # by a float ulp (e.g. 0.9 * 30); repair against the defining inequality.
    if rank > 1 and (rank - 1) / n >= p:
        rank -= 1
    return min(max(rank, 1), n)


def fit_threshold(distances, p: float) -> float:
    """Nearest-rank upper quantile of the calibration distances.

    Returns the smallest order statistic T such that at least a ``p``
    fraction of the distances are <= T.
    """
    values = np.asarray(distances, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise InvalidInputError("threshold requires a nonempty 1-D distance set")
    if not np.isfinite(values).all():
        raise InvalidInputError("distances contain NaN or infinite values")
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"confidence must lie in (0, 1), got {p}")
    n = values.size
    if n < SMALL_CALIBRATION_SET:
        warnings.warn(
            f"threshold fitted on only {n} distances; the quantile estimate is noisy",
            stacklevel=2,
        )
    rank = nearest_rank(n, p)
    return float(np.sort(values)[rank - 1])


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def calibrate(
    id_features: Sequence[FeatureTensor],
    layer_id: str,
    select_fraction: float = 0.5,
    pool_k: int = 4,
    p: float = 0.95,
) -> DetectorProfile:
    """Build a complete detector profile from an in-distribution feature dump.

    Two streaming passes over ``id_features``: the first accumulates channel
    scores, the second embeds each sample.  The number of selected channels
    is ``select_fraction`` of the channel count, rounded half away from zero
    and clamped to at least one.
    """
    if len(id_features) == 0:
        raise InvalidInputError("calibration requires at least one feature tensor")
    if not 0.0 < select_fraction <= 1.0:
        raise InvalidInputError(f"select fraction must lie in (0, 1], got {select_fraction}")
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"confidence must lie in (0, 1), got {p}")

    shape = id_features[0].shape
    psi = aggregate_channel_information(id_features)
    n_channels = shape[0]
    n_select = min(max(_round_half_away(select_fraction * n_channels), 1), n_channels)
    mask = select_top_channels(psi, n_select)

    count = len(id_features)
    dim = embedding_dim(shape, n_select, pool_k)
    embeddings = np.empty((count, dim), dtype=np.float32)
    for i, x in enumerate(id_features):
        if x.shape != shape:
            raise InvalidInputError(f"all samples must share one shape; saw {shape} then {x.shape}")
        embeddings[i] = embed(x, mask, pool_k)

    centroid = compute_centroid(embeddings).astype(np.float32)
    # Distances are computed against the float32 centroid, exactly as the
    # runtime will score, so the fitted threshold covers what it claims.
    deltas = embeddings.astype(np.float64) - centroid.astype(np.float64)
    distances = np.linalg.norm(deltas, axis=1)
    threshold = fit_threshold(distances, p)

    return DetectorProfile(
        layer_id=layer_id,
        input_shape=shape,
        mask=mask,
        pool_k=pool_k,
        centroid=centroid,
        threshold=threshold,
        confidence=p,
        calibration_count=count,
    )


def sweep_layers(
    dumps: Mapping[str, tuple[Sequence[FeatureTensor], Sequence[FeatureTensor]]],
    select_fraction: float = 0.5,
    pool_k: int = 4,
    p: float = 0.95,
) -> LayerSweepResult:
    """Calibrate per candidate layer and pick the one with the best TNR.

    ``dumps`` maps layer id -> (ID features, validation OOD features), in
    shallowest-first order; ties go to the earlier (shallower) layer.  The
    per-layer score is the TNR at an ID acceptance rate of at least ``p``.
    """
    from .detector import score_many
    from .metrics import ScoreSet, tnr_at_tpr

    if len(dumps) == 0:
        raise InvalidInputError("layer sweep requires at least one layer dump")
    rows: list[tuple[str, float]] = []
    best_layer: str | None = None
    best_tnr = -1.0
    for layer_id, pair in dumps.items():
        try:
            id_feats, ood_feats = pair
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(
                f"layer {layer_id!r} must provide (id_features, ood_features)"
            ) from exc
        if len(id_feats) == 0 or len(ood_feats) == 0:
            raise InvalidInputError(f"layer {layer_id!r} is missing an ID or OOD dump")
        profile = calibrate(id_feats, layer_id, select_fraction, pool_k, p)
        scores = ScoreSet(score_many(id_feats, profile), score_many(ood_feats, profile))
        tnr, _ = tnr_at_tpr(scores, tpr_target=p)
        rows.append((layer_id, tnr))
        if tnr > best_tnr:
            best_layer, best_tnr = layer_id, tnr
    assert best_layer is not None
    return LayerSweepResult(rows=tuple(rows), chosen_layer=best_layer)
