"""Inference-time scoring and ID/OOD decisions against a frozen profile.

Stateless given an immutable profile; safe for concurrent callers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .calibration import DetectorProfile, distance
from .errors import InvalidInputError
from .fmap import FeatureTensor, embed

__all__ = ["Decision", "DetectionOutcome", "score", "detect", "score_many"]


class Decision(str, enum.Enum):
    ID = "ID"
    OOD = "OOD"


@dataclass(frozen=True)
class DetectionOutcome:
    """Decision plus the raw score, so callers can re-threshold without re-embedding."""

    decision: Decision
    score: float
    threshold_used: float


def score(x: FeatureTensor, profile: DetectorProfile) -> float:
    """Distance from the sample's embedding to the calibration centroid."""
    if x.shape != profile.input_shape:
        raise InvalidInputError(
            f"tensor shape {x.shape} does not match profile shape {profile.input_shape}"
        )
    return distance(embed(x, profile.mask, profile.pool_k), profile.centroid)


def detect(x: FeatureTensor, profile: DetectorProfile) -> DetectionOutcome:
    """ID iff the score is within the threshold (boundary counts as ID)."""
    kappa = score(x, profile)
    decision = Decision.ID if kappa <= profile.threshold else Decision.OOD
    return DetectionOutcome(decision=decision, score=kappa, threshold_used=profile.threshold)


def score_many(features: Iterable[FeatureTensor], profile: DetectorProfile) -> np.ndarray:
    """Scores for a whole population, as a float64 vector."""
    return np.array([score(x, profile) for x in features], dtype=np.float64)
