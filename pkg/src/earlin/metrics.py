"""Score-based detector metrics and the joint accuracy / latency model.

Detector quality is summarized from two labeled score populations (true-ID
and true-OOD).  The joint model combines a classifier of accuracy ``acc_m``
with a detector of given TPR/TNR in a workload whose OOD fraction is
``rho``:

* overall accuracy  = acc_m * TPR * (1 - rho) + TNR * rho
* expected latency  = T_edge + (T_comm + T_server) * (TPR*(1-rho) + (1-TNR)*rho)

Both are affine in rho; their slopes (TNR - acc_m*TPR and
(T_comm+T_server)*(FPR - TPR)) are exposed directly because they determine
whether adding the detector helps as the workload degrades.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .calibration import nearest_rank
from .errors import InvalidInputError

__all__ = [
    "Polarity",
    "ScoreSet",
    "LatencyParams",
    "RhoPoint",
    "MetricsReport",
    "confusion_at_threshold",
    "tnr_at_tpr",
    "detection_accuracy",
    "auroc",
    "overall_accuracy",
    "expected_latency",
    "accuracy_slope",
    "latency_slope",
    "build_report",
]


class Polarity(str, enum.Enum):
    """Which side of a threshold counts as ID.

    Distance-style scores are lower for ID samples; confidence-style scores
    (e.g. max softmax) are higher.  Carrying the convention in the score set
    lets externally produced baseline scores reuse every metric unchanged.
    """

    LOWER_IS_ID = "lower_is_id"
    HIGHER_IS_ID = "higher_is_id"


def _as_scores(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError(f"{name} must be a nonempty 1-D score vector")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains NaN or infinite values")
    return arr


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Detector scores for a labeled evaluation set, split by true population."""

    id_scores: np.ndarray
    ood_scores: np.ndarray
    polarity: Polarity = Polarity.LOWER_IS_ID

    def __post_init__(self) -> None:
        object.__setattr__(self, "id_scores", _as_scores(self.id_scores, "id_scores"))
        object.__setattr__(self, "ood_scores", _as_scores(self.ood_scores, "ood_scores"))
        object.__setattr__(self, "polarity", Polarity(self.polarity))


def _check_unit(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0 or not math.isfinite(value):
        raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")
    return value


def confusion_at_threshold(s: ScoreSet, theta: float) -> tuple[float, float, float]:
    """(tpr, tnr, fpr) of the thresholded detector, boundary counting as ID."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise InvalidInputError("threshold must be finite")
    if s.polarity is Polarity.LOWER_IS_ID:
        tpr = float(np.mean(s.id_scores <= theta))
        tnr = float(np.mean(s.ood_scores > theta))
    else:
        tpr = float(np.mean(s.id_scores >= theta))
        tnr = float(np.mean(s.ood_scores < theta))
    return tpr, tnr, 1.0 - tnr


def tnr_at_tpr(s: ScoreSet, tpr_target: float = 0.95) -> tuple[float, float]:
    """TNR at the tightest threshold whose TPR reaches the target.

    The threshold only needs to be searched among the ID order statistics:
    TPR changes nowhere else, and the nearest-rank statistic is the tightest
    feasible choice, which maximizes TNR subject to the TPR constraint.
    Returns (tnr, theta).
    """
    if not 0.0 < tpr_target < 1.0:
        raise InvalidInputError(f"tpr target must lie in (0, 1), got {tpr_target}")
    n = s.id_scores.size
    rank = nearest_rank(n, tpr_target)
    ordered = np.sort(s.id_scores)
    if s.polarity is Polarity.LOWER_IS_ID:
        theta = float(ordered[rank - 1])
    else:
        theta = float(ordered[n - rank])
    _, tnr, _ = confusion_at_threshold(s, theta)
    return tnr, theta


def detection_accuracy(tpr: float, tnr: float) -> float:
    """Balanced detector accuracy assuming equal ID/OOD priors."""
    return 0.5 * (_check_unit(tpr, "tpr") + _check_unit(tnr, "tnr"))


def auroc(s: ScoreSet) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) estimator.

    Equals the probability that a random ID sample scores on the ID side of
    a random OOD sample, with ties counting one half.
    """
    n, m = s.id_scores.size, s.ood_scores.size
    ranks = rankdata(np.concatenate([s.id_scores, s.ood_scores]))
    # Pairs (with half credit for ties) where the OOD sample scores higher.
    ood_above = float(ranks[n:].sum() - m * (m + 1) / 2.0)
    if s.polarity is Polarity.LOWER_IS_ID:
        return ood_above / (n * m)
    return 1.0 - ood_above / (n * m)


@dataclass(frozen=True)
class LatencyParams:
    """Mean per-stage latencies in milliseconds, with optional spread.

    A zero standard deviation means the stage cost is constant.
    """

    t_edge: float
    t_comm: float
    t_server: float
    t_edge_std: float = 0.0
    t_comm_std: float = 0.0
    t_server_std: float = 0.0

    def __post_init__(self) -> None:
        for name in ("t_edge", "t_comm", "t_server", "t_edge_std", "t_comm_std", "t_server_std"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {value}")


def overall_accuracy(acc_m: float, tpr: float, tnr: float, rho: float) -> float:
    """Joint accuracy of classifier-plus-detector at OOD fraction rho.

    A correct outcome is a correct label for a true-ID sample that the
    detector let through, or an OOD flag for a true-OOD sample.
    """
    acc_m = _check_unit(acc_m, "acc_m")
    tpr = _check_unit(tpr, "tpr")
    tnr = _check_unit(tnr, "tnr")
    rho = _check_unit(rho, "rho")
    return acc_m * tpr * (1.0 - rho) + tnr * rho


def expected_latency(lp: LatencyParams, tpr: float, tnr: float, rho: float) -> float:
    """Mean per-inference latency (ms): edge always runs, upload only on detected-ID."""
    tpr = _check_unit(tpr, "tpr")
    tnr = _check_unit(tnr, "tnr")
    rho = _check_unit(rho, "rho")
    forward_prob = tpr * (1.0 - rho) + (1.0 - tnr) * rho
    return lp.t_edge + (lp.t_comm + lp.t_server) * forward_prob


def accuracy_slope(acc_m: float, tpr: float, tnr: float) -> float:
    """Rate of change of overall accuracy with rho (positive iff TNR > acc_m*TPR)."""
    return _check_unit(tnr, "tnr") - _check_unit(acc_m, "acc_m") * _check_unit(tpr, "tpr")


def latency_slope(lp: LatencyParams, tpr: float, tnr: float) -> float:
    """Rate of change of expected latency with rho: (T_comm+T_server)*(FPR - TPR)."""
    fpr = 1.0 - _check_unit(tnr, "tnr")
    return (lp.t_comm + lp.t_server) * (fpr - _check_unit(tpr, "tpr"))


@dataclass(frozen=True)
class RhoPoint:
    """Joint accuracy and expected latency at one OOD fraction."""

    rho: float
    overall_accuracy: float
    expected_latency_ms: float


@dataclass(frozen=True)
class MetricsReport:
    """Detector metrics plus optional joint accuracy/latency rows over a rho grid."""

    tpr: float
    tnr: float
    fpr: float
    detection_accuracy: float
    auroc: float
    rho_rows: tuple[RhoPoint, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        for name in ("tpr", "tnr", "fpr", "detection_accuracy", "auroc"):
            _check_unit(getattr(self, name), name)
        if abs(self.fpr - (1.0 - self.tnr)) > 1e-12:
            raise InvalidInputError("fpr must equal 1 - tnr")
        if abs(self.detection_accuracy - 0.5 * (self.tpr + self.tnr)) > 1e-12:
            raise InvalidInputError("detection accuracy must equal 0.5*(tpr + tnr)")
        object.__setattr__(self, "rho_rows", tuple(self.rho_rows))

    @property
    def detection_error(self) -> float:
        return 1.0 - self.detection_accuracy

    @classmethod
    def from_rates(
        cls, tpr: float, tnr: float, auroc_value: float, rho_rows: Sequence[RhoPoint] = ()
    ) -> "MetricsReport":
        return cls(
            tpr=tpr,
            tnr=tnr,
            fpr=1.0 - tnr,
            detection_accuracy=detection_accuracy(tpr, tnr),
            auroc=auroc_value,
            rho_rows=tuple(rho_rows),
        )


def build_report(
    s: ScoreSet,
    tpr_target: float = 0.95,
    acc_m: float | None = None,
    latency: LatencyParams | None = None,
    rho_grid: Sequence[float] = (),
) -> tuple[MetricsReport, float]:
    """Full report at the threshold refit to reach ``tpr_target``.

    When ``acc_m``, ``latency`` and a rho grid are all supplied, the report
    carries the joint accuracy/latency curve.  Returns (report, theta).
    """
    if rho_grid and (acc_m is None or latency is None):
        raise InvalidInputError("a rho grid requires both acc_m and latency parameters")
    tnr, theta = tnr_at_tpr(s, tpr_target)
    tpr, _, _ = confusion_at_threshold(s, theta)
    rows = []
    for rho in rho_grid:
        rows.append(
            RhoPoint(
                rho=float(rho),
                overall_accuracy=overall_accuracy(acc_m, tpr, tnr, rho),
                expected_latency_ms=expected_latency(latency, tpr, tnr, rho),
            )
        )
    return MetricsReport.from_rates(tpr, tnr, auroc(s), rows), theta
