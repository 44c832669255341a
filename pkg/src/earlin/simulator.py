"""Seeded Monte-Carlo sweep of the collaborative setup over an OOD-ratio grid.

Each grid point draws a workload (sample population, detector decision,
classification correctness, per-stage latency) and reports the empirical
joint accuracy and mean latency next to the closed-form values, so the
affine accuracy/latency characterization can be checked against simulation.

Randomness uses numpy's Philox bit generator, a counter-based PRNG: every
grid point gets an independent stream derived from ``(seed, point index)``
via ``SeedSequence`` spawn keys, so points can run in any order or in
parallel and still reproduce bit-identically from the seed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibration import DetectorProfile
from .detector import score_many
from .errors import InvalidInputError
from .fmap import FeatureTensor
from .metrics import LatencyParams, expected_latency, overall_accuracy

__all__ = [
    "DetectorMode",
    "WorkloadSpec",
    "SweepRow",
    "run_sweep",
    "synthetic_features",
    "point_rng",
]


class DetectorMode(str, enum.Enum):
    # Detector behavior drawn as Bernoulli(tpr/tnr) coin flips.
    SYNTHETIC = "synthetic"
    # Real feature tensors scored through a calibrated profile.
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class WorkloadSpec:
    """Everything a sweep needs; immutable so runs are reproducible."""

    rho_grid: tuple[float, ...]
    samples_per_point: int
    acc_m: float
    tpr: float
    tnr: float
    latency: LatencyParams
    seed: int
    detector_mode: DetectorMode = DetectorMode.SYNTHETIC
    profile: DetectorProfile | None = None
    id_features: Sequence[FeatureTensor] | None = None
    ood_features: Sequence[FeatureTensor] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho_grid", tuple(float(r) for r in self.rho_grid))
        object.__setattr__(self, "detector_mode", DetectorMode(self.detector_mode))
        if len(self.rho_grid) == 0:
            raise InvalidInputError("rho grid must contain at least one point")
        for rho in self.rho_grid:
            if not 0.0 <= rho <= 1.0:
                raise InvalidInputError(f"rho values must lie in [0, 1], got {rho}")
        if self.samples_per_point < 1:
            raise InvalidInputError("samples per point must be >= 1")
        for name in ("acc_m", "tpr", "tnr"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")
        if self.detector_mode is DetectorMode.EMPIRICAL:
            if self.profile is None or not self.id_features or not self.ood_features:
                raise InvalidInputError(
                    "empirical mode requires a profile plus ID and OOD feature pools"
                )


@dataclass(frozen=True)
class SweepRow:
    rho: float
    empirical_accuracy: float
    analytic_accuracy: float
    empirical_latency_ms: float
    analytic_latency_ms: float
    forwarded_fraction: float


def point_rng(seed: int, index: int) -> np.random.Generator:
    """Independent, order-insensitive stream for one grid point."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    )


def _stage_draw(rng: np.random.Generator, mean: float, std: float, n: int) -> np.ndarray:
    if std == 0.0:
        return np.full(n, mean)
    # Gaussian spread truncated at zero: latencies cannot be negative.
    return np.maximum(rng.normal(mean, std, n), 0.0)


def run_sweep(spec: WorkloadSpec) -> list[SweepRow]:
    """One Monte-Carlo batch per grid point; rows come back sorted by rho.

    Draw order per point is fixed (population, decision, correctness,
    latencies), so identical seeds give bit-identical rows at any level of
    parallelism over points.
    """
    empirical = spec.detector_mode is DetectorMode.EMPIRICAL
    if empirical:
        id_scores = score_many(spec.id_features, spec.profile)
        ood_scores = score_many(spec.ood_features, spec.profile)
        theta = spec.profile.threshold

    n = spec.samples_per_point
    lp = spec.latency
    rows: list[SweepRow] = []
    for index, rho in enumerate(spec.rho_grid):
        rng = point_rng(spec.seed, index)
        is_ood = rng.random(n) < rho
        decision_draw = rng.random(n)
        correctness_draw = rng.random(n)
        if empirical:
            id_pick = rng.integers(0, id_scores.size, n)
            ood_pick = rng.integers(0, ood_scores.size, n)
            kappa = np.where(is_ood, ood_scores[ood_pick], id_scores[id_pick])
            detected_id = kappa <= theta
        else:
            detected_id = np.where(
                is_ood, decision_draw < (1.0 - spec.tnr), decision_draw < spec.tpr
            )
        correct = np.where(
            is_ood,
            ~detected_id,
            detected_id & (correctness_draw < spec.acc_m),
        )
        t_edge = _stage_draw(rng, lp.t_edge, lp.t_edge_std, n)
        t_comm = _stage_draw(rng, lp.t_comm, lp.t_comm_std, n)
        t_server = _stage_draw(rng, lp.t_server, lp.t_server_std, n)
        total_ms = t_edge + detected_id * (t_comm + t_server)

        rows.append(
            SweepRow(
                rho=rho,
                empirical_accuracy=float(correct.mean()),
                analytic_accuracy=overall_accuracy(spec.acc_m, spec.tpr, spec.tnr, rho),
                empirical_latency_ms=float(total_ms.mean()),
                analytic_latency_ms=expected_latency(lp, spec.tpr, spec.tnr, rho),
                forwarded_fraction=float(detected_id.mean()),
            )
        )
    rows.sort(key=lambda row: row.rho)
    return rows


def synthetic_features(
    count: int,
    shape: tuple[int, int, int],
    population: str = "ID",
    shift: float = 2.0,
    seed: int = 0,
) -> list[FeatureTensor]:
    """Gaussian stand-in for real layer dumps.

    ID tensors are standard normal elementwise; OOD tensors share the unit
    spread but sit at mean ``shift``.  Deterministic from the seed.
    """
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    if len(shape) != 3 or min(shape) < 1:
        raise InvalidInputError(f"shape must be three positive dims, got {shape}")
    if shift < 0:
        raise InvalidInputError(f"shift must be >= 0, got {shift}")
    if population not in ("ID", "OOD"):
        raise InvalidInputError(f"population must be 'ID' or 'OOD', got {population!r}")
    mean = shift if population == "OOD" else 0.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed)))
    block = rng.normal(mean, 1.0, size=(count, *shape)).astype(np.float32)
    return [FeatureTensor(block[i]) for i in range(count)]
