"""Bit-exact persistence for tensors, profiles, manifests, and metrics.

Formats (all fixed-endianness, no locale-dependent text):

FMAP tensor file
    magic ``FMAP`` (4 bytes) | version ``1`` (1 byte) | dtype ``1`` = float32
    little-endian (1 byte) | C, H, W as uint32 little-endian (12 bytes) |
    payload of C*H*W float32 values, channel-major.  Exactly one tensor per
    file so calibration can stream a dump without holding it in memory.

Detector profile
    UTF-8 text header starting with the line ``EARLIN-PROFILE v1`` and ending
    with ``end``, followed by the centroid as float32 little-endian binary.
    Metadata stays human-inspectable; the payload stays compact.

Manifest
    JSON array of sample entries (strict: unknown keys are rejected).

Metrics
    CSV with the fixed column set
    ``rho,overall_accuracy,expected_latency_ms,tpr,tnr,fpr,detection_accuracy,auroc``
    (one row per rho point, a single row with the first three columns empty
    when no rho grid was evaluated), or an equivalent JSON document.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import DetectorProfile
from .errors import (
    InvalidInputError,
    InvariantViolationError,
    MalformedHeaderError,
    ManifestError,
    NonFiniteDataError,
    PayloadMismatchError,
    VersionMismatchError,
)
from .fmap import ChannelMask, FeatureTensor
from .metrics import MetricsReport, RhoPoint

__all__ = [
    "FMAP_MAGIC",
    "FMAP_VERSION",
    "feature_to_bytes",
    "feature_from_bytes",
    "write_feature",
    "read_feature",
    "save_profile",
    "load_profile",
    "Population",
    "Split",
    "ManifestEntry",
    "Manifest",
    "load_manifest",
    "FeatureDumpSequence",
    "METRICS_CSV_COLUMNS",
    "export_metrics",
    "load_metrics",
]

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
FMAP_DTYPE_F32LE = 1
_FMAP_HEADER = struct.Struct("<4sBBIII")

PROFILE_HEADER_LINE = "EARLIN-PROFILE v1"

METRICS_CSV_COLUMNS = (
    "rho",
    "overall_accuracy",
    "expected_latency_ms",
    "tpr",
    "tnr",
    "fpr",
    "detection_accuracy",
    "auroc",
)


def feature_to_bytes(tensor: FeatureTensor) -> bytes:
    """Serialize a tensor to the FMAP wire/file encoding."""
    c, h, w = tensor.shape
    header = _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, FMAP_DTYPE_F32LE, c, h, w)
    return header + tensor.data.astype("<f4", copy=False).tobytes()


def feature_from_bytes(blob: bytes) -> FeatureTensor:
    """Parse FMAP bytes, validating header, length, and finiteness."""
    if len(blob) < _FMAP_HEADER.size:
        raise MalformedHeaderError(f"file too short for a header ({len(blob)} bytes)")
    magic, version, dtype, c, h, w = _FMAP_HEADER.unpack_from(blob)
    if magic != FMAP_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise VersionMismatchError(f"unsupported tensor format version {version}")
    if dtype != FMAP_DTYPE_F32LE:
        raise MalformedHeaderError(f"unsupported dtype code {dtype}")
    if min(c, h, w) < 1:
        raise MalformedHeaderError(f"dimensions must be positive, got {(c, h, w)}")
    expected = 4 * c * h * w
    payload = blob[_FMAP_HEADER.size :]
    if len(payload) != expected:
        raise PayloadMismatchError(
            f"payload is {len(payload)} bytes but header declares {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    if not np.isfinite(values).all():
        raise NonFiniteDataError("payload contains NaN or infinite values")
    return FeatureTensor(values)


def write_feature(path, tensor: FeatureTensor) -> None:
    Path(path).write_bytes(feature_to_bytes(tensor))


def read_feature(path) -> FeatureTensor:
    return feature_from_bytes(Path(path).read_bytes())


def _profile_header_text(profile: DetectorProfile) -> str:
    c, h, w = profile.input_shape
    lines = [
        PROFILE_HEADER_LINE,
        f"layer_id {profile.layer_id}",
        f"channels {c}",
        f"height {h}",
        f"width {w}",
        f"pool_k {profile.pool_k}",
        f"confidence {profile.confidence!r}",
        f"threshold {profile.threshold!r}",
        f"calibration_count {profile.calibration_count}",
        "mask " + "".join(str(int(b)) for b in profile.mask.bits),
        f"centroid_len {profile.centroid.size}",
        "end",
    ]
    return "\n".join(lines) + "\n"


def save_profile(path, profile: DetectorProfile) -> None:
    blob = _profile_header_text(profile).encode("utf-8")
    blob += profile.centroid.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(blob)


def _parse_int(fields: dict, key: str) -> int:
    try:
        return int(fields[key])
    except (KeyError, ValueError) as exc:
        raise MalformedHeaderError(f"profile header field {key!r} missing or not an integer") from exc


def _parse_float(fields: dict, key: str) -> float:
    try:
        return float(fields[key])
    except (KeyError, ValueError) as exc:
        raise MalformedHeaderError(f"profile header field {key!r} missing or not a number") from exc


def load_profile(path) -> DetectorProfile:
    """Load and validate a detector profile; every invariant is re-checked."""
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise MalformedHeaderError("profile file has no header line")
    first = blob[:newline].decode("utf-8", errors="replace")
    if not first.startswith("EARLIN-PROFILE"):
        raise MalformedHeaderError(f"not a profile file (header line {first!r})")
    if first != PROFILE_HEADER_LINE:
        raise VersionMismatchError(f"unsupported profile version line {first!r}")

    fields: dict[str, str] = {}
    offset = newline + 1
    while True:
        newline = blob.find(b"\n", offset)
        if newline < 0:
            raise MalformedHeaderError("profile header is not terminated by an 'end' line")
        try:
            line = blob[offset:newline].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedHeaderError("profile header is not valid UTF-8") from exc
        offset = newline + 1
        if line == "end":
            break
        key, sep, value = line.partition(" ")
        if not sep:
            raise MalformedHeaderError(f"malformed profile header line {line!r}")
        fields[key] = value

    c = _parse_int(fields, "channels")
    h = _parse_int(fields, "height")
    w = _parse_int(fields, "width")
    mask_text = fields.get("mask")
    if mask_text is None or set(mask_text) - {"0", "1"}:
        raise MalformedHeaderError("profile mask must be a string of 0/1 characters")
    if len(mask_text) != c:
        raise InvariantViolationError(
            f"mask length {len(mask_text)} does not match channel count {c}"
        )
    centroid_len = _parse_int(fields, "centroid_len")
    payload = blob[offset:]
    if len(payload) != 4 * centroid_len:
        raise PayloadMismatchError(
            f"centroid payload is {len(payload)} bytes but header declares {4 * centroid_len}"
        )
    centroid = np.frombuffer(payload, dtype="<f4")
    if not np.isfinite(centroid).all():
        raise NonFiniteDataError("centroid contains NaN or infinite values")

    try:
        return DetectorProfile(
            layer_id=fields.get("layer_id", ""),
            input_shape=(c, h, w),
            mask=ChannelMask(np.frombuffer(mask_text.encode("ascii"), dtype=np.uint8) - ord("0")),
            pool_k=_parse_int(fields, "pool_k"),
            centroid=centroid,
            threshold=_parse_float(fields, "threshold"),
            confidence=_parse_float(fields, "confidence"),
            calibration_count=_parse_int(fields, "calibration_count"),
        )
    except InvalidInputError as exc:
        raise InvariantViolationError(str(exc)) from exc


class Population(str, enum.Enum):
    ID = "ID"
    OOD = "OOD"


class Split(str, enum.Enum):
    CALIBRATION = "calibration"
    TEST = "test"


_REQUIRED_ENTRY_FIELDS = {"sample_id", "feature_path", "population", "split"}
_OPTIONAL_ENTRY_FIELDS = {"image_path", "true_label"}


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    feature_path: str
    population: Population
    split: Split
    image_path: str | None = None
    true_label: str | None = None


@dataclass(frozen=True)
class Manifest:
    """Parsed dataset manifest; paths resolve against ``base_dir``."""

    entries: tuple[ManifestEntry, ...]
    base_dir: Path

    def select(
        self, population: Population | None = None, split: Split | None = None
    ) -> tuple[ManifestEntry, ...]:
        return tuple(
            e
            for e in self.entries
            if (population is None or e.population is population)
            and (split is None or e.split is split)
        )

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else self.base_dir / p


def load_manifest(path, features_dir=None) -> Manifest:
    """Strict manifest parse: unknown fields, duplicates, or bad enums reject.

    Relative paths resolve against ``features_dir`` when given, else against
    the manifest's own directory; every feature path must exist.
    """
    path = Path(path)
    base_dir = Path(features_dir) if features_dir is not None else path.parent
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise ManifestError("manifest must be a JSON array of entries")

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for i, raw in enumerate(doc):
        if not isinstance(raw, dict):
            raise ManifestError(f"entry {i} is not a JSON object")
        unknown = set(raw) - _REQUIRED_ENTRY_FIELDS - _OPTIONAL_ENTRY_FIELDS
        if unknown:
            raise ManifestError(f"entry {i} has unknown fields {sorted(unknown)}")
        missing = _REQUIRED_ENTRY_FIELDS - set(raw)
        if missing:
            raise ManifestError(f"entry {i} is missing required fields {sorted(missing)}")
        sample_id = raw["sample_id"]
        if not isinstance(sample_id, str) or not sample_id:
            raise ManifestError(f"entry {i} sample_id must be a nonempty string")
        if sample_id in seen:
            raise ManifestError(f"duplicate sample_id {sample_id!r}")
        seen.add(sample_id)
        try:
            population = Population(raw["population"])
        except ValueError as exc:
            raise ManifestError(
                f"entry {sample_id!r} has unknown population {raw['population']!r}"
            ) from exc
        try:
            split = Split(raw["split"])
        except ValueError as exc:
            raise ManifestError(f"entry {sample_id!r} has unknown split {raw['split']!r}") from exc
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                feature_path=raw["feature_path"],
                population=population,
                split=split,
                image_path=raw.get("image_path"),
                true_label=raw.get("true_label"),
            )
        )

    manifest = Manifest(entries=tuple(entries), base_dir=base_dir)
    for entry in manifest.entries:
        feature = manifest.resolve(entry.feature_path)
        if not feature.is_file():
            raise ManifestError(f"feature path {feature} for {entry.sample_id!r} does not exist")
    return manifest


class FeatureDumpSequence(Sequence[FeatureTensor]):
    """Lazy sequence over FMAP files, so calibration streams from disk."""

    def __init__(self, paths: Sequence[Path | str]):
        self._paths = [Path(p) for p in paths]

    @classmethod
    def from_manifest(
        cls,
        manifest: Manifest,
        population: Population | None = None,
        split: Split | None = None,
    ) -> "FeatureDumpSequence":
        return cls([manifest.resolve(e.feature_path) for e in manifest.select(population, split)])

    def __len__(self) -> int:
        return len(self._paths)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return FeatureDumpSequence(self._paths[index])
        return read_feature(self._paths[index])


def _report_to_doc(report: MetricsReport) -> dict:
    return {
        "tpr": report.tpr,
        "tnr": report.tnr,
        "fpr": report.fpr,
        "detection_accuracy": report.detection_accuracy,
        "detection_error": report.detection_error,
        "auroc": report.auroc,
        "rho_rows": [
            {
                "rho": row.rho,
                "overall_accuracy": row.overall_accuracy,
                "expected_latency_ms": row.expected_latency_ms,
            }
            for row in report.rho_rows
        ],
    }


def export_metrics(report: MetricsReport, path, format: str = "csv") -> None:
    """Write a metrics report as CSV (fixed columns) or JSON."""
    path = Path(path)
    if format == "json":
        path.write_text(
            json.dumps(_report_to_doc(report), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        return
    if format != "csv":
        raise InvalidInputError(f"unsupported metrics format {format!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_CSV_COLUMNS)
    scalar = [repr(report.tpr), repr(report.tnr), repr(report.fpr),
              repr(report.detection_accuracy), repr(report.auroc)]
    if report.rho_rows:
        for row in report.rho_rows:
            writer.writerow(
                [repr(row.rho), repr(row.overall_accuracy), repr(row.expected_latency_ms)]
                + scalar
            )
    else:
        writer.writerow(["", "", ""] + scalar)
    path.write_text(buf.getvalue(), encoding="utf-8")


def load_metrics(path) -> MetricsReport:
    """Load a JSON metrics document back into a report."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"metrics document is not valid JSON: {exc}") from exc
    try:
        rows = tuple(
            RhoPoint(
                rho=row["rho"],
                overall_accuracy=row["overall_accuracy"],
                expected_latency_ms=row["expected_latency_ms"],
            )
            for row in doc.get("rho_rows", [])
        )
        return MetricsReport(
            tpr=doc["tpr"],
            tnr=doc["tnr"],
            fpr=doc["fpr"],
            detection_accuracy=doc["detection_accuracy"],
            auroc=doc["auroc"],
            rho_rows=rows,
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"metrics document is missing fields: {exc}") from exc
