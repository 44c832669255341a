"""Edge node: detector-gated upload of inference inputs.

Every sample is scored locally against the deployed profile.  Detected-OOD
samples never touch the network; detected-ID samples are uploaded (raw input
payload, FMAP-encoded) to the cloud node and the returned label recorded.
Per-stage timings come from a monotonic clock so the edge cost and the
round-trip cost stay independently observable.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass
from typing import Iterable, Iterator, TextIO

import requests

from .calibration import DetectorProfile
from .detector import Decision, detect
from .errors import InvalidInputError
from .fmap import FeatureTensor

__all__ = [
    "EdgeDecision",
    "InferenceRecord",
    "ServerClient",
    "edge_process",
    "run_edge",
    "summarize_records",
]


class EdgeDecision(str, enum.Enum):
    REJECTED_OOD = "RejectedOOD"
    FORWARDED_ID = "ForwardedID"


@dataclass(frozen=True)
class InferenceRecord:
    """Per-sample outcome of the edge-cloud pipeline."""

    sample_id: str
    decision: EdgeDecision
    predicted_label: str | None = None
    t_edge_ms: float | None = None
    t_comm_plus_server_ms: float | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.decision is EdgeDecision.REJECTED_OOD:
            if self.predicted_label is not None or self.t_comm_plus_server_ms is not None:
                raise InvalidInputError("a rejected sample cannot carry a label or network timing")
        elif (self.predicted_label is None) == (self.error is None):
            raise InvalidInputError("a forwarded sample carries exactly one of label or error")

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "decision": self.decision.value,
            "predicted_label": self.predicted_label,
            "t_edge_ms": self.t_edge_ms,
            "t_comm_plus_server_ms": self.t_comm_plus_server_ms,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "InferenceRecord":
        return cls(
            sample_id=doc["sample_id"],
            decision=EdgeDecision(doc["decision"]),
            predicted_label=doc.get("predicted_label"),
            t_edge_ms=doc.get("t_edge_ms"),
            t_comm_plus_server_ms=doc.get("t_comm_plus_server_ms"),
            error=doc.get("error"),
        )


class ServerClient:
    """Thin HTTP client for the cloud node, with connection reuse."""

    def __init__(self, base_url: str, timeout_s: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def classify(self, payload: bytes) -> dict:
        """POST a payload; returns the decoded JSON document (any status).

        Transport failures raise ``requests.RequestException``.
        """
        response = self._session.post(
            self.base_url + "/v1/classify",
            data=payload,
            headers={"Content-Type": "application/octet-stream"},
            timeout=self.timeout_s,
        )
        try:
            doc = response.json()
        except ValueError:
            doc = {"error": f"undecodable_response_{response.status_code}"}
        doc["_status"] = response.status_code
        return doc

    def health(self) -> bool:
        try:
            response = self._session.get(self.base_url + "/v1/health", timeout=self.timeout_s)
            return response.status_code == 200 and response.json().get("status") == "ok"
        except (requests.RequestException, ValueError):
            return False

    def close(self) -> None:
        self._session.close()


def edge_process(
    sample_id: str,
    features: FeatureTensor,
    payload: bytes,
    profile: DetectorProfile,
    client: ServerClient,
) -> InferenceRecord:
    """Detect locally; upload the raw payload only on a detected-ID sample.

    Transport or server failures on a forwarded sample are captured in the
    record's ``error`` field — they are never silently dropped and never
    abort the stream.
    """
    started = time.perf_counter()
    try:
        outcome = detect(features, profile)
    except InvalidInputError as exc:
        # Local failure: nothing is uploaded, so the record must not count
        # as a forward (server request count tracks ForwardedID exactly).
        return InferenceRecord(
            sample_id=sample_id,
            decision=EdgeDecision.REJECTED_OOD,
            error=f"local_error: {exc}",
            t_edge_ms=(time.perf_counter() - started) * 1000.0,
        )
    t_edge_ms = (time.perf_counter() - started) * 1000.0

    if outcome.decision is Decision.OOD:
        return InferenceRecord(
            sample_id=sample_id,
            decision=EdgeDecision.REJECTED_OOD,
            t_edge_ms=t_edge_ms,
        )

    upload_started = time.perf_counter()
    try:
        doc = client.classify(payload)
    except requests.RequestException as exc:
        return InferenceRecord(
            sample_id=sample_id,
            decision=EdgeDecision.FORWARDED_ID,
            t_edge_ms=t_edge_ms,
            t_comm_plus_server_ms=(time.perf_counter() - upload_started) * 1000.0,
            error=f"{type(exc).__name__}: {exc}",
        )
    t_comm_plus_server_ms = (time.perf_counter() - upload_started) * 1000.0

    if doc.get("_status") == 200 and "label" in doc:
        return InferenceRecord(
            sample_id=sample_id,
            decision=EdgeDecision.FORWARDED_ID,
            predicted_label=doc["label"],
            t_edge_ms=t_edge_ms,
            t_comm_plus_server_ms=t_comm_plus_server_ms,
        )
    return InferenceRecord(
        sample_id=sample_id,
        decision=EdgeDecision.FORWARDED_ID,
        t_edge_ms=t_edge_ms,
        t_comm_plus_server_ms=t_comm_plus_server_ms,
        error=f"server_error: {doc.get('error', 'unknown')} (status {doc.get('_status')})",
    )


def run_edge(
    samples: Iterable[tuple[str, FeatureTensor, bytes]],
    profile: DetectorProfile,
    client: ServerClient,
    sink: TextIO | None = None,
) -> Iterator[InferenceRecord]:
    """Process a sample stream sequentially, optionally writing JSON lines."""
    for sample_id, features, payload in samples:
        record = edge_process(sample_id, features, payload, profile, client)
        if sink is not None:
            sink.write(json.dumps(record.to_dict()) + "\n")
        yield record


def summarize_records(records: Iterable[InferenceRecord]) -> dict:
    """Forward rate, mean stage latencies, and error count over a record set."""
    total = 0
    forwarded = 0
    errors = 0
    edge_sum = 0.0
    edge_n = 0
    rt_sum = 0.0
    rt_n = 0
    for r in records:
        total += 1
        if r.decision is EdgeDecision.FORWARDED_ID:
            forwarded += 1
        if r.error is not None:
            errors += 1
        if r.t_edge_ms is not None:
            edge_sum += r.t_edge_ms
            edge_n += 1
        if r.t_comm_plus_server_ms is not None:
            rt_sum += r.t_comm_plus_server_ms
            rt_n += 1
    return {
        "samples": total,
        "forwarded": forwarded,
        "forward_rate": forwarded / total if total else 0.0,
        "errors": errors,
        "mean_t_edge_ms": edge_sum / edge_n if edge_n else 0.0,
        "mean_t_comm_plus_server_ms": rt_sum / rt_n if rt_n else 0.0,
    }
