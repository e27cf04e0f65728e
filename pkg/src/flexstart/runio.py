"""On-disk artifacts: boundary messages, per-step solutions, timeseries, summary.

The only data crossing the house/utility boundary are envelope and dispatch
messages; both are schema-validated JSON documents that reject unknown
fields. Every numeric series lands in delimited files so a run can be
inspected without this package.
"""

from __future__ import annotations

import csv
import json
import os

import jsonschema

SCHEMA_VERSION = 1

FLEX_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type", "schema_version", "house_id", "horizon_start_h",
                 "dt_h", "lower_kw", "upper_kw"],
    "properties": {
        "type": {"const": "flex_envelope"},
        "schema_version": {"const": SCHEMA_VERSION},
        "house_id": {"type": "string", "minLength": 1},
        "horizon_start_h": {"type": "number"},
        "dt_h": {"type": "number", "exclusiveMinimum": 0},
        "lower_kw": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "upper_kw": {"type": "array", "minItems": 1, "items": {"type": "number"}},
    },
}

DISPATCH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type", "schema_version", "house_id", "horizon_start_h",
                 "dt_h", "p_ref_kw"],
    "properties": {
        "type": {"const": "dispatch"},
        "schema_version": {"const": SCHEMA_VERSION},
        "house_id": {"type": "string", "minLength": 1},
        "horizon_start_h": {"type": "number"},
        "dt_h": {"type": "number", "exclusiveMinimum": 0},
        "p_ref_kw": {"type": "array", "minItems": 1, "items": {"type": "number"}},
    },
}

_SCHEMAS = {"flex_envelope": FLEX_SCHEMA, "dispatch": DISPATCH_SCHEMA}


class MessageError(ValueError):
    """Malformed boundary message."""


def flex_message(house_id: str, envelope) -> dict:
    return {
        "type": "flex_envelope",
        "schema_version": SCHEMA_VERSION,
        "house_id": house_id,
        "horizon_start_h": envelope.horizon_start_h,
        "dt_h": envelope.dt_h,
        "lower_kw": list(envelope.lower_kw),
        "upper_kw": list(envelope.upper_kw),
    }


def dispatch_message(house_id: str, p_ref_kw, horizon_start_h: float,
                     dt_h: float) -> dict:
    return {
        "type": "dispatch",
        "schema_version": SCHEMA_VERSION,
        "house_id": house_id,
        "horizon_start_h": horizon_start_h,
        "dt_h": dt_h,
        "p_ref_kw": [float(v) for v in p_ref_kw],
    }


def validate_message(doc: dict) -> dict:
    """Check a boundary message against its schema; returns the document."""
    if not isinstance(doc, dict) or "type" not in doc:
        raise MessageError("message lacks a type field")
    schema = _SCHEMAS.get(doc["type"])
    if schema is None:
        raise MessageError(f"unknown message type {doc['type']!r}")
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise MessageError(f"invalid {doc['type']} message: {exc.message}") from exc
    if doc["type"] == "flex_envelope":
        if len(doc["lower_kw"]) != len(doc["upper_kw"]):
            raise MessageError("envelope bound arrays differ in length")
        for lo, hi in zip(doc["lower_kw"], doc["upper_kw"]):
            if lo > hi + 1e-9:
                raise MessageError("envelope lower bound exceeds upper bound")
    return doc


def write_json(path: str, doc) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def write_message(path: str, doc: dict) -> None:
    write_json(path, validate_message(doc))


def read_message(path: str) -> dict:
    return validate_message(read_json(path))


class TimeseriesWriter:
    """Accumulates long-format rows per stream, then writes one CSV each."""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self._streams: dict[str, tuple[tuple[str, ...], list[tuple]]] = {}

    def add(self, stream: str, header: tuple[str, ...], row: tuple) -> None:
        if stream not in self._streams:
            self._streams[stream] = (header, [])
        stored_header, rows = self._streams[stream]
        if stored_header != header:
            raise ValueError(f"stream {stream}: header changed mid-run")
        rows.append(row)

    def flush(self) -> list[str]:
        out_dir = os.path.join(self.run_dir, "timeseries")
        os.makedirs(out_dir, exist_ok=True)
        written = []
        for stream in sorted(self._streams):
            header, rows = self._streams[stream]
            path = os.path.join(out_dir, f"{stream}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for row in rows:
                    w.writerow([_fmt(v) for v in row])
            written.append(path)
        return written


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def step_dir(run_dir: str, kind: str, step: int) -> str:
    return os.path.join(run_dir, kind, f"step_{step:02d}")


def read_timeseries(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        rows = list(r)
    return rows[0], rows[1:]
