"""Trace file I/O: one JSON object per line, one line per decode step.

Floats are serialized with Python's shortest round-trip repr, so a file
written from a given run is byte-identical across replays and parses back
to bit-equal values.  A truncated decode appends a final marker line
`{"truncated": true, "reason": ...}` so partial results are explicit.
"""

from __future__ import annotations

import json
from typing import Iterable, TextIO

from quadcd.engine import DecodeResult, StepTrace

_FIELDS = (
    "step",
    "d_dual_non",
    "d_res_non",
    "d_dec_non",
    "d_orig_non",
    "chosen_channel",
    "branch",
    "token",
)


def trace_line(trace: StepTrace) -> str:
    return json.dumps({name: getattr(trace, name) for name in _FIELDS})


def write_traces(fh: TextIO, traces: Iterable[StepTrace], *, truncated: bool = False,
                 reason: str | None = None) -> None:
    for trace in traces:
        fh.write(trace_line(trace) + "\n")
    if truncated:
        fh.write(json.dumps({"truncated": True, "reason": reason}) + "\n")


def save_traces(path, result: DecodeResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_traces(fh, result.traces, truncated=result.truncated,
                     reason=result.truncation_reason)


def read_traces(path) -> list[StepTrace]:
    """Parse a trace file; the truncation marker, when present, is dropped."""
    traces: list[StepTrace] = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read trace file {path}: {exc}") from None
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad trace line: {exc}") from None
            if record.get("truncated"):
                continue
            missing = [name for name in _FIELDS if name not in record]
            if missing:
                raise ValueError(f"{path}:{line_no}: trace line missing {missing}")
            try:
                traces.append(StepTrace(**{name: record[name] for name in _FIELDS}))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
    return traces
