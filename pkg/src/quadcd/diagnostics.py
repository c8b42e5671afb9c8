"""Cumulative-hallucination analysis over decode traces.

Projects per-step divergences out of traces into time series, detects
the step where a series collapses below a threshold (the decoupled
branches keep diverging long after the plain branch has collapsed into
the text-only distribution), and aggregates onset positions into
sentence-fraction histograms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from quadcd.distcore import LN2
from quadcd.engine import StepTrace

SERIES_KINDS = ("original_vs_non", "decoupled_vs_non")

# numerical slack on the closed [0, ln 2] range
_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class JsdSeries:
    """Per-step Jensen-Shannon divergences, in nats."""

    kind: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in SERIES_KINDS:
            raise ValueError(f"unknown series kind {self.kind!r}")
        if not self.values:
            raise ValueError("series must be non-empty")
        for i, v in enumerate(self.values):
            if not math.isfinite(v) or v < -_BOUND_TOL or v > LN2 + _BOUND_TOL:
                raise ValueError(f"series value {v!r} at step {i + 1} outside [0, ln 2]")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class OnsetReport:
    """Result of scanning a series for sustained collapse below epsilon.

    onset_step is 1-based; it and onset_fraction are None when no window
    of window_k consecutive values stays below epsilon.  window_too_long
    marks reports where window_k exceeds the series length, which makes
    an onset impossible by construction.
    """

    onset_step: int | None
    onset_fraction: float | None
    epsilon: float
    window_k: int
    series_length: int
    window_too_long: bool = False

    def __post_init__(self):
        if (self.onset_step is None) != (self.onset_fraction is None):
            raise ValueError("onset_step and onset_fraction must be set together")
        if self.onset_step is not None:
            if not 1 <= self.onset_step <= self.series_length:
                raise ValueError(f"onset_step {self.onset_step} outside series")
            expected = self.onset_step / self.series_length
            if abs(self.onset_fraction - expected) > 1e-12:
                raise ValueError("onset_fraction must equal onset_step / length")


@dataclass(frozen=True)
class OnsetHistogram:
    """Counts of onset fractions over equal-width bins of (0, 1].

    Bin placement: index = min(bins - 1, floor(fraction * bins)), so the
    bins are half-open with the top boundary clamped into the last bin.
    Reports without an onset land in the separate no_onset bucket.
    """

    counts: tuple[int, ...]
    no_onset: int

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts) + self.no_onset


def jsd_series(traces: list[StepTrace], which: str) -> JsdSeries:
    """Project one divergence column out of a trace list, in step order."""
    if which not in SERIES_KINDS:
        raise ValueError(f"unknown series kind {which!r}; expected one of {SERIES_KINDS}")
    if not traces:
        raise ValueError("cannot build a series from an empty trace list")
    if which == "original_vs_non":
        values = tuple(t.d_orig_non for t in traces)
    else:
        values = tuple(t.d_dec_non for t in traces)
    return JsdSeries(kind=which, values=values)


def detect_onset(series: JsdSeries, epsilon: float = 0.01, window_k: int = 3) -> OnsetReport:
    """First 1-based step where window_k consecutive values all drop
    below epsilon; no onset when no such window exists."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if window_k < 1:
        raise ValueError(f"window_k must be >= 1, got {window_k}")
    n = len(series)
    if window_k > n:
        return OnsetReport(
            onset_step=None,
            onset_fraction=None,
            epsilon=epsilon,
            window_k=window_k,
            series_length=n,
            window_too_long=True,
        )
    values = series.values
    run = 0
    for i, v in enumerate(values):
        run = run + 1 if v < epsilon else 0
        if run >= window_k:
            step = i - window_k + 2  # 1-based start of the qualifying window
            return OnsetReport(
                onset_step=step,
                onset_fraction=step / n,
                epsilon=epsilon,
                window_k=window_k,
                series_length=n,
            )
    return OnsetReport(
        onset_step=None,
        onset_fraction=None,
        epsilon=epsilon,
        window_k=window_k,
        series_length=n,
    )


def onset_histogram(reports: list[OnsetReport], bins: int = 10) -> OnsetHistogram:
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if not reports:
        raise ValueError("cannot histogram an empty report list")
    counts = [0] * bins
    no_onset = 0
    for report in reports:
        if report.onset_fraction is None:
            no_onset += 1
        else:
            index = min(bins - 1, math.floor(report.onset_fraction * bins))
            counts[index] += 1
    return OnsetHistogram(counts=tuple(counts), no_onset=no_onset)


# ---------------------------------------------------------------------------
# comma-separated tables for plotting tools
# ---------------------------------------------------------------------------


def format_series_table(series: JsdSeries) -> str:
    lines = ["step,jsd_nats"]
    for i, v in enumerate(series.values, start=1):
        lines.append(f"{i},{v!r}")
    return "\n".join(lines) + "\n"


def format_onset_table(reports: list[OnsetReport]) -> str:
    lines = ["index,onset_step,onset_fraction,epsilon,window_k,series_length,window_too_long"]
    for i, r in enumerate(reports, start=1):
        step = "" if r.onset_step is None else str(r.onset_step)
        frac = "" if r.onset_fraction is None else repr(r.onset_fraction)
        lines.append(
            f"{i},{step},{frac},{r.epsilon!r},{r.window_k},{r.series_length},"
            f"{str(r.window_too_long).lower()}"
        )
    return "\n".join(lines) + "\n"


def format_histogram_table(hist: OnsetHistogram) -> str:
    lines = ["bin_low,bin_high,count"]
    for i, count in enumerate(hist.counts):
        lines.append(f"{i / hist.bins!r},{(i + 1) / hist.bins!r},{count}")
    lines.append(f"no_onset,,{hist.no_onset}")
    return "\n".join(lines) + "\n"
