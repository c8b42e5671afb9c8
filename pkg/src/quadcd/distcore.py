"""Probability-distribution primitives shared by the whole engine.

Everything here is a pure function over immutable values: 64-bit floats,
natural logarithms (all divergences are in nats).  The heavy loops live in
`quadcd.kernels`, which picks the compiled extension when it is built and
the numpy fallback otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from quadcd import kernels
from quadcd.errors import AbsoluteContinuityError, DistributionError

TokenId = int

LN2 = float(np.log(2.0))


def _as_float64(values, what: str) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DistributionError(f"{what} must be one-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class LogitVector:
    """Raw per-token scores over one vocabulary."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_float64(self.values, "logits")
        if arr.shape[0] < 2:
            raise DistributionError(f"vocab size must be >= 2, got {arr.shape[0]}")
        finite = np.isfinite(arr)
        if not finite.all():
            idx = int(np.argmin(finite))
            raise DistributionError(f"non-finite logit at index {idx}: {arr[idx]}")
        object.__setattr__(self, "values", arr)

    @property
    def vocab_size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ProbDist:
    """Normalized distribution over one vocabulary (sums to 1 within 1e-9)."""

    probs: np.ndarray

    def __post_init__(self):
        arr = _as_float64(self.probs, "probabilities")
        if arr.shape[0] < 2:
            raise DistributionError(f"vocab size must be >= 2, got {arr.shape[0]}")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            idx = int(np.argmax((arr < 0.0) | (arr > 1.0)))
            raise DistributionError(f"probability out of [0,1] at index {idx}: {arr[idx]}")
        total = float(arr.sum())
        if abs(total - 1.0) > 1e-9:
            raise DistributionError(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "probs", arr)

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[0]


def _check_same_length(p: ProbDist, q: ProbDist) -> None:
    if p.vocab_size != q.vocab_size:
        raise DistributionError(
            f"distribution length mismatch: {p.vocab_size} vs {q.vocab_size}"
        )


def softmax(logits: LogitVector) -> ProbDist:
    """Max-subtracted softmax; order-preserving by construction."""
    return ProbDist(kernels.softmax(logits.values))


def kl_divergence(p: ProbDist, q: ProbDist) -> float:
    """KL(P||Q) in nats, with 0*log(0/q) = 0.

    Raises AbsoluteContinuityError when some P(i) > 0 has Q(i) = 0 (the
    divergence would be infinite).  This cannot happen for the KL terms
    inside js_divergence because the midpoint mixture dominates both sides.
    """
    _check_same_length(p, q)
    val = kernels.kl_div(p.probs, q.probs)
    if val == float("inf"):
        bad = np.flatnonzero((p.probs > 0.0) & (q.probs == 0.0))
        raise AbsoluteContinuityError(
            f"KL(P||Q) infinite: P({int(bad[0])}) > 0 but Q({int(bad[0])}) = 0"
        )
    return val


def js_divergence(p: ProbDist, q: ProbDist) -> float:
    """Jensen-Shannon divergence in nats: 0.5*KL(P||M) + 0.5*KL(Q||M), M = (P+Q)/2.

    Symmetric, in [0, ln 2], exactly 0 when p == q elementwise.
    """
    _check_same_length(p, q)
    return kernels.js_div(p.probs, q.probs)


@dataclass(frozen=True)
class SamplingSpec:
    """Token-selection strategy: greedy argmax or seeded categorical draw."""

    kind: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "categorical"):
            raise DistributionError(f"unknown sampling kind: {self.kind!r}")
        if self.kind == "categorical" and not self.temperature > 0.0:
            raise DistributionError(
                "categorical sampling needs temperature > 0 (use greedy for argmax)"
            )


class TokenSampler:
    """Stateful sampler: the RNG stream advances across calls, so a decode
    is reproducible given the same seed and call sequence."""

    def __init__(self, spec: SamplingSpec):
        self.spec = spec
        self._rng = np.random.default_rng(spec.seed)

    def sample(self, dist: ProbDist) -> TokenId:
        if self.spec.kind == "greedy":
            return int(np.argmax(dist.probs))  # ties break to the lowest index
        p = dist.probs
        if self.spec.temperature != 1.0:
            # p^(1/T) renormalized == softmax(log p / T) on the support
            with np.errstate(divide="ignore"):
                logp = np.where(p > 0.0, np.log(p), -np.inf)
            scaled = logp / self.spec.temperature
            scaled -= scaled.max()
            w = np.exp(scaled)
            p = w / w.sum()
        u = self._rng.random()
        idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
        return min(idx, dist.vocab_size - 1)


def sample_token(dist: ProbDist, spec: SamplingSpec) -> TokenId:
    """One-shot draw: a fresh sampler seeded from the spec."""
    return TokenSampler(spec).sample(dist)
