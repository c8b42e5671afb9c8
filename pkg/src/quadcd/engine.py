"""Per-token decision core.

Each step works on four logit vectors from the backend: the original
image channel, the two complementary decoupled channels (dual/residual)
and a non-visual text-only channel.  Screening picks the decoupled
channel farther (in JSD) from the non-visual one; the combiner then
either contrastively subtracts the original distribution (alpha * z - v,
when the decoupled channel is at least as far from the non-visual as the
original is) or contrastively enhances the weighted original (beta * v +
z) to restore diversity.  The sampled token is appended to the shared
prefix of all four channel contexts by the backend session.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Protocol

from quadcd.distcore import (
    LogitVector,
    ProbDist,
    SamplingSpec,
    TokenId,
    TokenSampler,
    js_divergence,
    softmax,
)
from quadcd.errors import DistributionError, ProtocolError, ScenarioError

DUAL = "dual"
RESIDUAL = "residual"
SUBTRACT = "subtract"
ENHANCE = "enhance"

CHANNELS = ("original", "dual", "residual", "non_visual")


@dataclass(frozen=True)
class ChannelLogits:
    """The four per-step logit vectors, all over one vocabulary."""

    original: LogitVector
    dual: LogitVector
    residual: LogitVector
    non_visual: LogitVector

    def __post_init__(self):
        sizes = {
            self.original.vocab_size,
            self.dual.vocab_size,
            self.residual.vocab_size,
            self.non_visual.vocab_size,
        }
        if len(sizes) != 1:
            raise DistributionError(f"channel vocab sizes differ: {sorted(sizes)}")

    @property
    def vocab_size(self) -> int:
        return self.original.vocab_size


@dataclass(frozen=True)
class DecodeConfig:
    alpha: float = 1.2
    beta: float = 3.0
    top_m_fraction: float = 0.05
    max_tokens: int = 256
    stop_token: TokenId | None = None
    sampling: SamplingSpec = SamplingSpec()

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not (0.0 < self.top_m_fraction <= 1.0):
            raise ValueError(f"top_m_fraction must be in (0, 1], got {self.top_m_fraction}")
        if self.max_tokens < 0:
            raise ValueError(f"max_tokens must be >= 0, got {self.max_tokens}")


@dataclass(frozen=True)
class StepTrace:
    """Replayable audit record for one decode step.  Steps are 1-based,
    matching onset positions reported by the diagnostics."""

    step: int
    d_dual_non: float
    d_res_non: float
    d_dec_non: float
    d_orig_non: float
    chosen_channel: str
    branch: str
    token: TokenId

    def __post_init__(self):
        if self.chosen_channel not in (DUAL, RESIDUAL):
            raise ValueError(f"bad chosen_channel {self.chosen_channel!r}")
        if self.branch not in (SUBTRACT, ENHANCE):
            raise ValueError(f"bad branch {self.branch!r}")
        if self.d_dec_non != max(self.d_dual_non, self.d_res_non):
            raise ValueError(
                f"d_dec_non={self.d_dec_non!r} is not max(d_dual_non, d_res_non)"
            )
        if (self.chosen_channel == DUAL) != (self.d_dual_non >= self.d_res_non):
            raise ValueError("chosen_channel does not attain the screening max")
        if (self.branch == SUBTRACT) != (self.d_dec_non >= self.d_orig_non):
            raise ValueError("branch inconsistent with d_dec_non vs d_orig_non")


class ScreenResult(NamedTuple):
    chosen: str
    d_dual_non: float
    d_res_non: float


class CombineResult(NamedTuple):
    combined: LogitVector
    branch: str
    d_dec_non: float
    d_orig_non: float


def screen(ch: ChannelLogits) -> ScreenResult:
    """Pick the decoupled channel farther from the non-visual one (ties -> dual)."""
    non = softmax(ch.non_visual)
    d_dual = js_divergence(softmax(ch.dual), non)
    d_res = js_divergence(softmax(ch.residual), non)
    chosen = DUAL if d_dual >= d_res else RESIDUAL
    return ScreenResult(chosen, d_dual, d_res)


def adapt_combine(ch: ChannelLogits, chosen: str, cfg: DecodeConfig) -> CombineResult:
    """Combine the screened channel z with the original channel v.

    subtract branch (decoupled at least as far from non-visual as the
    original): combined = alpha * z - v.  enhance branch (decoupled
    closer; diversity at risk): combined = beta * v + z.
    """
    if chosen not in (DUAL, RESIDUAL):
        raise ValueError(f"bad chosen channel {chosen!r}")
    z = ch.dual if chosen == DUAL else ch.residual
    non = softmax(ch.non_visual)
    d_dec = js_divergence(softmax(z), non)
    d_orig = js_divergence(softmax(ch.original), non)
    if d_dec >= d_orig:
        branch = SUBTRACT
        combined = LogitVector(cfg.alpha * z.values - ch.original.values)
    else:
        branch = ENHANCE
        combined = LogitVector(cfg.beta * ch.original.values + z.values)
    return CombineResult(combined, branch, d_dec, d_orig)


def decode_step(
    ch: ChannelLogits,
    cfg: DecodeConfig,
    step: int,
    sampler: TokenSampler | None = None,
) -> tuple[TokenId, StepTrace]:
    """screen -> adapt_combine -> softmax -> sample, with a full trace."""
    if sampler is None:
        sampler = TokenSampler(cfg.sampling)
    chosen, d_dual, d_res = screen(ch)
    combined, branch, d_dec, d_orig = adapt_combine(ch, chosen, cfg)
    token = sampler.sample(softmax(combined))
    trace = StepTrace(
        step=step,
        d_dual_non=d_dual,
        d_res_non=d_res,
        d_dec_non=d_dec,
        d_orig_non=d_orig,
        chosen_channel=chosen,
        branch=branch,
        token=token,
    )
    return token, trace


class StepSource(Protocol):
    """What decode() needs from a backend session."""

    def step_logits(self, prefix: list[TokenId]) -> ChannelLogits: ...


@dataclass(frozen=True)
class DecodeResult:
    tokens: list[TokenId]
    traces: list[StepTrace]
    truncated: bool = False
    truncation_reason: str | None = None


def decode(session: StepSource, cfg: DecodeConfig) -> DecodeResult:
    """Autoregressive loop: sample until stop_token or max_tokens.

    The stop token, when emitted, is included in the output and counts
    toward max_tokens; traces align 1:1 with tokens.  A backend failure
    mid-stream yields the partial result with an explicit truncation
    marker instead of raising.
    """
    sampler = TokenSampler(cfg.sampling)
    tokens: list[TokenId] = []
    traces: list[StepTrace] = []
    truncated = False
    reason: str | None = None
    while len(tokens) < cfg.max_tokens:
        try:
            ch = session.step_logits(tokens)
        except (ProtocolError, ScenarioError) as exc:
            truncated = True
            reason = str(exc)
            break
        token, trace = decode_step(ch, cfg, step=len(tokens) + 1, sampler=sampler)
        tokens.append(token)
        traces.append(trace)
        if cfg.stop_token is not None and token == cfg.stop_token:
            break
    return DecodeResult(tokens, traces, truncated, reason)
