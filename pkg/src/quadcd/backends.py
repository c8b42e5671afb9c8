"""Channel-logits suppliers: session plumbing plus two built-in backends.

The scripted backend replays tabulated logits verbatim; the grounded-toy
backend computes logits from a bigram language table mixed with per-object
visual evidence, so channel differences are hand-checkable.  Both are
immutable after load and deterministic, which makes them usable as desk-
scale stand-ins for a real model server.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from quadcd.decoupling import (
    SegmentationSet,
    dual_object_ids,
    load_segmentation,
    parse_segmentation,
    rank_segments,
)
from quadcd.distcore import LogitVector, TokenId
from quadcd.engine import CHANNELS, ChannelLogits
from quadcd.errors import ProtocolError, ScenarioError

PROTOCOL_VERSION = 1


def vocab_hash(vocab: tuple[str, ...]) -> str:
    digest = hashlib.sha256("\x00".join(vocab).encode("utf-8"))
    return digest.hexdigest()


@dataclass(frozen=True)
class SessionRequest:
    session_id: str
    vocab: tuple[str, ...]
    prompt_tokens: tuple[TokenId, ...] = ()
    segmentation_ref: str | SegmentationSet | None = None
    top_m: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "prompt_tokens", tuple(self.prompt_tokens))
        if not self.session_id:
            raise ProtocolError("empty session_id")
        if not self.vocab:
            raise ProtocolError("empty vocab in session request")
        for tok in self.prompt_tokens:
            if not (0 <= tok < len(self.vocab)):
                raise ProtocolError(f"prompt token {tok} outside vocab of {len(self.vocab)}")
        if self.top_m is not None and self.top_m < 1:
            raise ProtocolError(f"top_m must be >= 1, got {self.top_m}")


class Session:
    """One decode session: enforces strictly ordered prefix extensions."""

    def __init__(self, backend: "Backend", request: SessionRequest):
        self.backend = backend
        self.request = request
        self._served: tuple[TokenId, ...] | None = None
        self.closed = False

    @property
    def vocab(self) -> tuple[str, ...]:
        return self.backend.vocab

    def step_logits(self, prefix: list[TokenId]) -> ChannelLogits:
        if self.closed:
            raise ProtocolError(f"session {self.request.session_id!r} is closed")
        prefix_t = tuple(prefix)
        if self._served is None:
            if prefix_t != ():
                raise ProtocolError(
                    f"session {self.request.session_id!r}: first step must use the "
                    f"empty prefix, got length {len(prefix_t)}"
                )
        elif not (
            len(prefix_t) == len(self._served) + 1 and prefix_t[:-1] == self._served
        ):
            raise ProtocolError(
                f"session {self.request.session_id!r}: out-of-order prefix "
                f"(served {len(self._served)} tokens, got {len(prefix_t)})"
            )
        for tok in prefix_t:
            if not (0 <= tok < len(self.vocab)):
                raise ProtocolError(f"prefix token {tok} outside vocab")
        logits = self._compute(prefix_t)
        self._served = prefix_t
        return logits

    def _compute(self, prefix: tuple[TokenId, ...]) -> ChannelLogits:
        raise NotImplementedError

    def close(self) -> None:
        self.closed = True


class Backend:
    """Base: vocabulary, session registry, duplicate-id rejection."""

    name = "backend"

    def __init__(self, vocab: tuple[str, ...]):
        self.vocab = tuple(vocab)
        self._lock = threading.Lock()
        self._session_ids: set[str] = set()

    @property
    def vocab_hash(self) -> str:
        return vocab_hash(self.vocab)

    def open_session(self, request: SessionRequest) -> Session:
        if tuple(request.vocab) != self.vocab:
            raise ProtocolError(
                f"vocab mismatch: request has {len(request.vocab)} tokens, "
                f"backend serves {len(self.vocab)}"
            )
        with self._lock:
            if request.session_id in self._session_ids:
                raise ProtocolError(f"duplicate session_id {request.session_id!r}")
            self._session_ids.add(request.session_id)
        return self._make_session(request)

    def _make_session(self, request: SessionRequest) -> Session:
        raise NotImplementedError


def _resolve_segmentation(ref: str | SegmentationSet) -> SegmentationSet:
    if isinstance(ref, SegmentationSet):
        return ref
    return load_segmentation(ref)


# ---------------------------------------------------------------------------
# scripted backend: replay tabulated logits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptedScenario:
    vocab: tuple[str, ...]
    steps: int
    stop_token: TokenId
    table: dict[tuple[int, str], np.ndarray] = field(repr=False)

    def logits_at(self, step: int, channel: str) -> np.ndarray:
        return self.table[(step, channel)]


class ScriptedSession(Session):
    def _compute(self, prefix: tuple[TokenId, ...]) -> ChannelLogits:
        scenario = self.backend.scenario
        step = len(prefix)
        if step >= scenario.steps:
            raise ProtocolError(
                f"scripted scenario exhausted: step {step} beyond {scenario.steps} steps"
            )
        return ChannelLogits(
            original=LogitVector(scenario.logits_at(step, "original")),
            dual=LogitVector(scenario.logits_at(step, "dual")),
            residual=LogitVector(scenario.logits_at(step, "residual")),
            non_visual=LogitVector(scenario.logits_at(step, "non_visual")),
        )


class ScriptedBackend(Backend):
    name = "scripted"

    def __init__(self, scenario: ScriptedScenario):
        super().__init__(scenario.vocab)
        self.scenario = scenario

    def _make_session(self, request: SessionRequest) -> Session:
        if request.segmentation_ref is not None:
            _resolve_segmentation(request.segmentation_ref)  # validate only
        return ScriptedSession(self, request)


def parse_scripted(text: str, source: str = "<string>") -> ScriptedScenario:
    """Parse a scripted scenario.

    Header lines `vocab ...`, `steps N`, `stop TOKEN`; one data line per
    (step, channel): `<step> <channel> <v1> ... <vV>`.  Every channel of
    every step up to the declared count must be present.
    """
    vocab: tuple[str, ...] | None = None
    steps: int | None = None
    stop: str | None = None
    data: dict[tuple[int, str], np.ndarray] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        key = fields[0]
        if key == "vocab":
            if len(fields) < 2:
                raise ScenarioError(f"{source}:{line_no}: empty vocab")
            vocab = tuple(fields[1:])
            if len(set(vocab)) != len(vocab):
                raise ScenarioError(f"{source}:{line_no}: duplicate vocab entries")
        elif key == "steps":
            try:
                steps = int(fields[1])
            except (IndexError, ValueError):
                raise ScenarioError(f"{source}:{line_no}: bad steps line") from None
        elif key == "stop":
            if len(fields) != 2:
                raise ScenarioError(f"{source}:{line_no}: stop takes one token")
            stop = fields[1]
        else:
            try:
                step = int(key)
            except ValueError:
                raise ScenarioError(f"{source}:{line_no}: unknown line {key!r}") from None
            if vocab is None:
                raise ScenarioError(f"{source}:{line_no}: data line before vocab header")
            if len(fields) < 2 or fields[1] not in CHANNELS:
                raise ScenarioError(
                    f"{source}:{line_no}: channel must be one of {CHANNELS}"
                )
            channel = fields[1]
            try:
                values = np.array([float(v) for v in fields[2:]], dtype=np.float64)
            except ValueError:
                raise ScenarioError(f"{source}:{line_no}: non-numeric logit") from None
            if values.shape[0] != len(vocab):
                raise ScenarioError(
                    f"{source}:{line_no}: {values.shape[0]} logits for vocab of {len(vocab)}"
                )
            if (step, channel) in data:
                raise ScenarioError(f"{source}:{line_no}: duplicate step {step} {channel}")
            data[(step, channel)] = values
    if vocab is None or steps is None or stop is None:
        raise ScenarioError(f"{source}: missing vocab/steps/stop header")
    if steps < 1:
        raise ScenarioError(f"{source}: steps must be >= 1")
    if stop not in vocab:
        raise ScenarioError(f"{source}: stop token {stop!r} not in vocab")
    for step in range(steps):
        for channel in CHANNELS:
            if (step, channel) not in data:
                raise ScenarioError(f"{source}: missing {channel} vector at step {step}")
    extra = [k for k in data if k[0] >= steps]
    if extra:
        raise ScenarioError(f"{source}: data beyond declared steps: {sorted(extra)}")
    return ScriptedScenario(
        vocab=vocab, steps=steps, stop_token=vocab.index(stop), table=data
    )


def load_scripted(path) -> ScriptedBackend:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return ScriptedBackend(parse_scripted(text, source=str(path)))


# ---------------------------------------------------------------------------
# grounded-toy backend: bigram prior + per-object visual evidence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundedToyScenario:
    """logits(tok | prefix, channel) = lambda_lang * bigram(last, tok)
    + lambda_vis * sum(evidence(tok, o) for o visible to the channel).

    The non-visual channel always uses zero visual weight; the original
    channel sees every object in the evidence table; dual/residual see
    their declared (or decoupling-derived) object sets.
    """

    vocab: tuple[str, ...]
    bigram: dict[tuple[str, str], float]
    evidence: dict[tuple[str, str], float]
    visibility: dict[str, frozenset[str]]
    lambda_lang: float
    lambda_vis: float
    prompt: tuple[str, ...]
    ground_truth: str
    hallucination: str
    stop: str

    def __post_init__(self):
        vocab_set = set(self.vocab)
        for (prev, nxt) in self.bigram:
            if prev not in vocab_set or nxt not in vocab_set:
                raise ScenarioError(f"bigram entry ({prev!r}, {nxt!r}) not in vocab")
        for (tok, _obj) in self.evidence:
            if tok not in vocab_set:
                raise ScenarioError(f"evidence token {tok!r} not in vocab")
        for word in self.prompt:
            if word not in vocab_set:
                raise ScenarioError(f"prompt token {word!r} not in vocab")
        for name in (self.ground_truth, self.hallucination, self.stop):
            if name not in vocab_set:
                raise ScenarioError(f"planted/stop token {name!r} not in vocab")
        if not self.prompt:
            raise ScenarioError("prompt must be non-empty (bigram context needs a start)")
        if self.lambda_lang < 0 or self.lambda_vis < 0:
            raise ScenarioError("lambda weights must be >= 0")

    @property
    def all_objects(self) -> frozenset[str]:
        return frozenset(obj for (_tok, obj) in self.evidence)

    @property
    def stop_token(self) -> TokenId:
        return self.vocab.index(self.stop)

    @property
    def prompt_tokens(self) -> tuple[TokenId, ...]:
        return tuple(self.vocab.index(w) for w in self.prompt)


class GroundedToySession(Session):
    def __init__(self, backend: "GroundedToyBackend", request: SessionRequest,
                 visibility: dict[str, frozenset[str]]):
        super().__init__(backend, request)
        self._visibility = visibility
        prompt = request.prompt_tokens or backend.scenario.prompt_tokens
        self._prompt = tuple(prompt)
        if not self._prompt:
            raise ProtocolError("grounded-toy session needs a non-empty prompt")

    def channel_logits_row(self, channel: str, prev: str) -> np.ndarray:
        scenario = self.backend.scenario
        lam_vis = 0.0 if channel == "non_visual" else scenario.lambda_vis
        visible = self._visibility.get(channel, frozenset())
        values = np.empty(len(scenario.vocab), dtype=np.float64)
        for i, tok in enumerate(scenario.vocab):
            score = scenario.lambda_lang * scenario.bigram.get((prev, tok), 0.0)
            if lam_vis != 0.0:
                for obj in sorted(visible):
                    score += lam_vis * scenario.evidence.get((tok, obj), 0.0)
            values[i] = score
        return values

    def _compute(self, prefix: tuple[TokenId, ...]) -> ChannelLogits:
        scenario = self.backend.scenario
        context = self._prompt + prefix
        prev = scenario.vocab[context[-1]]
        rows = {ch: self.channel_logits_row(ch, prev) for ch in CHANNELS}
        return ChannelLogits(
            original=LogitVector(rows["original"]),
            dual=LogitVector(rows["dual"]),
            residual=LogitVector(rows["residual"]),
            non_visual=LogitVector(rows["non_visual"]),
        )


class GroundedToyBackend(Backend):
    name = "grounded-toy"

    def __init__(self, scenario: GroundedToyScenario):
        super().__init__(scenario.vocab)
        self.scenario = scenario

    def _make_session(self, request: SessionRequest) -> Session:
        visibility = dict(self.scenario.visibility)
        visibility["original"] = self.scenario.all_objects
        visibility["non_visual"] = frozenset()
        if request.segmentation_ref is not None:
            seg = _resolve_segmentation(request.segmentation_ref)
            if request.top_m is None:
                raise ProtocolError("segmentation_ref given without top_m")
            exposed = dual_object_ids(seg, request.top_m)
            remaining = [m.id for m in rank_segments(seg)[request.top_m:]]
            visibility["dual"] = frozenset(exposed)
            visibility["residual"] = frozenset(remaining) | {seg.background.id}
        return GroundedToySession(self, request, visibility)


def parse_grounded_toy(text: str, source: str = "<string>") -> GroundedToyScenario:
    """Parse a grounded-toy scenario file.

    Lines: `vocab ...`, `lambda_lang X`, `lambda_vis X`, `prompt w1 w2 ...`,
    `ground_truth TOKEN`, `hallucination TOKEN`, `stop TOKEN`,
    `bigram PREV NEXT SCORE`, `evidence TOKEN OBJECT SCORE`,
    `visible CHANNEL OBJ1 OBJ2 ...` (channels: dual, residual).
    """
    vocab: tuple[str, ...] | None = None
    bigram: dict[tuple[str, str], float] = {}
    evidence: dict[tuple[str, str], float] = {}
    visibility: dict[str, frozenset[str]] = {}
    scalars: dict[str, float] = {}
    singles: dict[str, str] = {}
    prompt: tuple[str, ...] = ()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        key = fields[0]
        try:
            if key == "vocab":
                vocab = tuple(fields[1:])
                if not vocab or len(set(vocab)) != len(vocab):
                    raise ScenarioError(f"{source}:{line_no}: bad vocab line")
            elif key in ("lambda_lang", "lambda_vis"):
                scalars[key] = float(fields[1])
            elif key == "prompt":
                prompt = tuple(fields[1:])
            elif key in ("ground_truth", "hallucination", "stop"):
                (singles[key],) = fields[1:]
            elif key == "bigram":
                prev, nxt, score = fields[1], fields[2], float(fields[3])
                bigram[(prev, nxt)] = score
            elif key == "evidence":
                tok, obj, score = fields[1], fields[2], float(fields[3])
                evidence[(tok, obj)] = score
            elif key == "visible":
                channel = fields[1]
                if channel not in ("dual", "residual"):
                    raise ScenarioError(
                        f"{source}:{line_no}: visibility is declared for dual/residual only"
                    )
                visibility[channel] = frozenset(fields[2:])
            else:
                raise ScenarioError(f"{source}:{line_no}: unknown line {key!r}")
        except ScenarioError:
            raise
        except (IndexError, ValueError):
            raise ScenarioError(f"{source}:{line_no}: malformed {key!r} line") from None
    if vocab is None:
        raise ScenarioError(f"{source}: missing vocab")
    missing = [k for k in ("lambda_lang", "lambda_vis") if k not in scalars]
    missing += [k for k in ("ground_truth", "hallucination", "stop") if k not in singles]
    if missing or not prompt:
        raise ScenarioError(f"{source}: missing {missing or ['prompt']}")
    return GroundedToyScenario(
        vocab=vocab,
        bigram=bigram,
        evidence=evidence,
        visibility=visibility,
        lambda_lang=scalars["lambda_lang"],
        lambda_vis=scalars["lambda_vis"],
        prompt=prompt,
        ground_truth=singles["ground_truth"],
        hallucination=singles["hallucination"],
        stop=singles["stop"],
    )


def load_grounded_toy(path) -> GroundedToyBackend:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return GroundedToyBackend(parse_grounded_toy(text, source=str(path)))
