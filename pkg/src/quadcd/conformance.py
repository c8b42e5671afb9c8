"""Conformance checks for wire-protocol backends.

A backend passes when it completes the handshake, serves a consistent
vocabulary, rejects duplicate sessions and out-of-order prefixes, and
answers identical request sequences with byte-identical logits frames.
The suite needs a factory producing a fresh connection per call so the
determinism check can replay against an independent connection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

from quadcd.backends import PROTOCOL_VERSION, SessionRequest, vocab_hash
from quadcd.errors import ProtocolError
from quadcd.wire import WireClient

_HEX = set("0123456789abcdef")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ConformanceReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def format(self) -> str:
        lines = [
            f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks
        ]
        verdict = "CONFORMANT" if self.passed else "NOT CONFORMANT"
        lines.append(f"{verdict} ({sum(c.passed for c in self.checks)}/{len(self.checks)} checks)")
        return "\n".join(lines)


def _raw_step(client: WireClient, session_id: str, prefix: list[int]) -> dict:
    reply = client.request({"type": "step", "session_id": session_id, "prefix": prefix})
    if reply.get("type") == "error":
        raise ProtocolError(f"[{reply.get('code')}] {reply.get('message')}")
    if reply.get("type") != "logits":
        raise ProtocolError(f"expected logits, got {reply.get('type')!r}")
    return reply


def run_conformance(make_client: Callable[[], WireClient]) -> ConformanceReport:
    checks: list[CheckResult] = []

    def record(name: str, passed: bool, detail: str) -> bool:
        checks.append(CheckResult(name, passed, detail))
        return passed

    client = make_client()
    vocab: tuple[str, ...] = ()
    steps_budget = 1
    try:
        # handshake
        try:
            hello = client.hello()
            ok = (
                hello.get("protocol") == PROTOCOL_VERSION
                and isinstance(hello.get("vocab_size"), int)
                and hello["vocab_size"] >= 2
                and isinstance(hello.get("vocab_hash"), str)
                and len(hello["vocab_hash"]) == 64
                and set(hello["vocab_hash"]) <= _HEX
            )
            record(
                "handshake",
                ok,
                f"protocol {hello.get('protocol')}, vocab_size {hello.get('vocab_size')}"
                if ok
                else f"malformed hello reply: {hello}",
            )
        except ProtocolError as exc:
            record("handshake", False, str(exc))
            return ConformanceReport(tuple(checks))

        # vocab consistency
        try:
            vocab = client.fetch_vocab()
            ok = (
                len(vocab) == hello["vocab_size"]
                and vocab_hash(vocab) == hello["vocab_hash"]
            )
            record(
                "vocab",
                ok,
                f"{len(vocab)} tokens, hash matches"
                if ok
                else "vocab length or hash disagrees with handshake",
            )
        except ProtocolError as exc:
            record("vocab", False, str(exc))
            return ConformanceReport(tuple(checks))
        if not vocab:
            return ConformanceReport(tuple(checks))

        # open / logits shape / close
        try:
            opened = client.open(SessionRequest(session_id="conf-open", vocab=vocab))
            steps_budget = opened.get("steps") or 2
            reply = _raw_step(client, "conf-open", [])
            channels = reply.get("channels")
            ok = isinstance(channels, dict) and set(channels) == {
                "original",
                "dual",
                "residual",
                "non_visual",
            }
            if ok:
                for name, text in channels.items():
                    values = [float(p) for p in text.split()]
                    if len(values) != len(vocab) or not all(map(math.isfinite, values)):
                        ok = False
                        break
            client.close_session("conf-open")
            record(
                "session",
                ok,
                "opened, served four finite channel vectors, closed"
                if ok
                else "logits reply malformed or non-finite",
            )
        except ProtocolError as exc:
            record("session", False, str(exc))

        # duplicate session rejection
        try:
            client.open(SessionRequest(session_id="conf-dup", vocab=vocab))
            try:
                client.open(SessionRequest(session_id="conf-dup", vocab=vocab))
                record("duplicate-session", False, "second open of the same id accepted")
            except ProtocolError as exc:
                record("duplicate-session", True, f"rejected ({exc})")
        except ProtocolError as exc:
            record("duplicate-session", False, f"setup failed: {exc}")

        # ordered prefixes
        try:
            client.open(SessionRequest(session_id="conf-order", vocab=vocab))
            _raw_step(client, "conf-order", [])
            try:
                _raw_step(client, "conf-order", [0, 0])
                record("ordered-prefixes", False, "prefix jump of two accepted")
            except ProtocolError as exc:
                record("ordered-prefixes", True, f"jump rejected ({exc})")
        except ProtocolError as exc:
            record("ordered-prefixes", False, f"setup failed: {exc}")
    finally:
        try:
            client.bye()
        except Exception:
            pass

    # determinism across connections
    try:
        replays = []
        n_steps = max(1, min(2, steps_budget))
        for tag in ("a", "b"):
            c = make_client()
            try:
                c.hello()
                c.open(SessionRequest(session_id=f"conf-det-{tag}", vocab=vocab))
                frames = []
                prefix: list[int] = []
                for _ in range(n_steps):
                    reply = _raw_step(c, f"conf-det-{tag}", prefix)
                    frames.append(json.dumps(reply["channels"], sort_keys=True))
                    prefix = prefix + [0]
                replays.append(frames)
            finally:
                try:
                    c.bye()
                except Exception:
                    pass
        checks.append(
            CheckResult(
                "determinism",
                replays[0] == replays[1],
                f"{n_steps} step(s) byte-identical across two connections"
                if replays[0] == replays[1]
                else "replayed logits differ between connections",
            )
        )
    except ProtocolError as exc:
        checks.append(CheckResult("determinism", False, str(exc)))

    return ConformanceReport(tuple(checks))
