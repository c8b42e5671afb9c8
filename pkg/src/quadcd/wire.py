"""Wire protocol for external channel-logits backends.

Framing: each message is one line of UTF-8 JSON prefixed by its byte
length — `<len> <json>\n` — over a local TCP socket or a stdio pipe.
One request/response pair per decode step carries all four channels, with
logits rendered as decimal text with 17 significant digits (exact 64-bit
round-trip, human-inspectable).  The handshake exchanges the protocol
version and a vocab hash; a dedicated `vocab` message lets clients fetch
the token list when they only hold the hash.

The engine never sends pixels: a session request carries a segmentation
reference (path or inline text) plus top_m, and the backend owns all
image handling.
"""

from __future__ import annotations

import json
import socket
import socketserver
import subprocess
import threading
from typing import BinaryIO

import numpy as np

from quadcd.backends import Backend, PROTOCOL_VERSION, Session, SessionRequest
from quadcd.decoupling import parse_segmentation
from quadcd.distcore import LogitVector, TokenId
from quadcd.engine import CHANNELS, ChannelLogits
from quadcd.errors import ProtocolError, ScenarioError, SegmentationError

MAX_FRAME = 64 * 1024 * 1024


def format_logits(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def parse_logits(text: str, vocab_size: int) -> np.ndarray:
    parts = text.split()
    if len(parts) != vocab_size:
        raise ProtocolError(f"expected {vocab_size} logits on the wire, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise ProtocolError(f"non-numeric logit on the wire: {exc}") from None


def write_frame(stream: BinaryIO, message: dict) -> None:
    payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
    stream.write(str(len(payload)).encode("ascii") + b" " + payload + b"\n")
    stream.flush()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> dict | None:
    """Read one frame; None on clean EOF at a frame boundary."""
    digits = b""
    while True:
        ch = stream.read(1)
        if ch == b"":
            if digits:
                raise ProtocolError("connection closed inside a frame header")
            return None
        if ch == b" ":
            break
        if not ch.isdigit():
            raise ProtocolError(f"bad frame header byte {ch!r}")
        digits += ch
        if len(digits) > 9:
            raise ProtocolError("frame header too long")
    if not digits:
        raise ProtocolError("empty frame length")
    length = int(digits)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    payload = _read_exact(stream, length)
    if _read_exact(stream, 1) != b"\n":
        raise ProtocolError("frame missing trailing newline")
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad frame payload: {exc}") from None
    if not isinstance(message, dict) or "type" not in message:
        raise ProtocolError("frame is not a typed object")
    return message


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------


def _error_frame(code: str, message: str, session_id: str | None = None) -> dict:
    frame = {"type": "error", "code": code, "message": message}
    if session_id is not None:
        frame["session_id"] = session_id
    return frame


class WireServer:
    """Serves one backend over framed streams; sessions are backend-global."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self._lock = threading.Lock()
        self._sessions: dict[str, Session] = {}

    def serve_stream(self, rstream: BinaryIO, wstream: BinaryIO) -> None:
        """Handle one connection until bye/EOF.  Errors are answered with
        error frames; only transport-level failures terminate the loop."""
        while True:
            try:
                message = read_frame(rstream)
            except ProtocolError:
                return
            if message is None:
                return
            try:
                reply = self._dispatch(message)
            except ProtocolError as exc:
                reply = _error_frame(_code_for(exc), str(exc), message.get("session_id"))
            except (ScenarioError, SegmentationError) as exc:
                reply = _error_frame("bad_request", str(exc), message.get("session_id"))
            try:
                write_frame(wstream, reply)
            except (OSError, ValueError):
                return
            if reply.get("type") == "bye":
                return

    def _dispatch(self, message: dict) -> dict:
        mtype = message["type"]
        if mtype == "hello":
            if message.get("protocol") != PROTOCOL_VERSION:
                raise ProtocolError(
                    f"handshake: protocol {message.get('protocol')!r} unsupported, "
                    f"server speaks {PROTOCOL_VERSION}"
                )
            return {
                "type": "hello",
                "protocol": PROTOCOL_VERSION,
                "backend": self.backend.name,
                "vocab_size": len(self.backend.vocab),
                "vocab_hash": self.backend.vocab_hash,
            }
        if mtype == "vocab":
            return {"type": "vocab", "vocab": list(self.backend.vocab)}
        if mtype == "open":
            return self._handle_open(message)
        if mtype == "step":
            return self._handle_step(message)
        if mtype == "close":
            sid = message.get("session_id")
            with self._lock:
                session = self._sessions.pop(sid, None)
            if session is None:
                raise ProtocolError(f"close for unknown session {sid!r}")
            session.close()
            return {"type": "closed", "session_id": sid}
        if mtype == "bye":
            return {"type": "bye"}
        raise ProtocolError(f"unknown message type {mtype!r}")

    def _handle_open(self, message: dict) -> dict:
        sid = message.get("session_id")
        if not isinstance(sid, str) or not sid:
            raise ProtocolError("open needs a non-empty session_id")
        seg_ref = message.get("segmentation_ref")
        seg_inline = message.get("segmentation_inline")
        if seg_inline is not None:
            seg_ref = parse_segmentation(seg_inline, source=f"<inline:{sid}>")
        request = SessionRequest(
            session_id=sid,
            vocab=tuple(message.get("vocab") or ()),
            prompt_tokens=tuple(message.get("prompt_tokens") or ()),
            segmentation_ref=seg_ref,
            top_m=message.get("top_m"),
        )
        session = self.backend.open_session(request)
        with self._lock:
            self._sessions[sid] = session
        reply = {"type": "opened", "session_id": sid}
        scenario = getattr(self.backend, "scenario", None)
        stop = getattr(scenario, "stop_token", None)
        if stop is not None:
            reply["stop_token"] = int(stop)
        steps = getattr(scenario, "steps", None)
        if steps is not None:
            reply["steps"] = int(steps)
        return reply

    def _handle_step(self, message: dict) -> dict:
        sid = message.get("session_id")
        with self._lock:
            session = self._sessions.get(sid)
        if session is None:
            raise ProtocolError(f"step for unknown session {sid!r}")
        prefix = message.get("prefix")
        if not isinstance(prefix, list) or not all(isinstance(t, int) for t in prefix):
            raise ProtocolError("step prefix must be a list of token ids")
        logits = session.step_logits(prefix)
        channels = {
            "original": format_logits(logits.original.values),
            "dual": format_logits(logits.dual.values),
            "residual": format_logits(logits.residual.values),
            "non_visual": format_logits(logits.non_visual.values),
        }
        return {"type": "logits", "session_id": sid, "channels": channels}


def _code_for(exc: ProtocolError) -> str:
    text = str(exc)
    if "duplicate session_id" in text:
        return "duplicate_session"
    if "vocab mismatch" in text:
        return "vocab_mismatch"
    if "out-of-order" in text or "first step" in text:
        return "out_of_order"
    if "exhausted" in text:
        return "exhausted"
    if "handshake" in text:
        return "handshake"
    if (
        "unknown message type" in text
        or "unknown session" in text
        or "needs a non-empty session_id" in text
        or "must be a list" in text
    ):
        return "bad_request"
    return "backend_error"


class _TCPHandler(socketserver.StreamRequestHandler):
    def handle(self):
        self.server.wire_server.serve_stream(self.rfile, self.wfile)


class _ThreadingTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(backend: Backend, host: str = "127.0.0.1", port: int = 0):
    """Create (not start) a threading TCP server; caller runs serve_forever().

    Returns the server object; its bound port is server.server_address[1].
    """
    server = _ThreadingTCPServer((host, port), _TCPHandler)
    server.wire_server = WireServer(backend)
    return server


def serve_stdio(backend: Backend, rstream: BinaryIO, wstream: BinaryIO) -> None:
    WireServer(backend).serve_stream(rstream, wstream)


# ---------------------------------------------------------------------------
# client side
# ---------------------------------------------------------------------------


class WireClient:
    """Framed-protocol client over a binary stream pair."""

    def __init__(self, rstream: BinaryIO, wstream: BinaryIO, *, on_close=None):
        self._r = rstream
        self._w = wstream
        self._on_close = on_close
        self.server_hello: dict | None = None

    def request(self, message: dict) -> dict:
        write_frame(self._w, message)
        reply = read_frame(self._r)
        if reply is None:
            raise ProtocolError("server closed the connection")
        return reply

    def request_ok(self, message: dict, expected: str) -> dict:
        reply = self.request(message)
        if reply.get("type") == "error":
            raise ProtocolError(
                f"backend error [{reply.get('code')}]: {reply.get('message')}"
            )
        if reply.get("type") != expected:
            raise ProtocolError(f"expected {expected!r} reply, got {reply.get('type')!r}")
        return reply

    def hello(self) -> dict:
        reply = self.request_ok({"type": "hello", "protocol": PROTOCOL_VERSION}, "hello")
        if reply.get("protocol") != PROTOCOL_VERSION:
            raise ProtocolError(f"handshake: server speaks protocol {reply.get('protocol')!r}")
        self.server_hello = reply
        return reply

    def fetch_vocab(self) -> tuple[str, ...]:
        reply = self.request_ok({"type": "vocab"}, "vocab")
        return tuple(reply["vocab"])

    def open(self, request: SessionRequest) -> dict:
        message = {
            "type": "open",
            "session_id": request.session_id,
            "vocab": list(request.vocab),
            "prompt_tokens": list(request.prompt_tokens),
        }
        ref = request.segmentation_ref
        if ref is not None:
            if isinstance(ref, str):
                message["segmentation_ref"] = ref
            else:
                from quadcd.decoupling import format_segmentation

                message["segmentation_inline"] = format_segmentation(ref)
        if request.top_m is not None:
            message["top_m"] = request.top_m
        return self.request_ok(message, "opened")

    def step(self, session_id: str, prefix: list[TokenId], vocab_size: int) -> ChannelLogits:
        reply = self.request_ok(
            {"type": "step", "session_id": session_id, "prefix": list(prefix)}, "logits"
        )
        channels = reply.get("channels")
        if not isinstance(channels, dict) or set(channels) != set(CHANNELS):
            raise ProtocolError("logits reply missing channels")
        arrays = {ch: parse_logits(channels[ch], vocab_size) for ch in CHANNELS}
        return ChannelLogits(
            original=LogitVector(arrays["original"]),
            dual=LogitVector(arrays["dual"]),
            residual=LogitVector(arrays["residual"]),
            non_visual=LogitVector(arrays["non_visual"]),
        )

    def close_session(self, session_id: str) -> None:
        self.request_ok({"type": "close", "session_id": session_id}, "closed")

    def bye(self) -> None:
        try:
            self.request({"type": "bye"})
        except ProtocolError:
            pass
        self.close()

    def close(self) -> None:
        if self._on_close is not None:
            self._on_close()
            self._on_close = None


class RemoteSession:
    """engine.StepSource over the wire."""

    def __init__(self, client: WireClient, request: SessionRequest, opened: dict):
        self.client = client
        self.request = request
        self.opened = opened
        self.vocab = request.vocab

    def step_logits(self, prefix: list[TokenId]) -> ChannelLogits:
        return self.client.step(self.request.session_id, prefix, len(self.vocab))

    def close(self) -> None:
        self.client.close_session(self.request.session_id)


class RemoteBackend:
    """Backend facade over one wire connection."""

    name = "remote"

    def __init__(self, client: WireClient):
        self.client = client
        hello = client.hello()
        self.vocab_hash = hello["vocab_hash"]
        self.vocab = client.fetch_vocab()
        from quadcd.backends import vocab_hash as compute_hash

        if compute_hash(self.vocab) != self.vocab_hash:
            raise ProtocolError("vocab hash mismatch between handshake and vocab fetch")

    def open_session(self, request: SessionRequest) -> RemoteSession:
        opened = self.client.open(request)
        return RemoteSession(self.client, request, opened)


def connect_tcp(host: str, port: int) -> WireClient:
    sock = socket.create_connection((host, port))
    rstream = sock.makefile("rb")
    wstream = sock.makefile("wb")

    def on_close():
        rstream.close()
        wstream.close()
        sock.close()

    return WireClient(rstream, wstream, on_close=on_close)


def spawn_stdio(cmd: list[str]) -> WireClient:
    """Spawn a backend subprocess speaking the protocol on its stdio."""
    proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def on_close():
        if proc.stdin:
            proc.stdin.close()
        if proc.stdout:
            proc.stdout.close()
        proc.wait(timeout=10)

    client = WireClient(proc.stdout, proc.stdin, on_close=on_close)
    client.process = proc
    return client
