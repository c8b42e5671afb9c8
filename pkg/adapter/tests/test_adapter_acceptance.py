"""Acceptance gate for the adapter.

One criterion in two parts: the stub-wrapped adapter passes the
backend-protocol conformance suite byte-for-byte against the scripted
reference backend, and a one-image smoke test through a real model
architecture returns four finite logit vectors of tokenizer-vocabulary
length.  Timed and reported one line per part, like the engine's gate.
"""

import threading
import time

import numpy as np
import pytest

from quadcd.backends import ScriptedBackend, SessionRequest, parse_scripted
from quadcd.conformance import run_conformance
from quadcd.wire import connect_tcp, serve_tcp

from quadcd_adapter.adapter import AdapterBackend, build_backend
from quadcd_adapter.config import AdapterConfig
from quadcd_adapter.models import STUB_VOCAB, StubModel
from quadcd_adapter.segmenters import StubSegmenter


class Budget:
    """Context manager asserting a wall-clock budget and printing the line."""

    def __init__(self, name: str, seconds: float):
        self.name = name
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        if exc_type is not None:
            print(f"FAIL {self.name} ({elapsed:.3f}s)")
            return False
        assert elapsed < self.seconds, (
            f"{self.name}: {elapsed:.3f}s exceeds the {self.seconds:.0f}s budget"
        )
        print(f"PASS {self.name} ({elapsed:.3f}s, budget {self.seconds:.0f}s)")
        return False


def scripted_reference_backend() -> ScriptedBackend:
    """A two-step scripted scenario over the stub vocabulary, so the
    conformance report's vocab-size line matches the adapter's."""
    rng = np.random.default_rng(8)
    lines = [f"vocab {' '.join(STUB_VOCAB)}", "steps 2", "stop </s>"]
    for step in range(2):
        for channel in ("original", "dual", "residual", "non_visual"):
            values = " ".join(f"{v:.6f}" for v in rng.normal(0.0, 1.0, len(STUB_VOCAB)))
            lines.append(f"{step} {channel} {values}")
    return ScriptedBackend(parse_scripted("\n".join(lines), source="<reference>"))


def serve_backend(backend):
    server = serve_tcp(backend, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


def stop_server(server, thread):
    server.shutdown()
    server.server_close()
    thread.join(timeout=5)


def test_criterion_8a_adapter_conformance_byte_for_byte():
    """The stub-wrapped adapter reproduces the scripted backend's
    conformance run byte-for-byte: same six checks, same report text."""
    with Budget("criterion-8a adapter conformance", 10):
        adapter = AdapterBackend(StubModel(), StubSegmenter(), canvas=(8, 8))
        reference = scripted_reference_backend()
        reports = {}
        for name, backend in (("adapter", adapter), ("scripted", reference)):
            server, thread = serve_backend(backend)
            host, port = server.server_address[:2]
            try:
                reports[name] = run_conformance(lambda: connect_tcp(host, port))
            finally:
                stop_server(server, thread)
        assert reports["adapter"].passed, reports["adapter"].format()
        assert reports["scripted"].passed, reports["scripted"].format()
        assert reports["adapter"].format() == reports["scripted"].format()
        assert reports["adapter"].format().endswith("CONFORMANT (6/6 checks)")


def test_criterion_8b_real_model_smoke(tmp_path):
    """One image through a real (tiny, randomly initialized) LLaVA-style
    model: four finite logit vectors of tokenizer-vocabulary length."""
    pytest.importorskip("torch")
    pytest.importorskip("transformers")
    with Budget("criterion-8b real-model smoke", 180):
        image = np.full((8, 8, 3), 0.5, dtype=np.float64)
        image[1:5, 1:5] = (1.0, 0.0, 0.0)
        np.save(tmp_path / "scene.npy", image)
        backend = build_backend(
            AdapterConfig(model="tiny-llava:7", image_root=str(tmp_path))
        )
        tokenizer_vocab = tuple(backend.model.vocab)
        server, thread = serve_backend(backend)
        host, port = server.server_address[:2]
        try:
            client = connect_tcp(host, port)
            try:
                client.hello()
                served_vocab = client.fetch_vocab()
                # the served vocabulary is the tokenizer's, exactly
                assert served_vocab == tokenizer_vocab
                client.open(
                    SessionRequest(
                        session_id="smoke",
                        vocab=served_vocab,
                        prompt_tokens=(4, 5, 6),
                        segmentation_ref="scene.npy",
                    )
                )
                logits = client.step("smoke", [], len(served_vocab))
                for channel in ("original", "dual", "residual", "non_visual"):
                    values = getattr(logits, channel).values
                    assert values.shape == (len(tokenizer_vocab),)
                    assert np.all(np.isfinite(values))
            finally:
                client.bye()
        finally:
            stop_server(server, thread)
