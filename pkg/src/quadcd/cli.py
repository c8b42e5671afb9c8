"""Operator command line: decode batches, score outputs, diagnose traces.

Every decode run writes a manifest capturing the backend spec, the full
decode configuration, the inputs, and the seed; rerunning from that
manifest reproduces the outputs byte for byte.  Config mistakes exit
with status 2, backend/protocol failures with status 3.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from quadcd.backends import (
    Backend,
    SessionRequest,
    load_grounded_toy,
    load_scripted,
)
from quadcd.conformance import run_conformance
from quadcd.decoupling import load_segmentation, select_top_m
from quadcd.diagnostics import (
    detect_onset,
    format_histogram_table,
    format_onset_table,
    format_series_table,
    jsd_series,
    onset_histogram,
)
from quadcd.distcore import SamplingSpec
from quadcd.engine import DecodeConfig, DecodeResult, decode
from quadcd.errors import ProtocolError
from quadcd.metrics import (
    build_caption_records,
    chair_report,
    chair_scores,
    default_lexicon,
    load_lexicon,
    mme_report,
    mme_scores,
    parse_annotation_file,
    parse_caption_file,
    parse_qa_file,
    pope_report,
    pope_scores,
    scores_to_json,
)
from quadcd.traces import read_traces, save_traces
from quadcd.wire import RemoteBackend, connect_tcp, serve_stdio, serve_tcp, spawn_stdio

BACKEND_KINDS = ("scripted", "toy", "connect", "spawn")


def _read_text(path: str, what: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ValueError(f"cannot read {what} {path}: {exc}") from None


def _parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must be host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ValueError(f"bad port in address {text!r}") from None


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


def _manifest_from_args(args) -> dict:
    kind = args.backend
    if kind in ("scripted", "toy"):
        if not args.scenario:
            raise ValueError(f"--backend {kind} needs --scenario")
        backend_spec = {"kind": kind, "scenario": args.scenario}
    elif kind == "connect":
        if not args.connect:
            raise ValueError("--backend connect needs --connect HOST:PORT")
        _parse_address(args.connect)
        backend_spec = {"kind": "connect", "address": args.connect}
    elif kind == "spawn":
        if not args.spawn:
            raise ValueError("--backend spawn needs --spawn COMMAND")
        backend_spec = {"kind": "spawn", "command": args.spawn}
    else:
        raise ValueError(f"unknown backend kind {kind!r}")
    if args.samples < 1:
        raise ValueError(f"--samples must be >= 1, got {args.samples}")
    return {
        "backend": backend_spec,
        "config": {
            "alpha": args.alpha,
            "beta": args.beta,
            "top_m_fraction": args.top_m_fraction,
            "max_tokens": args.max_tokens,
            "stop_token": args.stop_token,
            "sampling": {
                "kind": args.sampling,
                "temperature": args.temperature,
                "seed": args.seed,
            },
        },
        "inputs": {"segmentation": args.segmentation},
        "samples": [f"sample-{i:03d}" for i in range(args.samples)],
        "output_dir": args.out,
        "seed": args.seed,
    }


def _load_manifest(path: str) -> dict:
    text = _read_text(path, "manifest")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: bad manifest JSON: {exc}") from None
    for key in ("backend", "config", "samples", "output_dir"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest missing {key!r}")
    return manifest


def _config_from_manifest(manifest: dict) -> DecodeConfig:
    cfg = manifest["config"]
    samp = cfg.get("sampling", {})
    return DecodeConfig(
        alpha=float(cfg["alpha"]),
        beta=float(cfg["beta"]),
        top_m_fraction=float(cfg["top_m_fraction"]),
        max_tokens=int(cfg["max_tokens"]),
        stop_token=cfg.get("stop_token"),
        sampling=SamplingSpec(
            kind=samp.get("kind", "greedy"),
            temperature=float(samp.get("temperature", 1.0)),
            seed=int(samp.get("seed", 0)),
        ),
    )


def _write_sample(outdir: Path, sid: str, vocab: tuple[str, ...], result: DecodeResult) -> None:
    (outdir / f"{sid}.tokens.txt").write_text(
        " ".join(str(t) for t in result.tokens) + "\n", encoding="utf-8"
    )
    (outdir / f"{sid}.text.txt").write_text(
        " ".join(vocab[t] for t in result.tokens) + "\n", encoding="utf-8"
    )
    save_traces(outdir / f"{sid}.trace.jsonl", result)


def cmd_decode(args) -> int:
    if args.from_manifest:
        manifest = _load_manifest(args.from_manifest)
        if args.out:
            manifest = dict(manifest, output_dir=args.out)
    else:
        manifest = _manifest_from_args(args)
    cfg = _config_from_manifest(manifest)
    backend_spec = manifest["backend"]
    samples = list(manifest["samples"])
    seg_path = (manifest.get("inputs") or {}).get("segmentation")

    seg_ref = None
    top_m = None
    if seg_path:
        seg = load_segmentation(seg_path)
        top_m = select_top_m(len(seg.objects), cfg.top_m_fraction)
        seg_ref = seg_path

    outdir = Path(manifest["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)

    kind = backend_spec["kind"]
    truncated = []
    if kind in ("scripted", "toy"):
        loader = load_scripted if kind == "scripted" else load_grounded_toy
        backend: Backend = loader(backend_spec["scenario"])
        vocab = backend.vocab
        run_cfg = cfg
        if run_cfg.stop_token is None:
            stop = getattr(backend.scenario, "stop_token", None)
            run_cfg = dataclasses.replace(cfg, stop_token=stop)

        def run_one(sid: str) -> DecodeResult:
            session = backend.open_session(
                SessionRequest(
                    session_id=sid, vocab=vocab, segmentation_ref=seg_ref, top_m=top_m
                )
            )
            try:
                return decode(session, run_cfg)
            finally:
                session.close()

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_one, samples))
    elif kind == "connect":
        host, port = _parse_address(backend_spec["address"])

        def run_remote(sid: str) -> tuple[tuple[str, ...], DecodeResult]:
            client = connect_tcp(host, port)
            try:
                remote = RemoteBackend(client)
                session = remote.open_session(
                    SessionRequest(
                        session_id=sid,
                        vocab=remote.vocab,
                        segmentation_ref=seg_ref,
                        top_m=top_m,
                    )
                )
                run_cfg = cfg
                if run_cfg.stop_token is None and "stop_token" in session.opened:
                    run_cfg = dataclasses.replace(cfg, stop_token=session.opened["stop_token"])
                result = decode(session, run_cfg)
                session.close()
                return remote.vocab, result
            finally:
                client.bye()

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            pairs = list(pool.map(run_remote, samples))
        vocab = pairs[0][0]
        results = [r for _, r in pairs]
    elif kind == "spawn":
        client = spawn_stdio(shlex.split(backend_spec["command"]))
        try:
            remote = RemoteBackend(client)
            vocab = remote.vocab
            results = []
            for sid in samples:
                session = remote.open_session(
                    SessionRequest(
                        session_id=sid, vocab=vocab, segmentation_ref=seg_ref, top_m=top_m
                    )
                )
                run_cfg = cfg
                if run_cfg.stop_token is None and "stop_token" in session.opened:
                    run_cfg = dataclasses.replace(cfg, stop_token=session.opened["stop_token"])
                results.append(decode(session, run_cfg))
                session.close()
        finally:
            client.bye()
    else:
        raise ValueError(f"unknown backend kind {kind!r}")

    for sid, result in zip(samples, results):
        _write_sample(outdir, sid, vocab, result)
        if result.truncated:
            truncated.append((sid, result.truncation_reason))
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for sid, reason in truncated:
        print(f"note: {sid} truncated: {reason}", file=sys.stderr)
    print(f"decoded {len(samples)} sample(s) into {outdir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if args.metric == "chair":
        lexicon = load_lexicon(args.lexicon) if args.lexicon else default_lexicon()
        captions = parse_caption_file(_read_text(args.captions, "captions file"), args.captions)
        annotations = parse_annotation_file(
            _read_text(args.annotations, "annotations file"), args.annotations
        )
        scores = chair_scores(build_caption_records(captions, annotations, lexicon))
        report = chair_report(scores)
    elif args.metric == "pope":
        records = parse_qa_file(_read_text(args.qa, "QA file"), args.qa)
        if args.subset:
            records = [r for r in records if r.subset == args.subset.lower()]
            if not records:
                raise ValueError(f"no QA records in subset {args.subset!r}")
        scores = pope_scores(records)
        report = pope_report(scores)
    else:
        records = parse_qa_file(_read_text(args.qa, "QA file"), args.qa)
        scores = mme_scores(records, percent=args.percent)
        report = mme_report(scores)
    sys.stdout.write(report)
    if args.json:
        Path(args.json).write_text(scores_to_json(scores), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    if not args.traces:
        raise ValueError("no trace files given")
    tables_dir = Path(args.tables) if args.tables else None
    if tables_dir is not None:
        tables_dir.mkdir(parents=True, exist_ok=True)
    reports = {"original_vs_non": [], "decoupled_vs_non": []}
    for path in args.traces:
        traces = read_traces(path)
        if not traces:
            raise ValueError(f"{path}: trace file holds no steps")
        stem = Path(path).stem
        parts = []
        for kind, label in (("original_vs_non", "original"), ("decoupled_vs_non", "decoupled")):
            series = jsd_series(traces, kind)
            report = detect_onset(series, epsilon=args.epsilon, window_k=args.window_k)
            reports[kind].append(report)
            onset = "none" if report.onset_step is None else str(report.onset_step)
            parts.append(f"{label} onset {onset}/{report.series_length}")
            if tables_dir is not None:
                (tables_dir / f"{stem}.{label}.series.csv").write_text(
                    format_series_table(series), encoding="utf-8"
                )
        print(f"{path}: " + ", ".join(parts))
    for kind, label in (("original_vs_non", "original"), ("decoupled_vs_non", "decoupled")):
        hist = onset_histogram(reports[kind], bins=args.bins)
        print(
            f"{label} onset-fraction histogram ({args.bins} bins): "
            f"{list(hist.counts)} no-onset {hist.no_onset}"
        )
        if tables_dir is not None:
            (tables_dir / f"onsets.{label}.csv").write_text(
                format_onset_table(reports[kind]), encoding="utf-8"
            )
            (tables_dir / f"histogram.{label}.csv").write_text(
                format_histogram_table(hist), encoding="utf-8"
            )
    return 0


# ---------------------------------------------------------------------------
# serve / conformance
# ---------------------------------------------------------------------------


def _load_builtin_backend(kind: str, scenario: str | None) -> Backend:
    if kind not in ("scripted", "toy"):
        raise ValueError(f"serve supports builtin backends only, got {kind!r}")
    if not scenario:
        raise ValueError(f"--backend {kind} needs --scenario")
    loader = load_scripted if kind == "scripted" else load_grounded_toy
    return loader(scenario)


def cmd_serve(args) -> int:
    backend = _load_builtin_backend(args.backend, args.scenario)
    if args.transport == "stdio":
        serve_stdio(backend, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    server = serve_tcp(backend, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_conformance(args) -> int:
    if bool(args.connect) == bool(args.spawn):
        raise ValueError("give exactly one of --connect or --spawn")
    if args.connect:
        host, port = _parse_address(args.connect)

        def make_client():
            return connect_tcp(host, port)

    else:
        command = shlex.split(args.spawn)

        def make_client():
            return spawn_stdio(command)

    report = run_conformance(make_client)
    print(report.format())
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=1.2, help="subtract-branch weight")
    p.add_argument("--beta", type=float, default=3.0, help="enhance-branch weight")
    p.add_argument(
        "--top-m-fraction",
        type=float,
        default=0.05,
        help="fraction of objects exposed in the dual view",
    )
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--stop-token", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sampling", choices=("greedy", "categorical"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadcd",
        description="four-channel contrastive decoding: run, score, diagnose",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="decode a batch of sessions against a backend")
    p.add_argument("--backend", choices=BACKEND_KINDS, default="scripted")
    p.add_argument("--scenario", help="scenario file for builtin backends")
    p.add_argument("--connect", help="HOST:PORT of a running backend server")
    p.add_argument("--spawn", help="command line of a stdio backend to spawn")
    p.add_argument("--segmentation", help="segmentation file passed to the backend")
    p.add_argument("--samples", type=int, default=1, help="number of sessions to decode")
    p.add_argument("--jobs", type=int, default=4, help="parallel sessions")
    p.add_argument("--out", default="decode-out", help="output directory")
    p.add_argument("--from-manifest", help="rerun a recorded manifest")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score caption or QA outputs")
    ev = p.add_subparsers(dest="metric", required=True)
    c = ev.add_parser("chair", help="caption object-hallucination ratios")
    c.add_argument("--captions", required=True)
    c.add_argument("--annotations", required=True)
    c.add_argument("--lexicon", help="override the builtin object lexicon")
    c.add_argument("--json", help="also write scores as JSON")
    c.set_defaults(func=cmd_eval)
    q = ev.add_parser("pope", help="yes/no probing confusion scores")
    q.add_argument("--qa", required=True)
    q.add_argument("--subset", help="score only one subset tag")
    q.add_argument("--json", help="also write scores as JSON")
    q.set_defaults(func=cmd_eval)
    m = ev.add_parser("mme", help="perception-subset accuracies")
    m.add_argument("--qa", required=True)
    m.add_argument("--percent", action="store_true", help="report on the percent scale")
    m.add_argument("--json", help="also write scores as JSON")
    m.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="JSD series, onsets, and histograms from traces")
    p.add_argument("traces", nargs="+", help="trace files from decode runs")
    p.add_argument("--epsilon", type=float, default=0.01, help="collapse threshold in nats")
    p.add_argument("--window-k", type=int, default=3, help="consecutive steps below epsilon")
    p.add_argument("--bins", type=int, default=10, help="onset-fraction histogram bins")
    p.add_argument("--tables", help="directory for comma-separated output tables")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("serve", help="serve a builtin backend over the wire protocol")
    p.add_argument("--backend", choices=("scripted", "toy"), default="scripted")
    p.add_argument("--scenario", required=True)
    p.add_argument("--transport", choices=("stdio", "tcp"), default="stdio")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("conformance", help="run protocol conformance against a backend")
    p.add_argument("--connect", help="HOST:PORT of a running backend server")
    p.add_argument("--spawn", help="command line of a stdio backend to spawn")
    p.set_defaults(func=cmd_conformance)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProtocolError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"backend unreachable: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
