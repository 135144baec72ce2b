"""``agentee`` command line: launch, chat, bench, observe."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
from pathlib import Path

from .bench import AGENTS, CONFIGS, BenchSetup, emit_report, load_queries, run_bench, write_records
from .errors import AgenteeError, PipelineNotReady
from .inference import ModelConfig
from .measurement import Role
from .observer import Observer
from .pipeline import MODES, AgentReplyError, Pipeline, PipelineConfig, data_path
from .realm_host import load_realm_spec
from .tools import Credential


def _model_config(path: str | None) -> ModelConfig:
    if path is None:
        return ModelConfig.from_text(data_path("model_mock.conf").read_text())
    return ModelConfig.from_text(Path(path).read_text())


def _credential(path: str | None) -> Credential | None:
    if path is None:
        return None
    p = Path(path)
    return Credential(p.stem, p.read_bytes().strip())


def _system_prompt(path: str | None) -> str | None:
    return Path(path).read_text() if path else None


def _pipeline_config(args, **overrides) -> PipelineConfig:
    kwargs = dict(mode=args.mode, model_config=_model_config(args.model_config),
                  system_prompt=_system_prompt(args.system_prompt),
                  credential=_credential(args.credential_file))
    kwargs.update(overrides)
    return PipelineConfig(**kwargs)


def _add_pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default="realm-csm")
    p.add_argument("--model-config", help="model config file (key = value)")
    p.add_argument("--system-prompt", help="file holding the system prompt asset")
    p.add_argument("--credential-file", help="tool credential; key id is the file stem")


# ---------------------------------------------------------------- launch

def cmd_launch(args) -> int:
    specs = {}
    for path in args.config:
        spec = load_realm_spec(path)
        specs[spec.role] = spec
    if Role.AGENT not in specs or Role.MODEL not in specs:
        print("launch needs at least an agent and a model realm spec", file=sys.stderr)
        return 2
    cfg = _pipeline_config(args, specs=specs, with_tool=Role.TOOL in specs)
    with Pipeline(cfg) as pipeline:
        for role, handle in pipeline.handles.items():
            print(f"{role.value}\trealm {handle.realm_id}\tpid {handle.process_id}\t"
                  f"{handle.state.value}\t{handle.measurement.hex()}")
        print("pipeline ready", flush=True)
        if not args.exit_when_ready:
            try:
                sys.stdin.read()
            except KeyboardInterrupt:
                pass
    return 0


# ------------------------------------------------------------------ chat

def repl(pipeline_or_forwarder, lines, out) -> None:
    """Forward each input line; ``/plan a|b|c|d|e``, ``/reset`` and ``/quit`` are commands."""
    fwd = getattr(pipeline_or_forwarder, "forwarder", pipeline_or_forwarder)
    for raw in lines:
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        try:
            if line == "/quit":
                break
            if line == "/reset":
                fwd.reset()
                out.write("(history cleared)\n")
            elif line.startswith("/plan "):
                parts = (line[6:].split("|") + ["", "", "", "", ""])[:5]
                reply = fwd.plan(parts[0].strip(), parts[1].strip(), parts[2].strip(),
                                 parts[3].strip(), parts[4].strip())
                out.write(reply.text + "\n")
            else:
                out.write(fwd.chat(line).text + "\n")
        except AgentReplyError as exc:
            out.write(f"error: {exc.code}: {exc.message}\n")
        except PipelineNotReady as exc:
            out.write(f"pipeline-not-ready: {exc}\n")
        out.flush()


def cmd_chat(args) -> int:
    cfg = _pipeline_config(args, with_tool=not args.no_tool)
    pipeline = Pipeline(cfg)
    try:
        pipeline.start()
    except AgenteeError as exc:
        print(f"pipeline-not-ready: {exc}", file=sys.stderr)
        return 1
    try:
        if sys.stdin.isatty():
            print("agentee chat: type a message, /plan dest|days|budget|interests|constraints, "
                  "/reset, or /quit", file=sys.stderr)
        repl(pipeline, sys.stdin, sys.stdout)
    except KeyboardInterrupt:
        pass
    finally:
        pipeline.stop()
    return 0


# ----------------------------------------------------------------- bench

def cmd_bench(args) -> int:
    configs = [c.strip() for c in args.configs.split(",") if c.strip()]
    queries = load_queries(args.queries, args.agent)
    model_config = _model_config(args.model_config)
    setup = BenchSetup(system_prompt=_system_prompt(args.system_prompt),
                       credential=_credential(args.credential_file), max_tokens=args.max_tokens)
    failures: list = []
    records = run_bench(args.agent, model_config, configs, queries, setup,
                        expected_queries=args.expect_queries, failures=failures)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(records, out / "records.tsv")
    for config, reason in failures:
        print(f"config {config} failed: {reason}", file=sys.stderr)
    try:
        report = emit_report(records)
    except AgenteeError as exc:
        print(f"no report: {exc}", file=sys.stderr)
        return 1
    (out / "report.txt").write_text(report)
    sys.stdout.write(report)
    return 0


# --------------------------------------------------------------- observe

def cmd_observe(args) -> int:
    probes = [l.rstrip("\n") for l in Path(args.probes).read_text().splitlines() if l.strip()]
    cfg = _pipeline_config(args)
    pipeline = Pipeline(cfg)
    observer = Observer(lambda: pipeline.region_names, probes).start()
    try:
        pipeline.start()
        for query in args.query or ["hello"]:
            pipeline.chat(query)
        if args.plan:
            pipeline.plan("Paris", 3, 1000, "museums", "no flights")
        findings = observer.stop()
    finally:
        if observer._thread.is_alive():
            observer.stop()
        pipeline.stop()
    for f in findings:
        print(f"{f.region}\t{f.offset}\t{f.probe.decode('utf-8', 'replace')}")
    counts = observer.hits_per_probe()
    for probe, n in counts.items():
        print(f"# {probe.decode('utf-8', 'replace')}: {n} hit(s)", file=sys.stderr)
    print(f"# {len(findings)} finding(s) over {len(observer.scanned)} region(s), "
          f"{observer.passes} passes", file=sys.stderr)
    return 3 if findings else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentee", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("launch", help="launch realms from spec files and wait")
    p.add_argument("--config", nargs="+", required=True, help="realm spec files")
    p.add_argument("--exit-when-ready", action="store_true")
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_launch)

    p = sub.add_parser("chat", help="interactive forwarder to the agent realm")
    p.add_argument("--no-tool", action="store_true", help="skip the tool realm")
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("bench", help="run the configuration benchmark")
    p.add_argument("--agent", choices=AGENTS, required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--configs", default=",".join(CONFIGS), help="comma list of " + ", ".join(CONFIGS))
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-tokens", type=int, default=20)
    p.add_argument("--expect-queries", type=int, default=9)
    p.add_argument("--system-prompt")
    p.add_argument("--credential-file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("observe", help="scan raw regions for probe strings during a run")
    p.add_argument("--probes", required=True, help="file with one probe string per line")
    p.add_argument("--query", action="append", help="chat query to send (repeatable)")
    p.add_argument("--plan", action="store_true", help="also run one itinerary request")
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_observe)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(143))
    try:
        return args.func(args)
    except AgenteeError as exc:
        print(f"agentee: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
