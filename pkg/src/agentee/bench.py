"""Three-configuration latency benchmark, median/overhead statistics and reports."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable

from .agent import AgentPolicy, AgentRuntime, InProcessModel, InProcessTools
from .errors import AgenteeError, BenchError, BenchInvariantError, InsufficientConfigs
from .inference import Backend, ModelConfig
from .pipeline import Pipeline, PipelineConfig, default_system_prompt
from .tools import Credential, ToolService

log = logging.getLogger(__name__)

CONFIGS = ("in-process", "process-shm", "realm-csm")
AGENTS = ("chatbot", "itinerary")
SUBJECT = "realm-csm"
# how the three configurations read in published-style tables
CONFIG_LABELS = {"realm-csm": "AgenTEE", "process-shm": "NW VM", "in-process": "NW Process"}
METRICS = ("inference", "end-to-end")
DEFAULT_QUERY_COUNT = 9
_CENT = Decimal("0.01")


def _dec(x) -> Decimal:
    return x if isinstance(x, Decimal) else Decimal(str(x))


@dataclass(frozen=True)
class BenchRecord:
    config: str
    agent: str
    model_label: str
    query_index: int
    inference_seconds: Decimal
    end_to_end_seconds: Decimal

    def __post_init__(self):
        object.__setattr__(self, "inference_seconds", _dec(self.inference_seconds))
        object.__setattr__(self, "end_to_end_seconds", _dec(self.end_to_end_seconds))
        if self.config not in CONFIGS:
            raise ValueError(f"unknown config {self.config!r}")
        if self.agent not in AGENTS:
            raise ValueError(f"unknown agent {self.agent!r}")
        if self.query_index < 1:
            raise ValueError("query index starts at 1")
        if self.inference_seconds > self.end_to_end_seconds:
            raise BenchInvariantError(
                f"{self.config} query {self.query_index}: inference {self.inference_seconds}s "
                f"exceeds end-to-end {self.end_to_end_seconds}s")

    def metric(self, name: str) -> Decimal:
        return self.inference_seconds if name == "inference" else self.end_to_end_seconds

    def to_line(self) -> str:
        return "\t".join([self.config, self.agent, self.model_label, str(self.query_index),
                          str(self.inference_seconds), str(self.end_to_end_seconds)])

    @classmethod
    def from_line(cls, line: str) -> "BenchRecord":
        config, agent, label, idx, inf, e2e = line.rstrip("\n").split("\t")
        return cls(config, agent, label, int(idx), Decimal(inf), Decimal(e2e))


def median(values: Iterable) -> Decimal:
    values = [_dec(v) for v in values]
    if not values:
        raise BenchError("median of an empty list")
    return statistics.median(values)


def compute_overhead(subject, baseline) -> Decimal:
    """(subject - baseline) / baseline * 100, rounded half-up to 2 decimals."""
    subject, baseline = _dec(subject), _dec(baseline)
    if baseline <= 0:
        raise BenchError(f"baseline must be > 0, got {baseline}")
    result = ((subject - baseline) / baseline * 100).quantize(_CENT, rounding=ROUND_HALF_UP)
    return result if result else abs(result)  # no "-0.00"


@dataclass(frozen=True)
class OverheadReport:
    agent: str
    model_label: str
    baseline_config: str
    subject_config: str
    metric: str
    median_baseline: Decimal
    median_subject: Decimal
    overhead_percent: Decimal


def _groups(records) -> dict[tuple[str, str], dict[str, list[BenchRecord]]]:
    groups: dict[tuple[str, str], dict[str, list[BenchRecord]]] = {}
    for r in records:
        groups.setdefault((r.agent, r.model_label), {}).setdefault(r.config, []).append(r)
    return groups


def overheads(records, subject: str = SUBJECT) -> list[OverheadReport]:
    out = []
    for (agent, label), by_config in _groups(records).items():
        if subject not in by_config:
            continue
        for baseline in CONFIGS:
            if baseline == subject or baseline not in by_config:
                continue
            for metric in METRICS:
                b = median(r.metric(metric) for r in by_config[baseline])
                s = median(r.metric(metric) for r in by_config[subject])
                out.append(OverheadReport(agent, label, baseline, subject, metric, b, s,
                                          compute_overhead(s, b)))
    return out


def emit_report(records, subject: str = SUBJECT) -> str:
    """Per (agent, model): a median row per config, then subject-vs-baseline overhead rows."""
    records = list(records)
    groups = _groups(records)
    if not any(len(by_config) >= 2 for by_config in groups.values()):
        raise InsufficientConfigs("report needs at least two configurations for one agent/model pair")
    ovh = overheads(records, subject)
    lines = ["Inference and end-to-end latency (seconds, median)", ""]
    header = f"{'agent':<10} {'model':<28} {'row':<28} {'inference':>12} {'end-to-end':>12}"
    lines += [header, "-" * len(header)]
    for (agent, label) in sorted(groups):
        by_config = groups[(agent, label)]
        for config in CONFIGS:
            if config in by_config:
                inf = median(r.inference_seconds for r in by_config[config])
                e2e = median(r.end_to_end_seconds for r in by_config[config])
                row = f"{CONFIG_LABELS[config]} ({config})"
                lines.append(f"{agent:<10} {label:<28} {row:<28} {inf:>12.4f} {e2e:>12.4f}")
        for baseline in CONFIGS:
            pair = {o.metric: o for o in ovh
                    if (o.agent, o.model_label, o.baseline_config) == (agent, label, baseline)}
            if pair:
                row = f"{CONFIG_LABELS[subject]} vs {CONFIG_LABELS[baseline]}"
                lines.append(f"{agent:<10} {label:<28} {row:<28} "
                             f"{str(pair['inference'].overhead_percent) + '%':>12} "
                             f"{str(pair['end-to-end'].overhead_percent) + '%':>12}")
    return "\n".join(lines) + "\n"


def write_records(records, path: str | Path) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in records))


def read_records(path: str | Path) -> list[BenchRecord]:
    return [BenchRecord.from_line(l) for l in Path(path).read_text().splitlines() if l.strip()]


# ------------------------------------------------------------- queries

def load_queries(path: str | Path, agent: str) -> list:
    """Chatbot: one query per line. Itinerary: TSV destination, days, budget, interests, constraints."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if agent == "chatbot":
            rows.append(line.strip())
        else:
            parts = line.split("\t") + [""] * 5
            rows.append((parts[0], int(parts[1]), parts[2], parts[3], parts[4]))
    return rows


# --------------------------------------------------------------- runner

@dataclass
class BenchSetup:
    system_prompt: str | None = None
    credential: Credential | None = None
    max_tokens: int = 20

    def policy(self) -> AgentPolicy:
        return AgentPolicy(max_tokens=self.max_tokens)


def _run_in_process(agent: str, query, model_config: ModelConfig, setup: BenchSetup):
    service = ToolService()
    if setup.credential is not None:
        service.provision_credential(setup.credential)
    runtime = AgentRuntime(setup.system_prompt or default_system_prompt(),
                           InProcessModel(Backend(model_config)),
                           InProcessTools(service), setup.policy())
    if agent == "chatbot":
        runtime.run_chatbot_turn(query)
    else:
        runtime.run_itinerary_plan(*query)
    timings = runtime.last_timings
    return (sum(_dec(t.inference_seconds) for t in timings),
            sum(_dec(t.end_to_end_seconds) for t in timings))


def _run_pipeline(config: str, agent: str, query, model_config: ModelConfig, setup: BenchSetup):
    cfg = PipelineConfig(mode=config, model_config=model_config, system_prompt=setup.system_prompt,
                         policy=setup.policy(), credential=setup.credential,
                         with_tool=agent == "itinerary")
    with Pipeline(cfg) as pipeline:
        reply = pipeline.chat(query) if agent == "chatbot" else pipeline.plan(*query)
    return _dec(reply.inference_seconds), _dec(reply.end_to_end_seconds)


def run_query(config: str, agent: str, query, model_config: ModelConfig,
              setup: BenchSetup | None = None) -> tuple[Decimal, Decimal]:
    setup = setup or BenchSetup()
    if config == "in-process":
        return _run_in_process(agent, query, model_config, setup)
    return _run_pipeline(config, agent, query, model_config, setup)


def run_bench(agent: str, model_config: ModelConfig, configs: Iterable[str], queries: list,
              setup: BenchSetup | None = None, expected_queries: int | None = DEFAULT_QUERY_COUNT,
              failures: list | None = None) -> list[BenchRecord]:
    """One fresh pipeline per (config, query); failing configs are recorded in ``failures`` and skipped."""
    if agent not in AGENTS:
        raise ValueError(f"agent must be one of {AGENTS}")
    configs = list(configs)
    for c in configs:
        if c not in CONFIGS:
            raise ValueError(f"unknown config {c!r}")
    if expected_queries is not None and len(queries) != expected_queries:
        raise ValueError(f"expected {expected_queries} queries, got {len(queries)}")
    records = []
    for config in configs:
        batch = []
        try:
            for i, query in enumerate(queries, 1):
                inf, e2e = run_query(config, agent, query, model_config, setup)
                batch.append(BenchRecord(config, agent, model_config.model_name, i, inf, e2e))
        except BenchInvariantError:
            raise
        except AgenteeError as exc:
            log.error("config %s failed: %s", config, exc)
            if failures is not None:
                failures.append((config, str(exc)))
            continue
        records += batch
    return records
