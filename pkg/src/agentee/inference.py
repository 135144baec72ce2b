"""Model realm: inference backends and the request serving loop."""

from __future__ import annotations

import configparser
import hashlib
import logging
import socket
import time
from dataclasses import dataclass, field

from .errors import EngineError, EngineUnreachable, PeerClosed, ValidationError, WireFormatError
from .prompt import LabeledPrompt
from .wire import decode_fields, encode_fields, from_be, u32, u64

log = logging.getLogger(__name__)

MAX_TOKENS_LIMIT = 4096
MOCK_TOKEN_CAP = 32
BACKENDS = ("mock", "timed-mock", "external")


# ----------------------------------------------------------------- records

@dataclass(frozen=True)
class InferenceRequest:
    request_id: int
    prompt: LabeledPrompt
    max_tokens: int

    def __post_init__(self):
        if not 1 <= self.max_tokens <= MAX_TOKENS_LIMIT:
            raise ValidationError(f"max_tokens must be in [1, {MAX_TOKENS_LIMIT}], got {self.max_tokens}")
        if not 0 <= self.request_id < 2 ** 64:
            raise ValidationError("request id must fit in 64 bits")

    def to_bytes(self) -> bytes:
        return encode_fields([b"INFER", u64(self.request_id), u32(self.max_tokens),
                              self.prompt.to_bytes()])

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "InferenceRequest":
        if len(fields) != 4 or fields[0] != b"INFER" or len(fields[1]) != 8 or len(fields[2]) != 4:
            raise WireFormatError("malformed inference request")
        return cls(from_be(fields[1]), LabeledPrompt.from_bytes(fields[3]), from_be(fields[2]))


@dataclass(frozen=True)
class InferenceResponse:
    request_id: int
    output: str
    inference_seconds: float

    def to_bytes(self) -> bytes:
        return encode_fields([b"RESULT", u64(self.request_id), self.output,
                              repr(float(self.inference_seconds))])


def error_record(request_id: int | None, code: str, message: str) -> bytes:
    rid = b"" if request_id is None else u64(request_id)
    return encode_fields([b"ERROR", rid, code, message])


SHUTDOWN = encode_fields([b"SHUTDOWN"])


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ModelConfig:
    backend: str
    model_name: str
    per_token_delay_ms: float = 0.0
    engine_endpoint: str | None = None
    # (trigger, reply): mock backends answer ``reply`` when the final user
    # message contains ``trigger``; used to script tool directives in tests.
    script: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if not self.model_name:
            raise ValueError("model_name is required")
        if self.per_token_delay_ms < 0:
            raise ValueError("per_token_delay_ms must be >= 0")
        if self.backend == "external" and not self.engine_endpoint:
            raise ValueError("external backend requires engine_endpoint")

    def to_text(self) -> str:
        lines = [f"backend = {self.backend}", f"model_name = {self.model_name}"]
        if self.backend == "timed-mock" or self.per_token_delay_ms:
            lines.append(f"per_token_delay_ms = {self.per_token_delay_ms:g}")
        if self.engine_endpoint:
            lines.append(f"engine_endpoint = {self.engine_endpoint}")
        for i, (trigger, reply) in enumerate(self.script, 1):
            lines.append(f"script_{i} = {trigger} => {reply.encode('unicode_escape').decode('ascii')}")
        return "\n".join(lines) + "\n"

    def to_bytes(self) -> bytes:
        return self.to_text().encode("utf-8")

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string("[model]\n" + text)
        sec = cp["model"]
        script = []
        for key in sorted((k for k in sec if k.startswith("script_")), key=lambda k: int(k[7:])):
            trigger, _, reply = sec[key].partition("=>")
            script.append((trigger.strip(), reply.strip().encode("ascii").decode("unicode_escape")))
        return cls(
            backend=sec.get("backend", "mock"),
            model_name=sec.get("model_name", ""),
            per_token_delay_ms=sec.getfloat("per_token_delay_ms", 0.0),
            engine_endpoint=sec.get("engine_endpoint"),
            script=tuple(script),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelConfig":
        return cls.from_text(data.decode("utf-8"))


# ---------------------------------------------------------------- backends

def mock_generate(prompt: LabeledPrompt, max_tokens: int) -> str:
    """Token i is the first 6 hex chars of SHA-256(canonical prompt || 8-byte BE i)."""
    canonical = prompt.to_bytes()
    return " ".join(hashlib.sha256(canonical + u64(i)).hexdigest()[:6]
                    for i in range(min(max_tokens, MOCK_TOKEN_CAP)))


def timed_generate(prompt: LabeledPrompt, max_tokens: int, per_token_delay_ms: float) -> str:
    """mock_generate output, paced so that token i is ready no earlier than (i+1) * delay."""
    if per_token_delay_ms < 0:
        raise ValueError("per-token delay must be >= 0")
    text = mock_generate(prompt, max_tokens)
    delay = per_token_delay_ms / 1000.0
    if delay:
        start = time.monotonic()
        for i in range(min(max_tokens, MOCK_TOKEN_CAP)):
            # sleep to a deadline rather than a fixed interval so jitter does not accumulate
            remaining = start + (i + 1) * delay - time.monotonic()
            if remaining > 0:
                time.sleep(remaining)
    return text


def _escape_field(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def _unescape_field(s: str) -> str:
    out, i = [], 0
    table = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}
    while i < len(s):
        c = s[i]
        if c == "\\" and i + 1 < len(s) and s[i + 1] in table:
            out.append(table[s[i + 1]])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def adapter_request_line(request_id: int, prompt_text: str, max_tokens: int) -> bytes:
    return f"{request_id}\t{_escape_field(prompt_text)}\t{max_tokens}\n".encode("utf-8")


def parse_adapter_line(line: bytes) -> list[str]:
    return [_unescape_field(f) for f in line.decode("utf-8").rstrip("\n").split("\t")]


def _connect(endpoint: str, timeout: float) -> socket.socket:
    kind, _, addr = endpoint.partition(":")
    if kind == "unix":
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        target = addr
    elif kind == "tcp":
        host, _, port = addr.rpartition(":")
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        target = (host, int(port))
    else:
        raise EngineUnreachable(f"unsupported engine endpoint {endpoint!r}")
    sock.settimeout(timeout)
    try:
        sock.connect(target)
    except OSError as exc:
        sock.close()
        raise EngineUnreachable(f"cannot reach engine at {endpoint}: {exc}") from exc
    return sock


def external_generate(prompt: LabeledPrompt, max_tokens: int, engine_endpoint: str,
                      request_id: int = 0, timeout: float = 300.0) -> str:
    """Relay one request to a local engine speaking the tab-separated line protocol."""
    sock = _connect(engine_endpoint, timeout)
    try:
        sock.sendall(adapter_request_line(request_id, prompt.render_text(), max_tokens))
        with sock.makefile("rb") as fh:
            line = fh.readline()
    except OSError as exc:
        raise EngineUnreachable(f"engine connection failed: {exc}") from exc
    finally:
        sock.close()
    if not line:
        raise EngineUnreachable("engine closed the connection without replying")
    fields = parse_adapter_line(line)
    if len(fields) != 3 or fields[0] != str(request_id):
        raise EngineError(f"malformed engine reply {line[:80]!r}")
    if fields[2] == "error":
        raise EngineError(fields[1])
    return fields[1]


class Backend:
    def __init__(self, config: ModelConfig):
        self.config = config

    def _scripted(self, prompt: LabeledPrompt) -> str | None:
        last = prompt.messages[-1]
        if last.role.value != "user":
            return None
        for trigger, reply in self.config.script:
            if trigger in last.content:
                return reply
        return None

    def generate(self, prompt: LabeledPrompt, max_tokens: int, request_id: int = 0) -> str:
        cfg = self.config
        if cfg.backend == "external":
            return external_generate(prompt, max_tokens, cfg.engine_endpoint, request_id)
        scripted = self._scripted(prompt)
        if scripted is not None:
            return scripted
        if cfg.backend == "timed-mock":
            return timed_generate(prompt, max_tokens, cfg.per_token_delay_ms)
        return mock_generate(prompt, max_tokens)

    def infer(self, request: InferenceRequest) -> InferenceResponse:
        start = time.monotonic()
        output = self.generate(request.prompt, request.max_tokens, request.request_id)
        return InferenceResponse(request.request_id, output, time.monotonic() - start)


# -------------------------------------------------------------- serve loop

def serve_loop(duplex, config: ModelConfig, channel_set=None) -> int:
    """Answer inference requests until SHUTDOWN or peer closure; returns requests served.

    Timing runs from the start of request decoding to output ready.
    """
    backend = Backend(config)
    seen: set[int] = set()
    served = 0
    try:
        while True:
            try:
                raw = duplex.recv()
            except PeerClosed:
                break
            start = time.monotonic()
            try:
                fields = decode_fields(raw)
            except WireFormatError as exc:
                duplex.send(error_record(None, "protocol-error", str(exc)))
                continue
            if fields == [b"SHUTDOWN"]:
                break
            rid = from_be(fields[1]) if len(fields) > 1 and len(fields[1]) == 8 else None
            try:
                request = InferenceRequest.from_fields(fields)
            except (WireFormatError, ValidationError, UnicodeDecodeError) as exc:
                duplex.send(error_record(rid, "protocol-error", str(exc)))
                continue
            if request.request_id in seen:
                duplex.send(error_record(rid, "protocol-error", f"request id {rid} already used"))
                continue
            seen.add(request.request_id)
            try:
                output = backend.generate(request.prompt, request.max_tokens, request.request_id)
            except EngineUnreachable as exc:
                duplex.send(error_record(rid, "engine-unreachable", str(exc)))
                continue
            except EngineError as exc:
                duplex.send(error_record(rid, "engine-error", str(exc)))
                continue
            except Exception as exc:  # backend bug: report, keep serving
                log.exception("backend failure")
                duplex.send(error_record(rid, "backend-failure", str(exc)))
                continue
            elapsed = time.monotonic() - start
            duplex.send(InferenceResponse(request.request_id, output, elapsed).to_bytes())
            served += 1
    finally:
        if channel_set is not None:
            channel_set.close()
    return served
