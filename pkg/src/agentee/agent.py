"""Agent realm logic: prompt construction, model queries and tool routing."""

from __future__ import annotations

import itertools
import json
import re
import time
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation

from .errors import (
    BadArguments,
    InferenceError,
    ModelChannelDown,
    NotProvisioned,
    PeerClosed,
    ToolChannelDown,
    ToolDenied,
    ToolError,
    UnknownTool,
    ValidationError,
    WireFormatError,
)
from .inference import SHUTDOWN, Backend, InferenceRequest, InferenceResponse
from .prompt import LabeledPrompt, Message, MsgRole, escape_role_markers
from .tools import ToolCall
from .wire import decode_fields, encode_fields, from_be

HISTORY_BUDGET = 16
DEFAULT_MAX_TOKENS = 32


# ---------------------------------------------------------------- policy

@dataclass(frozen=True)
class AgentPolicy:
    tools: tuple[str, ...] = ("echo", "currency", "weather")
    max_tokens: int = DEFAULT_MAX_TOKENS
    history_budget: int = HISTORY_BUDGET

    def to_bytes(self) -> bytes:
        return json.dumps({"tools": list(self.tools), "max_tokens": self.max_tokens,
                           "history_budget": self.history_budget}, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AgentPolicy":
        raw = json.loads(data)
        return cls(tuple(raw.get("tools", ())), int(raw.get("max_tokens", DEFAULT_MAX_TOKENS)),
                   int(raw.get("history_budget", HISTORY_BUDGET)))


# ---------------------------------------------------------------- prompts

@dataclass
class ConversationState:
    history: list[Message] = field(default_factory=list)
    turn_count: int = 0

    def record_turn(self, user: str, assistant: str, budget: int = HISTORY_BUDGET) -> None:
        self.history += [Message(MsgRole.USER, user), Message(MsgRole.ASSISTANT, assistant)]
        self.turn_count += 1
        if len(self.history) > budget:
            del self.history[:len(self.history) - budget]

    def clear(self) -> None:
        self.history.clear()
        self.turn_count = 0


def build_prompt(system_prompt: str | None, state: ConversationState, user_input: str) -> LabeledPrompt:
    if not system_prompt:
        raise NotProvisioned("system prompt has not been provisioned")
    return LabeledPrompt((Message(MsgRole.SYSTEM, system_prompt), *state.history,
                          Message(MsgRole.USER, escape_role_markers(user_input))))


# ------------------------------------------------------ tool directives

_NAME = r"[A-Za-z_][A-Za-z0-9_-]*"
_DIRECTIVE = re.compile(rf"^\s*TOOL\s*:\s*({_NAME})\s*:\s*\{{(.*)\}}\s*$")
_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_VALUE_FORBIDDEN = set(",{}:\n")


def parse_directive(line: str) -> ToolCall | None:
    """Parse ``TOOL:<name>:{k:v,...}``; anything malformed is plain text (None)."""
    m = _DIRECTIVE.match(line)
    if not m:
        return None
    name, body = m.group(1), m.group(2)
    args: dict[str, str] = {}
    if body.strip():
        for item in body.split(","):
            key, sep, value = item.partition(":")
            key, value = key.strip(), value.strip()
            if not sep or not _KEY.match(key) or not value or key in args:
                return None
            if _VALUE_FORBIDDEN & set(value):
                return None
            args[key] = value
    return ToolCall(name, args)


def render_directive(call: ToolCall) -> str:
    return f"TOOL:{call.name}:{{{','.join(f'{k}:{v}' for k, v in call.arguments.items())}}}"


def find_directives(text: str) -> list[ToolCall]:
    return [c for c in (parse_directive(line) for line in text.split("\n")) if c is not None]


# -------------------------------------------------------------- itinerary

ITINERARY_SECTIONS = ("Destination", "Duration (days)", "Budget", "Interests", "Constraints")


def itinerary_prompt(destination: str, days: int, budget, interests: str, constraints: str) -> str:
    if not isinstance(destination, str) or not destination.strip():
        raise ValidationError("destination must be a non-empty string")
    if isinstance(days, bool) or not isinstance(days, int) or days < 1:
        raise ValidationError(f"days must be an integer >= 1, got {days!r}")
    try:
        budget_value = Decimal(str(budget))
    except InvalidOperation:
        raise ValidationError(f"budget {budget!r} is not a number") from None
    if not budget_value.is_finite() or budget_value <= 0:
        raise ValidationError(f"budget must be > 0, got {budget!r}")
    if not isinstance(interests, str) or not isinstance(constraints, str):
        raise ValidationError("interests and constraints must be strings")
    values = (destination.strip(), str(days), str(budget).strip(),
              interests.strip() or "none", constraints.strip() or "none")
    parts = ["Plan a trip with the details below."]
    for section, value in zip(ITINERARY_SECTIONS, values):
        parts += [f"## {section}", value]
    parts += ["## Requested output",
              "A day-by-day schedule, an activity list for each day, and cost estimates "
              "that stay within the budget."]
    return "\n".join(parts)


# ---------------------------------------------------------- model clients

class InProcessModel:
    """Calls the backend directly; the in-process benchmark configuration."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self._ids = itertools.count(1)

    def query(self, prompt: LabeledPrompt, max_tokens: int) -> InferenceResponse:
        return self.backend.infer(InferenceRequest(next(self._ids), prompt, max_tokens))

    def close(self) -> None:
        pass


class ChannelModel:
    """Queries the model realm over a (plain or sealed) duplex."""

    def __init__(self, duplex):
        self.duplex = duplex
        self._ids = itertools.count(1)

    def query(self, prompt: LabeledPrompt, max_tokens: int) -> InferenceResponse:
        request = InferenceRequest(next(self._ids), prompt, max_tokens)
        try:
            self.duplex.send(request.to_bytes())
            raw = self.duplex.recv()
        except PeerClosed as exc:
            raise ModelChannelDown(f"model realm channel closed: {exc}") from exc
        fields = decode_fields(raw)
        if fields[0] == b"ERROR":
            rid = from_be(fields[1]) if fields[1] else None
            raise InferenceError(fields[2].decode(), fields[3].decode(), rid)
        if fields[0] != b"RESULT" or len(fields) != 4:
            raise WireFormatError("malformed inference response")
        rid = from_be(fields[1])
        if rid != request.request_id:
            raise InferenceError("protocol-error", f"response id {rid} != request id {request.request_id}", rid)
        return InferenceResponse(rid, fields[2].decode("utf-8"), float(fields[3].decode()))

    def close(self) -> None:
        try:
            self.duplex.send(SHUTDOWN, timeout=1.0)
        except Exception:
            pass


class InProcessTools:
    def __init__(self, service):
        self.service = service

    def call(self, call: ToolCall) -> str:
        return self.service.handle_call(call)

    def close(self) -> None:
        pass


_TOOL_ERRORS = {cls.code: cls for cls in (UnknownTool, ToolDenied, BadArguments, ToolChannelDown)}


class ChannelTools:
    def __init__(self, duplex):
        self.duplex = duplex

    def call(self, call: ToolCall) -> str:
        try:
            self.duplex.send(call.to_bytes())
            fields = decode_fields(self.duplex.recv())
        except PeerClosed as exc:
            raise ToolChannelDown(f"tool realm channel closed: {exc}") from exc
        if fields[0] == b"OK":
            return fields[1].decode("utf-8")
        code, message = fields[1].decode(), fields[2].decode()
        raise _TOOL_ERRORS.get(code, ToolError)(message)

    def close(self) -> None:
        try:
            self.duplex.send(encode_fields([b"SHUTDOWN"]), timeout=1.0)
        except Exception:
            pass


# ---------------------------------------------------------------- runtime

@dataclass
class QueryTiming:
    inference_seconds: float
    end_to_end_seconds: float


class AgentRuntime:
    def __init__(self, system_prompt: str | None, model, tools=None,
                 policy: AgentPolicy | None = None):
        self.system_prompt = system_prompt
        self.model = model
        self.tools = tools
        self.policy = policy or AgentPolicy()
        self.state = ConversationState()
        self.last_timings: list[QueryTiming] = []
        self.tool_calls = 0

    def _query(self, prompt: LabeledPrompt) -> str:
        start = time.monotonic()
        response = self.model.query(prompt, self.policy.max_tokens)
        e2e = time.monotonic() - start
        self.last_timings.append(QueryTiming(response.inference_seconds, e2e))
        return response.output

    def run_chatbot_turn(self, user_input: str) -> str:
        if not isinstance(user_input, str) or not user_input.strip():
            raise ValidationError("user input must be non-empty")
        prompt = build_prompt(self.system_prompt, self.state, user_input)
        self.last_timings = []
        output = self._query(prompt)
        self.state.record_turn(prompt.messages[-1].content, output, self.policy.history_budget)
        return output

    def run_itinerary_plan(self, destination: str, days: int, budget, interests: str,
                           constraints: str) -> str:
        request = itinerary_prompt(destination, days, budget, interests, constraints)
        prompt = build_prompt(self.system_prompt, ConversationState(), request)
        self.last_timings = []
        output = self._query(prompt)
        calls = find_directives(output)
        if not calls:
            return output
        messages = list(prompt.messages) + [Message(MsgRole.ASSISTANT, output)]
        for call in calls:
            result = self.dispatch_tool(call)
            messages.append(Message(MsgRole.TOOL, escape_role_markers(f"{call.name}: {result}")))
        return self._query(LabeledPrompt(tuple(messages)))

    def dispatch_tool(self, call: ToolCall) -> str:
        if call.name not in self.policy.tools:
            raise UnknownTool(f"tool {call.name!r} is not registered with this agent")
        if self.tools is None:
            raise ToolChannelDown("no session with a tool realm")
        self.tool_calls += 1
        return self.tools.call(call)

    def reset(self) -> None:
        self.state.clear()

    def close(self) -> None:
        self.model.close()
        if self.tools is not None:
            self.tools.close()
