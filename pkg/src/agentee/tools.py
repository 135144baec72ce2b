"""Third-party tool realm: registered mock tools behind an optional credential."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from importlib import resources

from .errors import BadArguments, PeerClosed, ToolDenied, ToolError, UnknownTool, WireFormatError
from .wire import decode_fields, encode_fields

log = logging.getLogger(__name__)

HANDLERS = ("echo-args", "currency-mock", "weather-mock")


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, str] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        fields = [b"CALL", self.name]
        for k, v in self.arguments.items():
            fields += [k, v]
        return encode_fields(fields)

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "ToolCall":
        if len(fields) < 2 or fields[0] != b"CALL" or len(fields) % 2:
            raise WireFormatError("malformed tool call")
        args = {}
        for k, v in zip(fields[2::2], fields[3::2]):
            args[k.decode()] = v.decode()
        return cls(fields[1].decode(), args)


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    required_credential: bool
    handler_id: str

    def __post_init__(self):
        if self.handler_id not in HANDLERS:
            raise ValueError(f"unknown tool handler {self.handler_id!r}")


@dataclass(frozen=True)
class Credential:
    key_id: str
    secret: bytes

    def __post_init__(self):
        if not self.secret:
            raise ValueError("credential secret must be non-empty")

    def to_bytes(self) -> bytes:
        return encode_fields([self.key_id, self.secret])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Credential":
        key_id, secret = decode_fields(data)
        return cls(key_id.decode(), secret)


DEFAULT_TOOLS = (
    ToolDescriptor("echo", False, "echo-args"),
    ToolDescriptor("currency", True, "currency-mock"),
    ToolDescriptor("weather", False, "weather-mock"),
)


def load_rate_table() -> dict[str, dict[str, Decimal]]:
    """Synthetic exchange rates shipped with the package."""
    raw = json.loads(resources.files("agentee.data").joinpath("rates.json").read_text())
    return {base: {q: Decimal(r) for q, r in quotes.items()}
            for base, quotes in raw["rates"].items()}


def _echo_args(args: dict[str, str]) -> str:
    return ";".join(f"{k}={args[k]}" for k in sorted(args))


def _currency(args: dict[str, str], rates: dict[str, dict[str, Decimal]]) -> str:
    if "amount" not in args or "to" not in args:
        raise BadArguments("currency needs amount and to")
    base = args.get("from", "USD").upper()
    quote = args["to"].upper()
    try:
        amount = Decimal(args["amount"])
    except InvalidOperation:
        raise BadArguments(f"amount {args['amount']!r} is not a number") from None
    if not amount.is_finite() or amount < 0:
        raise BadArguments("amount must be a non-negative number")
    try:
        rate = rates[base][quote]
    except KeyError:
        raise BadArguments(f"no rate for {base}->{quote}") from None
    converted = (amount * rate).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{args['amount']} {base} = {converted} {quote}"


_CONDITIONS = ("clear", "partly cloudy", "overcast", "light rain", "windy")


def _weather(args: dict[str, str]) -> str:
    city = args.get("city")
    if not city:
        raise BadArguments("weather needs city")
    h = hashlib.sha256(city.strip().lower().encode()).digest()
    return f"{city}: {5 + h[0] % 25}C, {_CONDITIONS[h[1] % len(_CONDITIONS)]}"


class ToolService:
    def __init__(self, tools=DEFAULT_TOOLS, rates=None):
        self.tools = {}
        for t in tools:
            if t.name in self.tools:
                raise ValueError(f"duplicate tool name {t.name!r}")
            self.tools[t.name] = t
        self.rates = rates if rates is not None else load_rate_table()
        self._credential: Credential | None = None

    @property
    def has_credential(self) -> bool:
        return self._credential is not None

    def provision_credential(self, credential: Credential) -> None:
        self._credential = credential

    def handle_call(self, call: ToolCall) -> str:
        tool = self.tools.get(call.name)
        if tool is None:
            raise UnknownTool(f"no tool named {call.name!r}")
        if tool.required_credential and self._credential is None:
            raise ToolDenied(f"{call.name} requires a provisioned credential")
        if tool.handler_id == "echo-args":
            return _echo_args(call.arguments)
        if tool.handler_id == "currency-mock":
            return _currency(call.arguments, self.rates)
        return _weather(call.arguments)

    def serve(self, duplex) -> int:
        """Answer calls until SHUTDOWN or the peer goes away. Returns calls served."""
        served = 0
        while True:
            try:
                raw = duplex.recv()
            except PeerClosed:
                return served
            try:
                fields = decode_fields(raw)
                if fields == [b"SHUTDOWN"]:
                    return served
                call = ToolCall.from_fields(fields)
            except (WireFormatError, UnicodeDecodeError) as exc:
                duplex.send(encode_fields([b"ERR", "bad-arguments", f"malformed call: {exc}"]))
                continue
            try:
                reply = [b"OK", self.handle_call(call)]
            except ToolError as exc:
                reply = [b"ERR", exc.code, str(exc)]
            served += 1
            log.info("tool call %s -> %s", call.name, reply[0].decode())
            duplex.send(encode_fields(reply))
