import json
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources

import pytest

from agentee.errors import BadArguments, ToolDenied, UnknownTool
from agentee.tools import Credential, ToolCall, ToolDescriptor, ToolService


@pytest.fixture
def service():
    s = ToolService()
    s.provision_credential(Credential("fx", b"tok-123"))
    return s


def test_echo_canonical(service):
    assert service.handle_call(ToolCall("echo", {"b": "2", "a": "1"})) == "a=1;b=2"
    assert service.handle_call(ToolCall("echo", {})) == ""


def test_currency_needs_credential():
    with pytest.raises(ToolDenied):
        ToolService().handle_call(ToolCall("currency", {"amount": "100", "to": "EUR"}))


def test_currency_with_credential(service):
    assert service.handle_call(ToolCall("currency", {"amount": "100", "to": "EUR"})) == "100 USD = 92.00 EUR"


def test_currency_recomputed_from_shipped_table(service):
    raw = json.loads(resources.files("agentee.data").joinpath("rates.json").read_text())
    rate = Decimal(raw["rates"]["GBP"]["EUR"])
    expected = (Decimal("12.5") * rate).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    out = service.handle_call(ToolCall("currency", {"amount": "12.5", "from": "gbp", "to": "eur"}))
    assert out == f"12.5 GBP = {expected} EUR"


@pytest.mark.parametrize("args", [
    {"to": "EUR"}, {"amount": "x", "to": "EUR"}, {"amount": "-1", "to": "EUR"},
    {"amount": "NaN", "to": "EUR"}, {"amount": "1", "to": "XYZ"},
])
def test_currency_bad_arguments(service, args):
    with pytest.raises(BadArguments):
        service.handle_call(ToolCall("currency", args))


def test_weather_is_deterministic(service):
    a = service.handle_call(ToolCall("weather", {"city": "Paris"}))
    assert a == service.handle_call(ToolCall("weather", {"city": "Paris"}))
    assert a.startswith("Paris: ")
    with pytest.raises(BadArguments):
        service.handle_call(ToolCall("weather", {}))


def test_unknown_tool(service):
    with pytest.raises(UnknownTool):
        service.handle_call(ToolCall("wire-money", {}))


def test_credential_never_in_results(service):
    outs = [service.handle_call(ToolCall("echo", {"k": "v"})),
            service.handle_call(ToolCall("currency", {"amount": "1", "to": "JPY"}))]
    assert not any("tok-123" in o for o in outs)


def test_registry_validation():
    with pytest.raises(ValueError):
        ToolDescriptor("x", False, "shell")
    with pytest.raises(ValueError):
        ToolService([ToolDescriptor("a", False, "echo-args")] * 2)
    with pytest.raises(ValueError):
        Credential("k", b"")


def test_call_wire_round_trip():
    from agentee.wire import decode_fields

    call = ToolCall("currency", {"amount": "100", "to": "EUR"})
    assert ToolCall.from_fields(decode_fields(call.to_bytes())) == call
