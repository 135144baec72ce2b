import pytest

from agentee.errors import PipelineNotReady, RealmError
from agentee.inference import ModelConfig
from agentee.measurement import RealmImage, Role
from agentee.pipeline import AgentReplyError, Forwarder, Pipeline, PipelineConfig, wait_until
from agentee.realm_host import RealmState
from agentee.tools import Credential
from conftest import shm_exists

SCRIPTED = ModelConfig("mock", "m", script=(("## Destination", "TOOL:currency:{amount:100,to:EUR}"),))
CRED = Credential("travel-api", b"tok-pipeline-9")


def test_forwarder_before_ready():
    with pytest.raises(PipelineNotReady):
        Forwarder().chat("hello")


@pytest.fixture(scope="module")
def replies():
    """Same requests in both modes; one pipeline per mode."""
    out = {}
    for mode in ("realm-csm", "process-shm"):
        with Pipeline(PipelineConfig(mode, SCRIPTED, credential=CRED)) as p:
            assert all(h.state is RealmState.READY for h in p.handles.values())
            names = list(p.region_names)
            out[mode] = (p.chat("hello"), p.chat("and again"), p.plan("Paris", 3, 1000, "museums", ""))
            with pytest.raises(AgentReplyError) as err:
                p.plan("Paris", 0, 1000)
            assert err.value.code == "validation"
        assert not any(shm_exists(n) for n in names)
    return out


def test_modes_give_identical_replies(replies):
    a, b = replies["realm-csm"], replies["process-shm"]
    assert [r.text for r in a] == [r.text for r in b]


def test_tool_called_once_per_directive(replies):
    plan = replies["realm-csm"][2]
    assert plan.tool_calls == 1 and replies["realm-csm"][0].tool_calls == 0


def test_timings_are_ordered(replies):
    for r in replies["realm-csm"]:
        assert 0 <= r.inference_seconds <= r.end_to_end_seconds


def test_killed_model_surfaces_peer_closed():
    p = Pipeline(PipelineConfig("realm-csm", with_tool=False)).start()
    try:
        p.chat("hello")
        p.kill(Role.MODEL)
        with pytest.raises(AgentReplyError) as err:
            p.chat("anyone there?")
        assert err.value.code == "peer-closed"
        assert p.handles[Role.MODEL].state is RealmState.TERMINATED
        assert p.handles[Role.AGENT].state is RealmState.READY
    finally:
        p.stop()
    assert p.host is None


def test_untrusted_model_blocks_ready(tmp_path):
    rogue = RealmImage(Role.MODEL, b"role=model\nversion=rogue\n")
    cfg = PipelineConfig("realm-csm", with_tool=False, ready_timeout=10, handshake_timeout=3,
                         owner_expectations={Role.AGENT: {Role.MODEL: rogue}}, workdir=str(tmp_path))
    p = Pipeline(cfg)
    with pytest.raises(RealmError):
        p.start()
    agent = p.handles[Role.AGENT]
    assert RealmState.READY not in agent.transitions
    assert agent.state is RealmState.TERMINATED
    assert wait_until(lambda: "PeerTokenInvalid" in (tmp_path / "agent1.log").read_text(), 5)
