"""End-to-end acceptance criteria; each test reports one PASS/FAIL line in the summary."""

import multiprocessing as mp
import os
import subprocess
import sys
import time
from decimal import Decimal

import pytest

import peers
import table1
from agentee.agent import AgentPolicy, AgentRuntime, InProcessModel, InProcessTools
from agentee.attestation import PlatformKey, TrustAnchor, issue_token, verify_token
from agentee.bench import BenchSetup, compute_overhead, load_queries, median, run_bench
from agentee.csm import FRAME_HEADER_SIZE, read_layout
from agentee.errors import AttestationError, MeasurementMismatch, NonceMismatch, RealmError
from agentee.inference import Backend, ModelConfig
from agentee.measurement import RealmImage, Role, measure_image
from agentee.observer import Observer
from agentee.pipeline import AgentReplyError, Pipeline, PipelineConfig, data_path, default_system_prompt
from agentee.realm_host import RealmState
from agentee.tools import Credential, ToolService

SPAWN = mp.get_context("spawn")


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# ------------------------------------------------------------------- 1

@pytest.mark.criterion(1, "all 16 published overhead cells reproduce within 0.01 in under 1 s")
def test_criterion_1_published_overheads(request):
    start = time.monotonic()
    misses = []
    cells = table1.cells()
    for agent, model, baseline, metric, subject, base, published in cells:
        got = compute_overhead(subject, base)
        if abs(got - published) > Decimal("0.01"):
            misses.append(f"{agent}/{model}/{metric} vs {baseline}: {got} != {published}")
    elapsed = time.monotonic() - start
    detail(request, f"{len(cells) - len(misses)}/16 within 0.01; {elapsed:.3f}s"
           + (f"; off: {'; '.join(misses)}" if misses else ""))
    assert len(cells) == 16
    assert elapsed < 1.0
    assert not misses, misses


# ------------------------------------------------------------------- 2

@pytest.mark.slow
@pytest.mark.criterion(2, "timed-mock median e2e overhead < 5% vs in-process and < 3% vs process-shm")
def test_criterion_2_timed_mock_overhead(request):
    start = time.monotonic()
    cfg = ModelConfig.from_text(data_path("model_gpt2.conf").read_text())
    assert cfg.backend == "timed-mock" and cfg.per_token_delay_ms == 100
    queries = load_queries(data_path("queries_chatbot.txt"), "chatbot")
    configs = ["in-process", "process-shm", "realm-csm"]
    attempts = []
    for _ in range(3):
        records = run_bench("chatbot", cfg, configs, queries, BenchSetup(max_tokens=20))
        med = {c: median(r.end_to_end_seconds for r in records if r.config == c) for c in configs}
        vs_proc = compute_overhead(med["realm-csm"], med["in-process"])
        vs_vm = compute_overhead(med["realm-csm"], med["process-shm"])
        attempts.append((vs_proc, vs_vm))
        if vs_proc < 5 and vs_vm < 3:
            break
    elapsed = time.monotonic() - start
    best = min(attempts)
    detail(request, f"vs in-process {best[0]}%, vs process-shm {best[1]}%, "
           f"{len(attempts)} run(s), {elapsed:.0f}s")
    assert elapsed < 300
    assert any(p < 5 and v < 3 for p, v in attempts), attempts


# ------------------------------------------------------------------- 3

@pytest.mark.criterion(3, "no single-bit token flip verifies; mismatch and replay rejected")
def test_criterion_3_token_tampering(request):
    start = time.monotonic()
    platform = PlatformKey()
    agent_img = RealmImage(Role.AGENT, b"role=agent\n")
    anchor = TrustAnchor(platform.verify_key, {Role.AGENT: measure_image(agent_img)})
    pk, nonce = os.urandom(32), os.urandom(16)
    raw = issue_token(measure_image(agent_img), pk, nonce, platform).to_bytes()
    assert verify_token(raw, anchor, Role.AGENT, nonce) == pk

    accepted = 0
    flips = 0
    for bit in range(len(raw) * 8):
        tampered = bytearray(raw)
        tampered[bit // 8] ^= 1 << (bit % 8)
        flips += 1
        try:
            verify_token(bytes(tampered), anchor, Role.AGENT, nonce)
            accepted += 1
        except AttestationError:
            pass

    # a validly signed token for a different image
    rogue = issue_token(measure_image(RealmImage(Role.AGENT, b"role=agent\nbackdoor\n")), pk, nonce, platform)
    with pytest.raises(MeasurementMismatch):
        verify_token(rogue, anchor, Role.AGENT, nonce)
    # an old token presented against a fresh challenge
    with pytest.raises(NonceMismatch):
        verify_token(raw, anchor, Role.AGENT, os.urandom(16))
    elapsed = time.monotonic() - start
    detail(request, f"{accepted} of {flips} flips accepted; {elapsed:.2f}s")
    assert flips == 1216
    assert accepted == 0
    assert elapsed < 10


# ------------------------------------------------------------------- 4

@pytest.mark.criterion(4, "10,000 messages byte-exact FIFO across a process boundary")
def test_criterion_4_cross_process_fifo(request, region_factory):
    start = time.monotonic()
    count, seed = 10_000, 4242
    region = region_factory()
    max_payload = read_layout(region).max_payload
    cons = region_factory.attach(region, "B", bells=True).consumer(0)
    expected = list(peers.message_stream(seed, count, max_payload))
    producer = SPAWN.Process(target=peers.produce, args=(region.name, region_factory.bell_dir, seed, count))
    producer.start()

    # hold off until the ring is full so the producer has to block
    deadline = time.monotonic() + 20
    full = cons.capacity - (max_payload + FRAME_HEADER_SIZE)
    while cons.head - cons.tail < full and time.monotonic() < deadline:
        time.sleep(0.01)
    time.sleep(0.2)
    # tens of MB are still pending, so a live producer facing a full ring is stalled
    blocked = producer.is_alive() and cons.tail == 0 and cons.head - cons.tail >= full

    mismatches = 0
    for i, want in enumerate(expected):
        if cons.recv(timeout=30) != want:
            mismatches += 1
    producer.join(30)
    total = sum(len(m) for m in expected)
    elapsed = time.monotonic() - start
    detail(request, f"{count} messages, {total} bytes ({total // cons.capacity} ring wraps), "
           f"{mismatches} mismatches, producer blocked={blocked}, {elapsed:.1f}s")
    assert producer.exitcode == 0
    assert mismatches == 0
    assert any(len(m) == 0 for m in expected) and any(len(m) == max_payload for m in expected)
    assert total > 2 * cons.capacity
    assert blocked
    assert not cons.poll()
    assert elapsed < 60


# ------------------------------------------------------------------- 5

MARK_SYSTEM = "SYSMARK-7f3a91c2"
MARK_QUERY = "QRYMARK-b64e0d55"
MARK_OUTPUT = "OUTMARK-9c1d27e8"
MARK_CRED = "CREDMARK-e2a4f610"


def observe(mode):
    cfg = PipelineConfig(
        mode,
        ModelConfig("mock", "m", script=((MARK_QUERY, f"Sure. {MARK_OUTPUT}"),
                                         ("## Destination", "TOOL:currency:{amount:5,to:EUR}"))),
        system_prompt=f"You are a careful assistant. {MARK_SYSTEM}",
        credential=Credential("travel-api", MARK_CRED.encode()))
    pipeline = Pipeline(cfg)
    observer = Observer(lambda: pipeline.region_names, [MARK_SYSTEM, MARK_QUERY, MARK_OUTPUT, MARK_CRED])
    observer.start()
    try:
        pipeline.start()
        assert MARK_OUTPUT in pipeline.chat(f"please answer {MARK_QUERY}").text
        assert pipeline.plan("Paris", 2, 300).tool_calls == 1
        observer.stop()
    finally:
        if observer._thread.is_alive():
            observer.stop()
        pipeline.stop()
    return {p.decode(): n for p, n in observer.hits_per_probe().items()}, len(observer.scanned)


@pytest.mark.criterion(5, "observer: 0 hits on realm-csm, >=1 hit per probe on process-shm")
def test_criterion_5_observer(request):
    start = time.monotonic()
    sealed, n_sealed = observe("realm-csm")
    clear, n_clear = observe("process-shm")
    elapsed = time.monotonic() - start
    detail(request, f"realm-csm {sum(sealed.values())} hits over {n_sealed} regions; "
           f"process-shm per probe {list(clear.values())}; {elapsed:.1f}s")
    assert n_sealed >= 3 and n_clear >= 3
    assert sum(sealed.values()) == 0, sealed
    assert all(n >= 1 for n in clear.values()), clear
    assert elapsed < 60


# ------------------------------------------------------------------- 6

SCRIPT = (("## Destination", "Checking.\nTOOL:currency:{amount:100,to:EUR}\nTOOL:weather:{city:Paris}"),)
SESSION = ["hello", "/plan Paris|3|1000|museums|no flights", "what about Rome?", "/reset", "hello"]


def expected_transcript(cfg, secret):
    service = ToolService()
    service.provision_credential(Credential("travel-api", secret))
    rt = AgentRuntime(default_system_prompt(), InProcessModel(Backend(cfg)), InProcessTools(service),
                      AgentPolicy())
    out = [rt.run_chatbot_turn("hello"),
           rt.run_itinerary_plan("Paris", 3, "1000", "museums", "no flights"),
           rt.run_chatbot_turn("what about Rome?")]
    rt.reset()
    out += ["(history cleared)", rt.run_chatbot_turn("hello")]
    return "".join(line + "\n" for line in out)


@pytest.mark.slow
@pytest.mark.criterion(6, "chat transcript byte-identical over 5 runs; one tool call per directive")
def test_criterion_6_deterministic_chat(request, tmp_path):
    cfg = ModelConfig("mock", "GPT2-Medium-q8_0", script=SCRIPT)
    conf = tmp_path / "model.conf"
    conf.write_text(cfg.to_text())
    secret = b"tok-acceptance-6"
    cred = tmp_path / "travel-api.key"
    cred.write_bytes(secret + b"\n")
    stdin = "".join(line + "\n" for line in SESSION)

    outputs = []
    for _ in range(5):
        proc = subprocess.run([sys.executable, "-m", "agentee.cli", "chat", "--model-config", str(conf),
                               "--credential-file", str(cred)],
                              input=stdin.encode(), capture_output=True, timeout=120)
        assert proc.returncode == 0, proc.stderr.decode()
        outputs.append(proc.stdout)
    identical = len(set(outputs)) == 1
    matches_oracle = outputs[0].decode() == expected_transcript(cfg, secret)

    workdir = tmp_path / "run"
    workdir.mkdir()
    with Pipeline(PipelineConfig("realm-csm", cfg, credential=Credential("travel-api", secret),
                                 workdir=str(workdir))) as p:
        reply = p.plan("Paris", 3, 1000, "museums", "no flights")
    tool_log = (workdir / "tool3.log").read_text()
    logged = tool_log.count("tool call ")
    detail(request, f"{len(set(outputs))} distinct transcript(s) over 5 runs, oracle match={matches_oracle}; "
           f"2 directives -> {reply.tool_calls} reported, {logged} served")
    assert identical
    assert matches_oracle
    assert reply.tool_calls == 2 and logged == 2
    assert "tool realm served 2 calls" in tool_log


# ------------------------------------------------------------------- 7

@pytest.mark.criterion(7, "READY only after agent-model handshake; killed model gives peer-closed")
def test_criterion_7_readiness_and_peer_loss(request, tmp_path):
    full = [RealmState.LAUNCHED, RealmState.ATTESTED, RealmState.PROVISIONED, RealmState.READY]

    # a model image the agent's owner does not pin: no handshake, no READY
    neg_dir = tmp_path / "neg"
    neg_dir.mkdir()
    rogue = RealmImage(Role.MODEL, b"role=model\nversion=unpinned\n")
    neg = Pipeline(PipelineConfig("realm-csm", with_tool=False, ready_timeout=10, handshake_timeout=3,
                                  owner_expectations={Role.AGENT: {Role.MODEL: rogue}},
                                  workdir=str(neg_dir)))
    with pytest.raises(RealmError):
        neg.start()
    neg_agent = neg.handles[Role.AGENT].transitions
    assert RealmState.READY not in neg_agent
    assert not neg.forwarder.ready

    pos_dir = tmp_path / "pos"
    pos_dir.mkdir()
    p = Pipeline(PipelineConfig("realm-csm", with_tool=False, workdir=str(pos_dir))).start()
    try:
        agent = p.handles[Role.AGENT]
        assert agent.transitions == full and p.handles[Role.MODEL].transitions == full
        assert "session with model established" in (pos_dir / "agent1.log").read_text()
        p.chat("hello")
        p.kill(Role.MODEL)
        with pytest.raises(AgentReplyError) as err:
            p.chat("still there?")
        code = err.value.code
        host_alive = p.host is not None and agent.state is RealmState.READY
        model_state = p.handles[Role.MODEL].state
    finally:
        p.stop()
    detail(request, f"rogue model: agent reached {[s.value for s in neg_agent]}; "
           f"after kill: code={code}, model {model_state.value}, host alive={host_alive}")
    assert code == "peer-closed"
    assert host_alive and model_state is RealmState.TERMINATED
