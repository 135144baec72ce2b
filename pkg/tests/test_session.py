import hashlib
import threading

import pytest

from agentee.attestation import PlatformKey, TrustAnchor, issue_token
from agentee.csm import FRAME_HEADER_SIZE
from agentee.errors import (
    AuthFailed,
    HandshakeTimeout,
    KeyConfirmFailed,
    OversizedMessage,
    PeerTokenInvalid,
    ReplayOrReorder,
    SessionAbsent,
    SessionError,
)
from agentee.measurement import RealmImage, Role, measure_image
from agentee.session import (
    HandshakeTranscript,
    SecureDuplex,
    SessionKeys,
    handshake_initiate,
    handshake_respond,
)
from agentee.wire import decode_fields, encode_fields

AGENT = RealmImage(Role.AGENT, b"agent build 1")
MODEL = RealmImage(Role.MODEL, b"model build 1")


@pytest.fixture(scope="module")
def platform():
    return PlatformKey()


@pytest.fixture(scope="module")
def anchor(platform):
    return TrustAnchor(platform.verify_key, {Role.AGENT: measure_image(AGENT),
                                             Role.MODEL: measure_image(MODEL)})


def factory(platform, image):
    return lambda pk, nonce: issue_token(measure_image(image), pk, nonce, platform)


def run_handshake(region_factory, platform, anchor, agent_image=AGENT, model_image=MODEL,
                  responder=None):
    region = region_factory()
    a = region_factory.attach(region, "A")
    b = region_factory.attach(region, "B")
    out = {}

    def respond():
        try:
            fn = responder or (lambda boot: handshake_respond(
                boot, factory(platform, model_image), anchor, Role.AGENT, timeout=5))
            out["keys"] = fn(b.bootstrap())
        except Exception as exc:
            out["error"] = exc

    t = threading.Thread(target=respond)
    t.start()
    try:
        keys = handshake_initiate(a.bootstrap(), factory(platform, agent_image), anchor,
                                  Role.MODEL, timeout=5)
    finally:
        t.join(10)
    return keys, out, a, b


def test_both_sides_derive_equal_keys(region_factory, platform, anchor):
    keys_a, out, _, _ = run_handshake(region_factory, platform, anchor)
    keys_b = out["keys"]
    assert keys_a.established and keys_b.established
    assert keys_a.fingerprint() == keys_b.fingerprint()
    assert keys_a.key_a_to_b != keys_a.key_b_to_a


def test_modified_responder_image(region_factory, platform, anchor):
    with pytest.raises(PeerTokenInvalid):
        run_handshake(region_factory, platform, anchor,
                      model_image=RealmImage(Role.MODEL, b"model build 1 + backdoor"))


def test_responder_rejects_modified_initiator(region_factory, platform, anchor):
    region = region_factory()
    a = region_factory.attach(region, "A")
    b = region_factory.attach(region, "B")
    result = {}

    def respond():
        try:
            handshake_respond(b.bootstrap(), factory(platform, MODEL), anchor, Role.AGENT, timeout=5)
        except Exception as exc:
            result["error"] = exc

    t = threading.Thread(target=respond)
    t.start()
    # the responder rejects M1 and tells the initiator, which fails too
    with pytest.raises(SessionError):
        handshake_initiate(a.bootstrap(), factory(platform, RealmImage(Role.AGENT, b"other")),
                           anchor, Role.MODEL, timeout=5)
    t.join(10)
    assert isinstance(result["error"], PeerTokenInvalid)


def test_replayed_m2_rejected(region_factory, platform, anchor):
    """An M2 captured from one handshake is bound to that run's epkA."""
    captured = HandshakeTranscript()

    def honest(boot):
        return handshake_respond(boot, factory(platform, MODEL), anchor, Role.AGENT,
                                 timeout=5, transcript=captured)

    run_handshake(region_factory, platform, anchor, responder=honest)
    assert captured.m2

    def replayer(boot):
        boot.recv(timeout=5)  # fresh M1
        boot.send(captured.m2)
        return None

    with pytest.raises(PeerTokenInvalid):
        run_handshake(region_factory, platform, anchor, responder=replayer)


def test_bad_key_confirmation(region_factory, platform, anchor):
    region = region_factory()
    a = region_factory.attach(region, "A")
    b = region_factory.attach(region, "B")
    result = {}

    def respond():
        try:
            handshake_respond(b.bootstrap(), factory(platform, MODEL), anchor, Role.AGENT, timeout=5)
        except Exception as exc:
            result["error"] = exc

    t = threading.Thread(target=respond)
    t.start()
    boot = a.bootstrap()
    # run an honest initiator but corrupt its M3 on the wire
    real_send = boot.send
    sent = []

    def tamper(msg, timeout=None):
        sent.append(msg)
        if len(sent) == 2:  # M3
            mac = decode_fields(msg)[0]
            msg = encode_fields([bytes([mac[0] ^ 1]) + mac[1:]])
        real_send(msg, timeout)

    boot.send = tamper
    handshake_initiate(boot, factory(platform, AGENT), anchor, Role.MODEL, timeout=5)
    t.join(10)
    assert isinstance(result["error"], KeyConfirmFailed)


def test_handshake_timeout(region_factory, platform, anchor):
    region = region_factory()
    a = region_factory.attach(region, "A")
    region_factory.attach(region, "B")
    with pytest.raises(HandshakeTimeout):
        handshake_initiate(a.bootstrap(), factory(platform, AGENT), anchor, Role.MODEL, timeout=0.2)


# ------------------------------------------------------------------ sealing

@pytest.fixture
def sealed(region_factory):
    keys = SessionKeys(hashlib.sha256(b"k1").digest(), hashlib.sha256(b"k2").digest(), True)
    region = region_factory()
    a = region_factory.attach(region, "A")
    b = region_factory.attach(region, "B")
    return SecureDuplex(keys, "A", a.pair(2)), SecureDuplex(keys, "B", b.pair(2))


@pytest.mark.parametrize("payload", [b"", b"x", bytes(range(256)) * 10])
def test_sealed_round_trip(sealed, payload):
    sa, sb = sealed
    sa.seal_send(payload)
    assert sb.open_recv(timeout=1) == payload
    sb.seal_send(payload[::-1])
    assert sa.open_recv(timeout=1) == payload[::-1]


def test_ciphertext_does_not_contain_plaintext(sealed):
    sa, _ = sealed
    sa.seal_send(b"very secret system prompt")
    ring = bytes(sa.duplex.producer._data)
    assert b"very secret" not in ring


def test_every_bit_flip_in_a_short_frame_fails_auth(sealed):
    """Flip each bit of header, ciphertext and tag in turn; none may open."""
    sa, sb = sealed
    prod, cons = sa.duplex.producer, sb.duplex.consumer
    message = b"tiny"
    frame_len = FRAME_HEADER_SIZE + len(message) + 16
    failures = 0
    for bit in range(frame_len * 8):
        start = prod.head
        sa.seal_send(message)
        idx = (start + bit // 8) & (prod.capacity - 1)
        prod._data[idx] ^= 1 << (bit % 8)
        try:
            sb.open_recv(timeout=1)
        except AuthFailed:
            failures += 1
        finally:
            # realign: both sides consumed one frame
            cons._tail.value = prod.head
            cons.expected_seq = prod.next_seq
    assert failures == frame_len * 8


def test_duplicated_frame_is_replay(sealed):
    sa, sb = sealed
    prod = sa.duplex.producer
    start = prod.head
    sa.seal_send(b"transfer 100")
    frame = prod._copy_out(start, prod.head - start)
    assert sb.open_recv(timeout=1) == b"transfer 100"
    prod._write_raw(frame)
    with pytest.raises(ReplayOrReorder):
        sb.open_recv(timeout=1)


def test_plain_frame_on_sealed_channel(sealed):
    sa, sb = sealed
    sa.duplex.producer.send(b"cleartext")
    with pytest.raises(AuthFailed):
        sb.open_recv(timeout=1)


def test_no_session(region_factory):
    region = region_factory()
    a = region_factory.attach(region, "A")
    with pytest.raises(SessionAbsent):
        SecureDuplex(None, "A", a.pair(2))
    with pytest.raises(SessionAbsent):
        SecureDuplex(SessionKeys(bytes(32), bytes(32), established=False), "A", a.pair(2))
    with pytest.raises(ValueError):
        SecureDuplex(SessionKeys(bytes(32), bytes(32), True), "A", a.bootstrap())


def test_sealed_oversize(sealed):
    sa, _ = sealed
    with pytest.raises(OversizedMessage):
        sa.seal_send(bytes(sa.max_message + 1))
