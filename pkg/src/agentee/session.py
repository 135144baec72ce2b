"""Mutually attested realm-to-realm sessions and sealed data channels.

Handshake over the cleartext bootstrap pair (channels 0/1)::

    M1  A -> B   epkA, token_A   nonce_A = SHA-256(epkA)[:16]
    M2  B -> A   epkB, token_B   nonce_B = SHA-256(epkA || epkB)[:16]
    M3  A -> B   HMAC-SHA256(k_confirm, SHA-256(M1 || M2))

Keys: HKDF-SHA256(X25519(eskA, epkB), info = label || SHA-256(M1 || M2)) -> 96 bytes,
split into A->B key, B->A key and the confirmation key.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .attestation import TokenFactory, TrustAnchor, raw_public, verify_token
from .csm import FLAG_SEALED, Duplex, frame_header
from .errors import (
    AttestationError,
    AuthFailed,
    CorruptFrame,
    HandshakeTimeout,
    KeyConfirmFailed,
    OversizedMessage,
    PeerTokenInvalid,
    ReplayOrReorder,
    SessionAbsent,
    SessionError,
    WireFormatError,
)
from .measurement import Role
from .wire import decode_fields, encode_fields

KDF_LABEL = b"agentee-csm-session-v1"
TAG_SIZE = 16
DEFAULT_HANDSHAKE_TIMEOUT = 30.0


class HandshakeRejected(SessionError):
    """The peer aborted the handshake (it rejected our token or confirmation)."""


@dataclass
class HandshakeTranscript:
    m1: bytes = b""
    m2: bytes = b""
    m3: bytes = b""

    def hash(self) -> bytes:
        return hashlib.sha256(self.m1 + self.m2).digest()


@dataclass
class SessionKeys:
    key_a_to_b: bytes
    key_b_to_a: bytes
    established: bool = False

    def directional(self, side: str) -> tuple[bytes, bytes]:
        """(send key, receive key) for the given side."""
        if side == "A":
            return self.key_a_to_b, self.key_b_to_a
        return self.key_b_to_a, self.key_a_to_b

    def fingerprint(self) -> str:
        return hashlib.sha256(self.key_a_to_b + self.key_b_to_a).hexdigest()


def derive_session_keys(shared_secret: bytes, transcript_hash: bytes) -> tuple[bytes, bytes, bytes]:
    okm = HKDF(algorithm=hashes.SHA256(), length=96, salt=None,
               info=KDF_LABEL + transcript_hash).derive(shared_secret)
    return okm[:32], okm[32:64], okm[64:]


def initiator_nonce(epk_a: bytes) -> bytes:
    return hashlib.sha256(epk_a).digest()[:16]


def responder_nonce(epk_a: bytes, epk_b: bytes) -> bytes:
    return hashlib.sha256(epk_a + epk_b).digest()[:16]


def _recv(bootstrap: Duplex, timeout: float | None, step: str) -> tuple[bytes, list[bytes]]:
    try:
        raw = bootstrap.recv(timeout=timeout)
    except TimeoutError:
        raise HandshakeTimeout(f"no {step} within {timeout}s") from None
    try:
        fields = decode_fields(raw)
    except WireFormatError as exc:
        raise SessionError(f"malformed {step}: {exc}") from exc
    if fields and fields[0] == b"ABORT":
        reason = fields[1].decode("utf-8", "replace") if len(fields) > 1 else "unspecified"
        raise HandshakeRejected(f"peer aborted handshake at {step}: {reason}")
    return raw, fields


def _check_peer(token: bytes, epk: bytes, anchor: TrustAnchor, peer_role: Role,
                nonce: bytes, bootstrap: Duplex) -> None:
    try:
        verified_pk = verify_token(token, anchor, peer_role, nonce)
        if verified_pk != epk:
            raise AttestationError("token is bound to a different session key")
    except (AttestationError, WireFormatError) as exc:
        try:
            bootstrap.send(encode_fields([b"ABORT", f"peer token rejected ({type(exc).__name__})"]))
        except Exception:
            pass
        raise PeerTokenInvalid(f"{peer_role.value} token rejected: {exc}") from exc


def handshake_initiate(bootstrap: Duplex, token_factory: TokenFactory, anchor: TrustAnchor,
                       peer_role: Role | str, timeout: float | None = DEFAULT_HANDSHAKE_TIMEOUT,
                       transcript: HandshakeTranscript | None = None) -> SessionKeys:
    peer_role = Role(peer_role)
    transcript = transcript if transcript is not None else HandshakeTranscript()
    esk = X25519PrivateKey.generate()
    epk_a = raw_public(esk)
    token_a = token_factory(epk_a, initiator_nonce(epk_a))
    transcript.m1 = encode_fields([epk_a, token_a.to_bytes()])
    bootstrap.send(transcript.m1)

    transcript.m2, fields = _recv(bootstrap, timeout, "M2")
    if len(fields) != 2 or len(fields[0]) != 32:
        raise SessionError("M2 must carry an ephemeral key and a token")
    epk_b, token_b = fields
    _check_peer(token_b, epk_b, anchor, peer_role, responder_nonce(epk_a, epk_b), bootstrap)

    shared = esk.exchange(X25519PublicKey.from_public_bytes(epk_b))
    k_ab, k_ba, k_confirm = derive_session_keys(shared, transcript.hash())
    transcript.m3 = encode_fields([hmac.new(k_confirm, transcript.hash(), hashlib.sha256).digest()])
    bootstrap.send(transcript.m3)
    return SessionKeys(k_ab, k_ba, established=True)


def handshake_respond(bootstrap: Duplex, token_factory: TokenFactory, anchor: TrustAnchor,
                      peer_role: Role | str, timeout: float | None = DEFAULT_HANDSHAKE_TIMEOUT,
                      transcript: HandshakeTranscript | None = None) -> SessionKeys:
    peer_role = Role(peer_role)
    transcript = transcript if transcript is not None else HandshakeTranscript()
    transcript.m1, fields = _recv(bootstrap, timeout, "M1")
    if len(fields) != 2 or len(fields[0]) != 32:
        raise SessionError("M1 must carry an ephemeral key and a token")
    epk_a, token_a = fields
    _check_peer(token_a, epk_a, anchor, peer_role, initiator_nonce(epk_a), bootstrap)

    esk = X25519PrivateKey.generate()
    epk_b = raw_public(esk)
    token_b = token_factory(epk_b, responder_nonce(epk_a, epk_b))
    transcript.m2 = encode_fields([epk_b, token_b.to_bytes()])
    bootstrap.send(transcript.m2)

    shared = esk.exchange(X25519PublicKey.from_public_bytes(epk_a))
    k_ab, k_ba, k_confirm = derive_session_keys(shared, transcript.hash())
    transcript.m3, fields = _recv(bootstrap, timeout, "M3")
    expected = hmac.new(k_confirm, transcript.hash(), hashlib.sha256).digest()
    if len(fields) != 1 or not hmac.compare_digest(fields[0], expected):
        raise KeyConfirmFailed("initiator's key confirmation MAC does not match")
    return SessionKeys(k_ab, k_ba, established=True)


def aead_nonce(channel: int, seq: int) -> bytes:
    return channel.to_bytes(4, "big") + seq.to_bytes(8, "big")


class SecureDuplex:
    """Sealed send/receive over a data-channel pair of an established session."""

    sealed = True

    def __init__(self, keys: SessionKeys | None, side: str, duplex: Duplex):
        if keys is None or not keys.established:
            raise SessionAbsent("no established session for this channel pair")
        if duplex.producer.index < 2 or duplex.consumer.index < 2:
            raise ValueError("sealed traffic is only allowed on data channels (index >= 2)")
        send_key, recv_key = keys.directional(side)
        self._seal = ChaCha20Poly1305(send_key)
        self._open = ChaCha20Poly1305(recv_key)
        self.duplex = duplex
        self._last_sent_seq = -1

    @property
    def max_message(self) -> int:
        return self.duplex.producer.max_payload - TAG_SIZE

    def seal_send(self, plaintext: bytes, timeout: float | None = None) -> None:
        prod = self.duplex.producer
        seq = prod.next_seq
        # (channel, seq) must never repeat under one key
        assert seq > self._last_sent_seq, "AEAD nonce reuse"
        if len(plaintext) > self.max_message:
            raise OversizedMessage(f"{len(plaintext)} bytes exceeds sealed max {self.max_message}")
        header = frame_header(prod.index, FLAG_SEALED, seq, len(plaintext) + TAG_SIZE)
        sealed = self._seal.encrypt(aead_nonce(prod.index, seq), plaintext, header)
        prod.write_frame(header + sealed, timeout=timeout)
        self._last_sent_seq = seq

    def open_recv(self, timeout: float | None = None) -> bytes:
        cons = self.duplex.consumer
        try:
            frame = cons.recv_frame(timeout, check_seq=False)
        except CorruptFrame as exc:
            raise AuthFailed(f"tampered frame header: {exc}") from exc
        if not frame.flags & FLAG_SEALED:
            raise AuthFailed(f"unsealed frame on sealed channel {cons.index}")
        try:
            plaintext = self._open.decrypt(aead_nonce(frame.channel, frame.seq),
                                           frame.payload, frame.header)
        except InvalidTag:
            raise AuthFailed(f"frame seq {frame.seq} on channel {cons.index} failed authentication") from None
        if frame.seq != cons.expected_seq:
            raise ReplayOrReorder(f"expected seq {cons.expected_seq}, got {frame.seq}")
        cons.expected_seq += 1
        return plaintext

    send = seal_send
    recv = open_recv
