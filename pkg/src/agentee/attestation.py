"""Platform-signed attestation tokens and owner-side asset provisioning.

Token wire format (152 bytes, no internal framing)::

    measurement digest (32) | session public key (32) | nonce (16) | platform id (8) | signature (64)

The Ed25519 signature covers the first 88 bytes.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import socket
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    AckDigestMismatch,
    AttestationError,
    BadNonceLength,
    BadSignature,
    MeasurementMismatch,
    NonceMismatch,
    ProvisioningError,
    RoleAssetMismatch,
    SessionNotVerified,
    WireFormatError,
)
from .measurement import Measurement, Role
from .wire import decode_fields, encode_fields, recv_frame, send_frame

NONCE_SIZE = 16
PUBLIC_KEY_SIZE = 32
PLATFORM_ID_SIZE = 8
SIGNATURE_SIZE = 64
SIGNED_SIZE = 32 + PUBLIC_KEY_SIZE + NONCE_SIZE + PLATFORM_ID_SIZE
TOKEN_SIZE = SIGNED_SIZE + SIGNATURE_SIZE

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw


def raw_public(key) -> bytes:
    return key.public_key().public_bytes(_RAW, _RAW_PUB)


# ------------------------------------------------------------------ tokens

@dataclass(frozen=True)
class AttestationToken:
    measurement: Measurement
    session_public_key: bytes
    nonce: bytes
    platform_id: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return self.measurement.digest + self.session_public_key + self.nonce + self.platform_id

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationToken":
        if len(data) != TOKEN_SIZE:
            raise WireFormatError(f"attestation token must be {TOKEN_SIZE} bytes, got {len(data)}")
        return cls(
            measurement=Measurement(bytes(data[0:32])),
            session_public_key=bytes(data[32:64]),
            nonce=bytes(data[64:80]),
            platform_id=bytes(data[80:88]),
            signature=bytes(data[88:152]),
        )


class PlatformKey:
    """Stand-in for the firmware key that signs realm evidence; one per run."""

    def __init__(self, private_key: Ed25519PrivateKey | None = None):
        self._key = private_key or Ed25519PrivateKey.generate()
        self.verify_key = raw_public(self._key)
        self.platform_id = hashlib.sha256(self.verify_key).digest()[:PLATFORM_ID_SIZE]

    def sign(self, data: bytes) -> bytes:
        return self._key.sign(data)


TokenFactory = Callable[[bytes, bytes], AttestationToken]


def issue_token(measurement: Measurement, session_public_key: bytes, nonce: bytes,
                platform_key: PlatformKey) -> AttestationToken:
    if len(nonce) != NONCE_SIZE:
        raise BadNonceLength(f"nonce must be {NONCE_SIZE} bytes, got {len(nonce)}")
    if len(session_public_key) != PUBLIC_KEY_SIZE:
        raise AttestationError(f"session public key must be {PUBLIC_KEY_SIZE} bytes")
    unsigned = AttestationToken(measurement, bytes(session_public_key), bytes(nonce),
                                platform_key.platform_id, b"")
    return AttestationToken(measurement, bytes(session_public_key), bytes(nonce),
                            platform_key.platform_id, platform_key.sign(unsigned.signed_bytes()))


@dataclass
class TrustAnchor:
    platform_verify_key: bytes
    expected_measurements: dict[Role, Measurement] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        fields = [self.platform_verify_key]
        for role, m in sorted(self.expected_measurements.items(), key=lambda kv: kv[0].tag):
            fields += [bytes([role.tag]), m.digest]
        return encode_fields(fields)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrustAnchor":
        fields = decode_fields(data)
        if len(fields) % 2 != 1:
            raise WireFormatError("malformed trust anchor")
        expected = {}
        for tag, digest in zip(fields[1::2], fields[2::2]):
            expected[Role.from_tag(tag[0])] = Measurement(digest)
        return cls(fields[0], expected)


def verify_token(token: AttestationToken | bytes, anchor: TrustAnchor, role: Role | str,
                 expected_nonce: bytes) -> bytes:
    """Check signature, measurement and nonce; return the verified session public key."""
    role = Role(role)
    if role not in anchor.expected_measurements:
        raise AttestationError(f"trust anchor has no expected measurement for {role.value}")
    if isinstance(token, (bytes, bytearray, memoryview)):
        token = AttestationToken.from_bytes(bytes(token))
    try:
        Ed25519PublicKey.from_public_bytes(anchor.platform_verify_key).verify(
            token.signature, token.signed_bytes())
    except InvalidSignature:
        raise BadSignature("token signature does not verify under the platform key") from None
    if not hmac.compare_digest(token.measurement.digest, anchor.expected_measurements[role].digest):
        raise MeasurementMismatch(f"{role.value} realm measurement {token.measurement.hex()[:16]}... "
                                  f"is not the expected one")
    if not hmac.compare_digest(token.nonce, expected_nonce):
        raise NonceMismatch("token nonce does not match the challenge")
    return token.session_public_key


# ------------------------------------------------------------ provisioning

class AssetKind(str, Enum):
    SYSTEM_PROMPT = "system-prompt"
    MODEL_CONFIG = "model-config"
    TOOL_CREDENTIAL = "tool-credential"
    AGENT_POLICY = "agent-policy"


ASSET_ROLE = {
    AssetKind.SYSTEM_PROMPT: Role.AGENT,
    AssetKind.AGENT_POLICY: Role.AGENT,
    AssetKind.MODEL_CONFIG: Role.MODEL,
    AssetKind.TOOL_CREDENTIAL: Role.TOOL,
}


@dataclass(frozen=True)
class ProvisioningPayload:
    kind: AssetKind
    body: bytes

    def __post_init__(self):
        object.__setattr__(self, "kind", AssetKind(self.kind))
        if not self.body:
            raise ValueError("provisioning payload body must be non-empty")


class StreamSealer:
    """AEAD over an ordered stream; nonce is a per-direction message counter."""

    def __init__(self, send_key: bytes, recv_key: bytes):
        self._send = ChaCha20Poly1305(send_key)
        self._recv = ChaCha20Poly1305(recv_key)
        self._send_ctr = 0
        self._recv_ctr = 0

    def seal(self, plaintext: bytes) -> bytes:
        nonce = bytes(4) + self._send_ctr.to_bytes(8, "big")
        self._send_ctr += 1
        return self._send.encrypt(nonce, plaintext, None)

    def open(self, sealed: bytes) -> bytes:
        nonce = bytes(4) + self._recv_ctr.to_bytes(8, "big")
        try:
            pt = self._recv.decrypt(nonce, sealed, None)
        except InvalidTag:
            raise ProvisioningError("provisioning frame failed authentication") from None
        self._recv_ctr += 1
        return pt


def _provisioning_keys(shared: bytes, nonce: bytes, owner_epk: bytes,
                       realm_pk: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(algorithm=hashes.SHA256(), length=64, salt=None,
               info=b"agentee-provision-v1" + nonce + owner_epk + realm_pk).derive(shared)
    return okm[:32], okm[32:]


class OwnerSession:
    """Owner end of one provisioning connection.

    The owner challenges the realm, checks its token against the pinned anchor
    and only then sends assets, sealed under keys bound to the token's session key.
    """

    def __init__(self, sock: socket.socket, role: Role | str, anchor: TrustAnchor):
        self.sock = sock
        self.role = Role(role)
        self.anchor = anchor
        self.verified = False
        self._sealer: StreamSealer | None = None
        self.acks: list[bytes] = []

    def verify(self) -> bytes:
        nonce = os.urandom(NONCE_SIZE)
        esk = X25519PrivateKey.generate()
        epk = raw_public(esk)
        send_frame(self.sock, encode_fields([b"CHALLENGE", nonce, epk]))
        fields = decode_fields(recv_frame(self.sock))
        if len(fields) != 2 or fields[0] != b"TOKEN":
            raise ProvisioningError("expected TOKEN from realm")
        realm_pk = verify_token(fields[1], self.anchor, self.role, nonce)
        shared = esk.exchange(X25519PublicKey.from_public_bytes(realm_pk))
        to_realm, from_realm = _provisioning_keys(shared, nonce, epk, realm_pk)
        self._sealer = StreamSealer(to_realm, from_realm)
        self.verified = True
        self._send([b"VERIFIED"])
        return realm_pk

    def _send(self, fields) -> None:
        send_frame(self.sock, self._sealer.seal(encode_fields(fields)))

    def _recv(self) -> list[bytes]:
        return decode_fields(self._sealer.open(recv_frame(self.sock)))

    def _require_verified(self) -> None:
        if not self.verified:
            raise SessionNotVerified(f"{self.role.value} realm has not been attested on this session")

    def send_anchor(self, anchor: TrustAnchor) -> None:
        self._require_verified()
        self._send([b"ANCHOR", anchor.to_bytes()])

    def declare(self, kinds) -> None:
        self._require_verified()
        self._send([b"DECLARE"] + [AssetKind(k).value for k in kinds])

    def provision(self, payload: ProvisioningPayload) -> bytes:
        self._require_verified()
        if ASSET_ROLE[payload.kind] is not self.role:
            raise RoleAssetMismatch(f"{payload.kind.value} cannot be sent to a {self.role.value} realm")
        self._send([b"ASSET", payload.kind.value, payload.body])
        reply = self._recv()
        if reply[0] == b"NACK":
            raise RoleAssetMismatch(reply[1].decode())
        if reply[0] != b"ACK" or len(reply) != 2:
            raise ProvisioningError(f"unexpected reply {reply[0]!r}")
        if not hmac.compare_digest(reply[1], hashlib.sha256(payload.body).digest()):
            raise AckDigestMismatch(f"realm acknowledged a different {payload.kind.value} body")
        self.acks.append(reply[1])
        return reply[1]

    def finish(self) -> None:
        self._require_verified()
        self._send([b"DONE"])


def provision(session: OwnerSession, payload: ProvisioningPayload) -> bytes:
    return session.provision(payload)


@dataclass
class ProvisionedAssets:
    assets: dict[AssetKind, bytes]
    declared: tuple[AssetKind, ...]
    anchor: TrustAnchor | None

    @property
    def complete(self) -> bool:
        return all(k in self.assets for k in self.declared)


class RealmProvisioningClient:
    """Realm end of a provisioning connection."""

    def __init__(self, sock: socket.socket, role: Role | str, token_factory: TokenFactory):
        self.sock = sock
        self.role = Role(role)
        self.token_factory = token_factory
        self._sealer: StreamSealer | None = None

    def attest(self) -> None:
        fields = decode_fields(recv_frame(self.sock))
        if len(fields) != 3 or fields[0] != b"CHALLENGE":
            raise ProvisioningError("expected CHALLENGE from owner")
        nonce, owner_epk = fields[1], fields[2]
        esk = X25519PrivateKey.generate()
        pk = raw_public(esk)
        token = self.token_factory(pk, nonce)
        send_frame(self.sock, encode_fields([b"TOKEN", token.to_bytes()]))
        shared = esk.exchange(X25519PublicKey.from_public_bytes(owner_epk))
        from_owner, to_owner = _provisioning_keys(shared, nonce, owner_epk, pk)
        self._sealer = StreamSealer(to_owner, from_owner)
        try:
            reply = self._recv()
        except Exception as exc:
            raise ProvisioningError(f"owner rejected attestation: {exc}") from exc
        if reply != [b"VERIFIED"]:
            raise ProvisioningError("owner did not confirm verification")

    def _send(self, fields) -> None:
        send_frame(self.sock, self._sealer.seal(encode_fields(fields)))

    def _recv(self) -> list[bytes]:
        return decode_fields(self._sealer.open(recv_frame(self.sock)))

    def receive(self, on_asset: Callable[[AssetKind], None] | None = None) -> ProvisionedAssets:
        result = ProvisionedAssets({}, (), None)
        while True:
            msg = self._recv()
            kind = msg[0]
            if kind == b"ANCHOR":
                result.anchor = TrustAnchor.from_bytes(msg[1])
            elif kind == b"DECLARE":
                result.declared = tuple(AssetKind(k.decode()) for k in msg[1:])
            elif kind == b"ASSET":
                asset = AssetKind(msg[1].decode())
                if ASSET_ROLE[asset] is not self.role:
                    self._send([b"NACK", f"{asset.value} is not accepted by a {self.role.value} realm"])
                    continue
                result.assets[asset] = msg[2]
                self._send([b"ACK", hashlib.sha256(msg[2]).digest()])
                if on_asset:
                    on_asset(asset)
            elif kind == b"DONE":
                return result
            else:
                raise ProvisioningError(f"unexpected provisioning message {kind!r}")
