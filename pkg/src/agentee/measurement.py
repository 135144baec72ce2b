"""Realm images and their launch measurements."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

HASH_ALG_SHA256 = 1
DIGEST_SIZE = 32


class Role(str, Enum):
    AGENT = "agent"
    MODEL = "model"
    TOOL = "tool"

    @property
    def tag(self) -> int:
        return _ROLE_TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "Role":
        for role, t in _ROLE_TAGS.items():
            if t == tag:
                return role
        raise ValueError(f"unknown role tag {tag}")


_ROLE_TAGS = {Role.AGENT: 1, Role.MODEL: 2, Role.TOOL: 3}


@dataclass(frozen=True)
class RealmImage:
    role: Role
    payload: bytes
    version: str = "0"

    def __post_init__(self):
        if not isinstance(self.role, Role):
            try:
                object.__setattr__(self, "role", Role(self.role))
            except ValueError:
                raise ValueError(f"invalid realm role {self.role!r}") from None
        if not self.payload:
            raise ValueError("realm image payload must be non-empty")

    @classmethod
    def load(cls, role, path: str | Path) -> "RealmImage":
        payload = Path(path).read_bytes()
        version = "0"
        for line in payload.decode("utf-8", "replace").splitlines():
            if line.startswith("version="):
                version = line.split("=", 1)[1].strip()
        return cls(Role(role), payload, version)


@dataclass(frozen=True)
class Measurement:
    digest: bytes
    algorithm_id: int = HASH_ALG_SHA256

    def __post_init__(self):
        if len(self.digest) != DIGEST_SIZE:
            raise ValueError(f"measurement digest must be {DIGEST_SIZE} bytes, got {len(self.digest)}")

    def hex(self) -> str:
        return self.digest.hex()


def measurement_preimage(image: RealmImage) -> bytes:
    return bytes([image.role.tag]) + len(image.payload).to_bytes(8, "big") + image.payload


def measure_image(image: RealmImage) -> Measurement:
    """SHA-256 over role tag || 8-byte big-endian payload length || payload."""
    return Measurement(hashlib.sha256(measurement_preimage(image)).digest())
