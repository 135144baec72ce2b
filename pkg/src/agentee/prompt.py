"""Role-labeled model input and its wire/text encodings."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .errors import ValidationError, WireFormatError
from .wire import decode_fields, encode_fields


class MsgRole(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"

    @property
    def tag(self) -> int:
        return _TAGS.index(self)


_TAGS = [MsgRole.SYSTEM, MsgRole.USER, MsgRole.ASSISTANT, MsgRole.TOOL]

RESERVED_KEYWORDS = ("system", "user", "assistant", "tool", "role")
_KW = "|".join(RESERVED_KEYWORDS)
_NEEDS_ESCAPE = re.compile(rf"^(?:> )*\s*(?:{_KW})\s*:", re.IGNORECASE)
_IS_ESCAPED = re.compile(rf"^> (?:> )*\s*(?:{_KW})\s*:", re.IGNORECASE)
_HEADER = re.compile(r"^(system|user|assistant|tool): (.*)$")


def escape_role_markers(text: str) -> str:
    """Prefix-quote every line that starts with a reserved role keyword.

    Lines that already carry quote prefixes get one more, so the mapping is
    reversible by ``unescape_role_markers``.
    """
    return "\n".join("> " + line if _NEEDS_ESCAPE.match(line) else line
                     for line in text.split("\n"))


def unescape_role_markers(text: str) -> str:
    return "\n".join(line[2:] if _IS_ESCAPED.match(line) else line
                     for line in text.split("\n"))


@dataclass(frozen=True)
class Message:
    role: MsgRole
    content: str


@dataclass(frozen=True)
class LabeledPrompt:
    messages: tuple[Message, ...]

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages or self.messages[0].role is not MsgRole.SYSTEM:
            raise ValidationError("prompt must start with the system message")
        if sum(m.role is MsgRole.SYSTEM for m in self.messages) != 1:
            raise ValidationError("prompt must contain exactly one system message")

    @property
    def system(self) -> str:
        return self.messages[0].content

    def to_bytes(self) -> bytes:
        """Canonical encoding: field list of (role byte || UTF-8 content)."""
        return encode_fields(bytes([m.role.tag]) + m.content.encode("utf-8") for m in self.messages)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LabeledPrompt":
        messages = []
        for f in decode_fields(data):
            if not f or f[0] >= len(_TAGS):
                raise WireFormatError("message field without a valid role byte")
            messages.append(Message(_TAGS[f[0]], f[1:].decode("utf-8")))
        return cls(tuple(messages))

    def render_text(self) -> str:
        """Plain-text rendering for text-only engines; role headers cannot be forged."""
        return "\n".join(f"{m.role.value}: {escape_role_markers(m.content)}" for m in self.messages)

    @classmethod
    def parse_text(cls, text: str) -> "LabeledPrompt":
        messages: list[list] = []
        for line in text.split("\n"):
            m = _HEADER.match(line)
            if m:
                messages.append([MsgRole(m.group(1)), [m.group(2)]])
            elif messages:
                messages[-1][1].append(line)
            else:
                raise WireFormatError("text prompt does not start with a role header")
        return cls(tuple(Message(role, unescape_role_markers("\n".join(lines)))
                         for role, lines in messages))
