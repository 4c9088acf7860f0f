"""SIP message model: permissive parser, order-preserving serializer, header-layout fingerprints."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace

SIP_VERSION = "SIP/2.0"

# Headers a strictly valid request must carry.
REQUIRED_REQUEST_HEADERS = ("From", "To", "Call-ID", "CSeq", "Via")

_IPV4_RE = re.compile(r"^\d{1,3}(\.\d{1,3}){3}$")
_TOKEN_RE = re.compile(r"^[A-Za-z][A-Za-z0-9.!%*_+`'~-]*$")


class SipError(Exception):
    """Base class for SIP message errors."""


class MalformedStartLine(SipError):
    def __init__(self, line: str):
        super().__init__(f"malformed start line: {line!r}")
        self.line = line


class MalformedHeader(SipError):
    def __init__(self, line_number: int, line: str):
        super().__init__(f"malformed header at line {line_number}: {line!r}")
        self.line_number = line_number
        self.line = line


class BodyLengthMismatch(SipError):
    def __init__(self, declared: int, actual: int):
        super().__init__(f"Content-Length {declared} != body length {actual}")
        self.declared = declared
        self.actual = actual


class DomainError(SipError):
    """Value outside the operation's domain."""


@dataclass(frozen=True)
class SipUri:
    """sip:user@host[:port] address. Host kind decides permanence: IP-hosted URIs are temporary."""

    user: str
    host: str
    port: int | None = None
    scheme: str = "sip"

    def __post_init__(self):
        if self.port is not None and not 1 <= self.port <= 65535:
            raise DomainError(f"port {self.port} outside 1-65535")

    @classmethod
    def parse(cls, text: str) -> "SipUri":
        # Lenient: tolerates angle brackets and display-name prefixes so
        # From/To/Contact values can be fed in whole.
        text = text.strip()
        if "<" in text:
            text = text[text.index("<") + 1 :]
            text = text.split(">", 1)[0]
        text = text.split(";", 1)[0].strip()
        scheme = "sip"
        if ":" in text and text.split(":", 1)[0].isalpha():
            scheme, text = text.split(":", 1)
        user = ""
        if "@" in text:
            user, text = text.rsplit("@", 1)
        host, port = text, None
        if ":" in text:
            host, port_text = text.rsplit(":", 1)
            if port_text.isdigit():
                port = int(port_text)
            else:
                host = text
        if not host:
            raise DomainError(f"URI without host: {text!r}")
        return cls(user=user, host=host, port=port, scheme=scheme.lower())

    @property
    def is_ip_host(self) -> bool:
        return _IPV4_RE.match(self.host) is not None

    @property
    def is_temporary(self) -> bool:
        """IP-hosted URIs are only valid while the endpoint keeps its address."""
        return self.is_ip_host

    def __str__(self) -> str:
        at = f"{self.user}@" if self.user else ""
        port = f":{self.port}" if self.port is not None else ""
        return f"{self.scheme}:{at}{self.host}{port}"


class UriStatus(enum.Enum):
    UNASSIGNED = "unassigned"
    ASSIGNED_OFFLINE = "assigned-offline"
    ASSIGNED_ONLINE = "assigned-online"
    INDETERMINATE = "indeterminate"

    @property
    def is_assigned(self) -> bool:
        return self in (UriStatus.ASSIGNED_OFFLINE, UriStatus.ASSIGNED_ONLINE)


@dataclass(frozen=True)
class HeaderFingerprint:
    """Ordered, case-normalized header-name sequence; values never participate."""

    names: tuple[str, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(n.lower() for n in self.names))

    def matches(self, other: "HeaderFingerprint") -> bool:
        return self.names == other.names


@dataclass(frozen=True)
class SipMessage:
    """One SIP request or response.

    Header values keep the raw text after the colon, so a parsed message
    serializes back to its original bytes (line terminators excepted).
    """

    method: str | None  # None for responses
    uri: SipUri | None = None
    status: int | None = None  # None for requests
    reason: str = ""
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""

    @property
    def is_request(self) -> bool:
        return self.method is not None

    @property
    def start_line(self) -> str:
        if self.is_request:
            return f"{self.method} {self.uri} {SIP_VERSION}"
        return f"{SIP_VERSION} {self.status} {self.reason}"

    def header(self, name: str) -> str | None:
        """First header value with this name, stripped. Case-insensitive."""
        lower = name.lower()
        for key, value in self.headers:
            if key.lower() == lower:
                return value.strip()
        return None

    def header_values(self, name: str) -> list[str]:
        lower = name.lower()
        return [v.strip() for k, v in self.headers if k.lower() == lower]

    def with_header(self, name: str, value: str) -> "SipMessage":
        return replace(self, headers=self.headers + ((name, f" {value}"),))

    def without_header(self, name: str) -> "SipMessage":
        lower = name.lower()
        return replace(self, headers=tuple((k, v) for k, v in self.headers if k.lower() != lower))

    @property
    def call_id(self) -> str | None:
        return self.header("Call-ID")

    @property
    def from_uri(self) -> SipUri | None:
        raw = self.header("From")
        return SipUri.parse(raw) if raw else None

    @property
    def to_uri(self) -> SipUri | None:
        raw = self.header("To")
        return SipUri.parse(raw) if raw else None

    @property
    def cseq_method(self) -> str | None:
        raw = self.header("CSeq")
        if raw is None:
            return None
        parts = raw.split()
        return parts[1] if len(parts) > 1 else None


def request(
    method: str,
    uri: SipUri | str,
    headers: list[tuple[str, str]] | None = None,
    body: bytes = b"",
) -> SipMessage:
    """Build a request, normalizing values and inserting Content-Length when a body is present."""
    if isinstance(uri, str):
        uri = SipUri.parse(uri)
    return SipMessage(
        method=method,
        uri=uri,
        headers=_normalize_headers(headers or [], body),
        body=body,
    )


def response(
    status: int,
    reason: str,
    headers: list[tuple[str, str]] | None = None,
    body: bytes = b"",
) -> SipMessage:
    if not 100 <= status <= 699:
        raise DomainError(f"status {status} outside 100-699")
    return SipMessage(
        method=None,
        status=status,
        reason=reason,
        headers=_normalize_headers(headers or [], body),
        body=body,
    )


def _normalize_headers(
    headers: list[tuple[str, str]], body: bytes
) -> tuple[tuple[str, str], ...]:
    out = [(name, value if value.startswith((" ", "\t")) or value == "" else f" {value}") for name, value in headers]
    if body and not any(k.lower() == "content-length" for k, _ in out):
        out.append(("Content-Length", f" {len(body)}"))
    return tuple(out)


def parse(raw: bytes) -> SipMessage:
    """Parse one complete SIP message. Permissive: required headers are not enforced here.

    Raises MalformedStartLine, MalformedHeader, or BodyLengthMismatch.
    """
    text = raw.decode("utf-8", errors="replace")
    # Tolerant-in: accept bare LF line endings.
    head, sep, body_text = _split_head(text)
    lines = head.split("\n")
    start = lines[0].rstrip("\r")
    headers: list[tuple[str, str]] = []
    for i, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line:
            continue
        if ":" not in line:
            raise MalformedHeader(i, line)
        name, _, value = line.partition(":")
        if not name or name != name.strip() or " " in name.strip():
            raise MalformedHeader(i, line)
        headers.append((name, value))

    body = body_text.encode("utf-8") if sep else b""
    declared = _content_length(headers)
    if declared is not None and declared != len(body):
        raise BodyLengthMismatch(declared, len(body))

    if start.startswith(SIP_VERSION + " ") or start == SIP_VERSION:
        parts = start.split(" ", 2)
        if len(parts) < 2 or not parts[1].isdigit():
            raise MalformedStartLine(start)
        status = int(parts[1])
        if not 100 <= status <= 699:
            raise MalformedStartLine(start)
        reason = parts[2] if len(parts) > 2 else ""
        return SipMessage(method=None, status=status, reason=reason, headers=tuple(headers), body=body)

    parts = start.split(" ")
    if len(parts) != 3 or parts[2] != SIP_VERSION or not _TOKEN_RE.match(parts[0]):
        raise MalformedStartLine(start)
    try:
        uri = SipUri.parse(parts[1])
    except DomainError:
        raise MalformedStartLine(start) from None
    return SipMessage(method=parts[0], uri=uri, headers=tuple(headers), body=body)


def _split_head(text: str) -> tuple[str, str, str]:
    # Earliest blank line wins; checking fixed separator order could split
    # inside a body that itself contains CRLF CRLF.
    best: tuple[int, str] | None = None
    for sep in ("\r\n\r\n", "\n\n"):
        idx = text.find(sep)
        if idx != -1 and (best is None or idx < best[0]):
            best = (idx, sep)
    if best is None:
        return text, "", ""
    idx, sep = best
    return text[:idx], sep, text[idx + len(sep) :]


def _content_length(headers: list[tuple[str, str]]) -> int | None:
    for name, value in headers:
        if name.lower() == "content-length":
            value = value.strip()
            if value.isdigit():
                return int(value)
    return None


def serialize(msg: SipMessage) -> bytes:
    """Canonical wire bytes: CRLF terminators, stored header order, Content-Length appended iff missing."""
    lines = [msg.start_line]
    headers = list(msg.headers)
    if msg.body and _content_length(headers) is None:
        headers.append(("Content-Length", f" {len(msg.body)}"))
    for name, value in headers:
        lines.append(f"{name}:{value}")
    head = "\r\n".join(lines) + "\r\n\r\n"
    return head.encode("utf-8") + msg.body


def fingerprint_of(msg: SipMessage, label: str = "") -> HeaderFingerprint:
    """Layout fingerprint: the ordered header names, nothing else."""
    return HeaderFingerprint(names=tuple(name for name, _ in msg.headers), label=label)


def classify_response(status: int) -> UriStatus:
    """Map a probe's response code to the target URI's assignment status.

    404 means nobody owns the URI; 480 an owner who is not registered; 200
    and 180 a live endpoint (ringing is already proof of life). Everything
    else is inconclusive.
    """
    if not 100 <= status <= 699:
        raise DomainError(f"status {status} outside 100-699")
    if status == 404:
        return UriStatus.UNASSIGNED
    if status == 480:
        return UriStatus.ASSIGNED_OFFLINE
    if status in (200, 180):
        return UriStatus.ASSIGNED_ONLINE
    return UriStatus.INDETERMINATE


def strict_violations(msg: SipMessage) -> list[str]:
    """Checks beyond permissive parsing; emitting broken probes stays legal, this only reports."""
    problems = []
    if msg.is_request:
        for name in REQUIRED_REQUEST_HEADERS:
            if msg.header(name) is None:
                problems.append(f"missing {name}")
    declared = _content_length(list(msg.headers))
    if msg.body and declared is None:
        problems.append("body without Content-Length")
    if declared is not None and declared != len(msg.body):
        problems.append("Content-Length mismatch")
    return problems


def is_strict_valid(msg: SipMessage) -> bool:
    return not strict_violations(msg)
