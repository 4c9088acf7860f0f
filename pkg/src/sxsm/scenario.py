"""Scenario model: message templates in sets, branchable XML step lists, CSV value injection."""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import sipmsg

PLACEHOLDER_RE = re.compile(r"\[([^\[\]]*)\]")
_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

DEFAULT_RECV_TIMEOUT_MS = 4000


class ScenarioError(Exception):
    """Base class for scenario definition errors."""


class XmlSyntax(ScenarioError):
    pass


class UnknownStepKind(ScenarioError):
    pass


class DanglingJump(ScenarioError):
    def __init__(self, label: str):
        super().__init__(f"jump to undeclared label {label!r}")
        self.label = label


class BadPlaceholder(ScenarioError):
    def __init__(self, name: str):
        super().__init__(f"bad placeholder [{name}]")
        self.name = name


class UnboundPlaceholder(ScenarioError):
    def __init__(self, name: str):
        super().__init__(f"unbound placeholder [{name}]")
        self.name = name


class UnknownTemplate(ScenarioError):
    pass


class EmptyTable(ScenarioError):
    pass


@dataclass(frozen=True)
class MessageTemplate:
    """One SIP message as text with [identifier] placeholders, filed under a set."""

    set_name: str
    template_name: str
    body: str

    def placeholders(self) -> list[str]:
        return [m.group(1) for m in PLACEHOLDER_RE.finditer(self.body)]

    def validate(self) -> None:
        for name in self.placeholders():
            if not _IDENT_RE.match(name):
                raise BadPlaceholder(name)


@dataclass(frozen=True)
class Send:
    template: str
    to: str | None = None  # "host:port" override, placeholders allowed


@dataclass(frozen=True)
class Recv:
    method: str | None = None
    status: str | None = None  # exact code "200" or class pattern "1xx".."6xx"
    valid: str | None = None  # "strict" | "lax": filter requests by strict validity
    jump: str | None = None  # on-match jump target
    timeout_ms: int = DEFAULT_RECV_TIMEOUT_MS

    def matches(self, msg: sipmsg.SipMessage) -> bool:
        if self.method is not None:
            if not msg.is_request or msg.method != self.method:
                return False
            if self.valid == "strict" and not sipmsg.is_strict_valid(msg):
                return False
            if self.valid == "lax" and sipmsg.is_strict_valid(msg):
                return False
            return True
        if self.status is not None:
            if msg.is_request:
                return False
            if self.status.endswith("xx"):
                return msg.status // 100 == int(self.status[0])
            return msg.status == int(self.status)
        return False


@dataclass(frozen=True)
class Pause:
    ms: int


@dataclass(frozen=True)
class Label:
    name: str


@dataclass(frozen=True)
class Stop:
    intent: str = "success"  # "success" | "aborted"


Step = Send | Recv | Pause | Label | Stop


@dataclass(frozen=True)
class Scenario:
    name: str
    set_name: str
    steps: tuple[Step, ...]
    labels: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "labels",
            {s.name: i for i, s in enumerate(self.steps) if isinstance(s, Label)},
        )

    def validate(self) -> None:
        if not self.steps:
            raise ScenarioError(f"scenario {self.name!r} has no steps")
        for step in self.steps:
            if isinstance(step, Recv):
                if step.timeout_ms <= 0:
                    raise ScenarioError("recv timeout must be > 0")
                if step.method is None and step.status is None:
                    raise ScenarioError("recv needs method= or status=")
                if step.jump is not None and step.jump not in self.labels:
                    raise DanglingJump(step.jump)
            if isinstance(step, Send) and step.to:
                _validate_placeholder_text(step.to)
            if isinstance(step, Stop) and step.intent not in ("success", "aborted"):
                raise ScenarioError(f"bad stop intent {step.intent!r}")

    @property
    def starts_as_receiver(self) -> bool:
        """Scenarios opening with a Recv answer unsolicited calls instead of placing them."""
        for step in self.steps:
            if isinstance(step, Label):
                continue
            return isinstance(step, Recv)
        return False


def _validate_placeholder_text(text: str) -> None:
    for m in PLACEHOLDER_RE.finditer(text):
        if not _IDENT_RE.match(m.group(1)):
            raise BadPlaceholder(m.group(1))


def load_scenario(xml_text: str) -> Scenario:
    """Parse and validate one scenario document."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise XmlSyntax(str(exc)) from exc
    if root.tag != "scenario":
        raise XmlSyntax(f"expected <scenario>, got <{root.tag}>")
    steps: list[Step] = []
    for el in root:
        steps.append(_step_from_xml(el))
    scenario = Scenario(
        name=root.get("name", ""),
        set_name=root.get("set", "default"),
        steps=tuple(steps),
    )
    scenario.validate()
    return scenario


def _step_from_xml(el: ET.Element) -> Step:
    if el.tag == "send":
        template = el.get("template")
        if not template:
            raise XmlSyntax("<send> needs template=")
        return Send(template=template, to=el.get("to"))
    if el.tag == "recv":
        timeout = el.get("timeout_ms")
        return Recv(
            method=el.get("method"),
            status=el.get("status"),
            valid=el.get("valid"),
            jump=el.get("jump"),
            timeout_ms=int(timeout) if timeout else DEFAULT_RECV_TIMEOUT_MS,
        )
    if el.tag == "pause":
        return Pause(ms=int(el.get("ms", "0")))
    if el.tag == "label":
        name = el.get("name")
        if not name:
            raise XmlSyntax("<label> needs name=")
        return Label(name=name)
    if el.tag == "stop":
        return Stop(intent=el.get("intent", "success"))
    raise UnknownStepKind(el.tag)


def save_scenario(scenario: Scenario) -> str:
    """Inverse of load_scenario; load(save(s)) reproduces s."""
    root = ET.Element("scenario", name=scenario.name, set=scenario.set_name)
    for step in scenario.steps:
        if isinstance(step, Send):
            el = ET.SubElement(root, "send", template=step.template)
            if step.to:
                el.set("to", step.to)
        elif isinstance(step, Recv):
            el = ET.SubElement(root, "recv")
            if step.method is not None:
                el.set("method", step.method)
            if step.status is not None:
                el.set("status", step.status)
            if step.valid is not None:
                el.set("valid", step.valid)
            if step.jump is not None:
                el.set("jump", step.jump)
            el.set("timeout_ms", str(step.timeout_ms))
        elif isinstance(step, Pause):
            ET.SubElement(root, "pause", ms=str(step.ms))
        elif isinstance(step, Label):
            ET.SubElement(root, "label", name=step.name)
        elif isinstance(step, Stop):
            ET.SubElement(root, "stop", intent=step.intent)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


def expand(template: MessageTemplate, bindings: dict[str, str]) -> sipmsg.SipMessage:
    """Substitute every placeholder and parse the result (permissive)."""
    return sipmsg.parse(expand_text(template, bindings).encode("utf-8"))


def expand_text(template: MessageTemplate, bindings: dict[str, str]) -> str:
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if not _IDENT_RE.match(name):
            raise BadPlaceholder(name)
        if name not in bindings:
            raise UnboundPlaceholder(name)
        return bindings[name]

    return PLACEHOLDER_RE.sub(sub, template.body)


class InjectionTable:
    """CSV rows handed out one per call, wrapping at the end."""

    def __init__(self, rows: list[tuple[str, ...]]):
        arity = {len(r) for r in rows}
        if len(arity) > 1:
            raise ScenarioError(f"ragged CSV: row arities {sorted(arity)}")
        self.rows = [tuple(r) for r in rows]
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.rows)

    @classmethod
    def from_csv_text(cls, text: str) -> "InjectionTable":
        # Plain comma-separated, no quoting, no header row.
        rows = [tuple(line.split(",")) for line in text.splitlines() if line.strip()]
        return cls(rows)

    @classmethod
    def from_file(cls, path: str | Path) -> "InjectionTable":
        return cls.from_csv_text(Path(path).read_text(encoding="utf-8"))

    def next_bindings(self) -> dict[str, str]:
        if not self.rows:
            raise EmptyTable("injection table has no rows")
        row = self.rows[self.cursor % len(self.rows)]
        self.cursor += 1
        return {f"field{i}": value for i, value in enumerate(row)}


class TemplateStore:
    """Templates addressed as "name" within a set or "set/name" across sets."""

    def __init__(self, templates: list[MessageTemplate] | None = None):
        self._by_key: dict[tuple[str, str], MessageTemplate] = {}
        for t in templates or []:
            self.add(t)

    def add(self, template: MessageTemplate) -> None:
        self._by_key[(template.set_name, template.template_name)] = template

    def get(self, ref: str, default_set: str) -> MessageTemplate:
        if "/" in ref:
            set_name, name = ref.split("/", 1)
        else:
            set_name, name = default_set, ref
        try:
            return self._by_key[(set_name, name)]
        except KeyError:
            raise UnknownTemplate(f"{set_name}/{name}") from None

    def templates(self) -> list[MessageTemplate]:
        return list(self._by_key.values())

    @classmethod
    def from_dir(cls, root: str | Path) -> "TemplateStore":
        """Load sets/<set>/<name>.txt directory layout."""
        store = cls()
        root = Path(root)
        for path in sorted(root.glob("*/*.txt")):
            store.add(
                MessageTemplate(
                    set_name=path.parent.name,
                    template_name=path.stem,
                    body=path.read_text(encoding="utf-8"),
                )
            )
        return store

    def write_dir(self, root: str | Path) -> None:
        root = Path(root)
        for t in self.templates():
            d = root / t.set_name
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{t.template_name}.txt").write_text(t.body, encoding="utf-8")
