"""Countermeasure side: listed gates over incoming calls, their stores, and the
endpoint/proxy that answers SIP, screens INVITEs through a gate chain, runs the
registrar and honeypot, and relays to registered contacts."""

from __future__ import annotations

import hashlib
import random
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import ids, sipmsg
from .sipmsg import HeaderFingerprint, SipMessage, SipUri
from .transport import Addr, NodeHandle

PROBE_CLASSES = ("compliant", "malformed")
TIMEOUT_SYMBOL = "timeout"

CHALLENGE_ID_HEADER = "X-Challenge-Id"
CHALLENGE_KIND_HEADER = "X-Challenge-Kind"
FEEDBACK_HEADER_DEFAULT = "X-Reputation-Feedback"
SHORT_CALL_S = 10.0


class DefenseError(Exception):
    pass


class UnknownToken(DefenseError):
    pass


class ExpiredToken(DefenseError):
    pass


class InsufficientFunds(DefenseError):
    pass


class DoubleSettle(DefenseError):
    pass


class UnknownHold(DefenseError):
    pass


class NotPermitted(DefenseError):
    pass


# -- verdicts ------------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    kind: str  # "forward" | "reject" | "challenge" | "quarantine"
    status: int = 0
    reason: str = ""
    challenge_kind: str = ""  # "turing" | "puzzle" | "payment"
    token: object = None

    @property
    def is_forward(self) -> bool:
        return self.kind == "forward"


FORWARD = Verdict("forward")
QUARANTINE = Verdict("quarantine")


def reject(status: int, reason: str) -> Verdict:
    return Verdict("reject", status=status, reason=reason)


def challenge(kind: str, token: object) -> Verdict:
    return Verdict("challenge", challenge_kind=kind, token=token)


def body_fields(body: bytes) -> dict[str, str]:
    """Parse "key: value" lines out of a challenge/answer body."""
    fields: dict[str, str] = {}
    for line in body.decode("utf-8", errors="replace").splitlines():
        if ":" in line:
            k, _, v = line.partition(":")
            fields[k.strip().lower()] = v.strip()
    return fields


@dataclass(frozen=True)
class CallAttempt:
    caller: str  # canonical From URI
    callee: str  # canonical target URI
    msg: SipMessage
    src: Addr
    now: float


def run_chain(call: CallAttempt, gates) -> Verdict:
    """First non-Forward verdict wins; an empty result is Forward."""
    if not gates:
        raise DefenseError("chain is empty")
    for gate in gates:
        verdict = gate(call)
        if not verdict.is_forward:
            return verdict
    return FORWARD


# -- device fingerprinting ------------------------------------------------------


@dataclass(frozen=True)
class BehaviorRow:
    probe_class: str
    status: str  # "200", "400", ... or "timeout"
    headers: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class DeviceRecord:
    label: str
    fingerprints: dict[str, HeaderFingerprint]  # per request method
    behavior: dict[str, BehaviorRow]  # per probe class


class FingerprintDb:
    def __init__(self, devices: list[DeviceRecord]):
        labels = [d.label for d in devices]
        if len(set(labels)) != len(labels):
            raise DefenseError("duplicate device labels")
        self.devices = list(devices)

    def fingerprints_for(self, method: str) -> list[HeaderFingerprint]:
        return [d.fingerprints[method] for d in self.devices if method in d.fingerprints]

    def device(self, label: str) -> DeviceRecord:
        for d in self.devices:
            if d.label == label:
                return d
        raise DefenseError(f"unknown device {label!r}")

    def methods(self) -> set[str]:
        out: set[str] = set()
        for d in self.devices:
            out |= set(d.fingerprints)
        return out

    @classmethod
    def load(cls, path: str | Path) -> "FingerprintDb":
        return cls.from_xml(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_xml(cls, text: str) -> "FingerprintDb":
        root = ET.fromstring(text)
        devices = []
        for dev in root.findall("device"):
            fingerprints: dict[str, HeaderFingerprint] = {}
            behavior: dict[str, BehaviorRow] = {}
            label = dev.get("label", "")
            for fp in dev.findall("fingerprint"):
                method = fp.get("method", "INVITE")
                names = tuple(n.strip() for n in (fp.text or "").split(",") if n.strip())
                fingerprints[method] = HeaderFingerprint(names=names, label=label)
            for row in dev.findall("behavior"):
                headers = tuple((h.get("name", ""), (h.text or "").strip()) for h in row.findall("header"))
                behavior[row.get("probe", "")] = BehaviorRow(
                    probe_class=row.get("probe", ""),
                    status=row.get("status", TIMEOUT_SYMBOL),
                    headers=headers,
                )
            devices.append(DeviceRecord(label=label, fingerprints=fingerprints, behavior=behavior))
        return cls(devices)

    def to_xml(self) -> str:
        root = ET.Element("fingerprints")
        for d in self.devices:
            dev = ET.SubElement(root, "device", label=d.label)
            for method, fp in d.fingerprints.items():
                el = ET.SubElement(dev, "fingerprint", method=method)
                el.text = ",".join(fp.names)
            for row in d.behavior.values():
                el = ET.SubElement(dev, "behavior", probe=row.probe_class, status=row.status)
                for name, value in row.headers:
                    h = ET.SubElement(el, "header", name=name)
                    h.text = value
        ET.indent(root)
        return ET.tostring(root, encoding="unicode")


def passive_check(msg: SipMessage, db: FingerprintDb, unknown_method: str = "forward") -> Verdict:
    """Forward iff the header layout exactly matches a known device for this method."""
    if not msg.is_request:
        raise DefenseError("passive check applies to requests")
    method = msg.method or ""
    known = db.fingerprints_for(method)
    if not known:
        return FORWARD if unknown_method == "forward" else reject(403, "fingerprint")
    fp = sipmsg.fingerprint_of(msg)
    for candidate in known:
        if fp.matches(candidate):
            return FORWARD
    return reject(403, "fingerprint")


def build_probes(remote_uri: str, local: Addr, call_id: str) -> list[tuple[str, SipMessage]]:
    """The active-fingerprint probe set: one compliant OPTIONS, one that fails strict checks."""
    compliant = sipmsg.request(
        "OPTIONS",
        remote_uri,
        headers=[
            ("Via", f"SIP/2.0/UDP {local[0]}:{local[1]};branch=z9hG4bK-probe1"),
            ("Max-Forwards", "70"),
            ("From", f"<sip:fingerprint@{local[0]}:{local[1]}>;tag=probe"),
            ("To", f"<{remote_uri}>"),
            ("Call-ID", call_id),
            ("CSeq", "1 OPTIONS"),
            ("Content-Length", "0"),
        ],
    )
    malformed = sipmsg.request(
        "OPTIONS",
        remote_uri,
        headers=[
            ("To", f"<{remote_uri}>"),
            ("Call-ID", call_id),
            ("CSeq", "2 OPTIONS"),
        ],
    )
    return [("compliant", compliant), ("malformed", malformed)]


def behavior_vector_matches(db: FingerprintDb, results: dict[str, tuple[str, dict[str, str]]]) -> bool:
    """True if some device's behavior rows equal the observed (status, headers) per probe."""
    for device in db.devices:
        if not device.behavior:
            continue
        ok = True
        for probe_class in PROBE_CLASSES:
            row = device.behavior.get(probe_class)
            observed = results.get(probe_class, (TIMEOUT_SYMBOL, {}))
            if row is None:
                ok = False
                break
            status, headers = observed
            if row.status != status:
                ok = False
                break
            for name, value in row.headers:
                if headers.get(name.lower()) != value:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return True
    return False


def active_probe(remote: Addr, db: FingerprintDb, transport, timeout_s: float = 0.5) -> Verdict:
    """Probe a remote UA and compare its response behavior against known devices.

    Timeouts are data: a device that ignores malformed probes matches a row
    whose status is "timeout".
    """
    call_id = f"probe-{remote[0]}-{remote[1]}"
    local = getattr(transport, "addr", ("0.0.0.0", 0))
    probes = build_probes(f"sip:probe@{remote[0]}:{remote[1]}", local, call_id)
    by_cseq = {}
    for i, (probe_class, msg) in enumerate(probes, start=1):
        transport.send(sipmsg.serialize(msg), remote)
        by_cseq[str(i)] = probe_class
    results: dict[str, tuple[str, dict[str, str]]] = {}
    while len(results) < len(probes):
        item = transport.receive(timeout_s)
        if item is None:
            break
        try:
            msg = sipmsg.parse(item[0])
        except sipmsg.SipError:
            continue
        if msg.is_request or msg.call_id != call_id:
            continue
        cseq = (msg.header("CSeq") or "").split()
        probe_class = by_cseq.get(cseq[0] if cseq else "")
        if probe_class:
            results[probe_class] = (str(msg.status), {k.lower(): v.strip() for k, v in msg.headers})
    return FORWARD if behavior_vector_matches(db, results) else reject(403, "behavior")


# -- white/black/grey lists -----------------------------------------------------

WILDCARD_OWNER = "*"


class ListStore:
    def __init__(
        self,
        retry_window_s: float = 60.0,
        grey_ttl_s: float = 86400.0,
        consent: bool = False,
        shared_whitelist: bool = False,
    ):
        self.retry_window_s = retry_window_s
        self.grey_ttl_s = grey_ttl_s
        self.consent = consent
        self.shared_whitelist = shared_whitelist
        self.white: dict[str, set[str]] = {}
        self.black: dict[str, set[str]] = {}
        self.grey: dict[str, dict[str, float]] = {}

    def add_white(self, owner: str, uri: str) -> None:
        self.black.get(owner, set()).discard(uri)
        self.white.setdefault(owner, set()).add(uri)

    def add_black(self, owner: str, uri: str) -> None:
        self.white.get(owner, set()).discard(uri)
        self.black.setdefault(owner, set()).add(uri)

    def in_white(self, callee: str, caller: str) -> bool:
        return caller in self.white.get(callee, set()) or caller in self.white.get(WILDCARD_OWNER, set())

    def in_black(self, callee: str, caller: str) -> bool:
        return caller in self.black.get(callee, set()) or caller in self.black.get(WILDCARD_OWNER, set())

    def grey_entry(self, callee: str, caller: str, now: float) -> float | None:
        first_seen = self.grey.get(callee, {}).get(caller)
        if first_seen is None:
            return None
        if now - first_seen > self.grey_ttl_s:
            del self.grey[callee][caller]
            return None
        return first_seen

    def approve(self, callee: str, caller: str) -> None:
        """Consent-mode approval: the callee accepts future calls from a greylisted identity."""
        self.grey.get(callee, {}).pop(caller, None)
        self.add_white(callee, caller)

    def export_whitelist(self, requester: str, owner: str) -> set[str]:
        """Shared-white-list mode: readable by accounts that have the owner on their own list."""
        if not self.shared_whitelist:
            raise NotPermitted("shared white lists disabled")
        if owner not in self.white.get(requester, set()):
            raise NotPermitted(f"{requester} does not list {owner}")
        return set(self.white.get(owner, set()))


def list_check(caller: str, callee: str, store: ListStore, now: float) -> Verdict:
    """Black rejects, white forwards, a timely grey retry forwards, first contact greys."""
    if store.in_black(callee, caller):
        return reject(603, "blacklisted")
    if store.in_white(callee, caller):
        return FORWARD
    first_seen = store.grey_entry(callee, caller, now)
    if first_seen is not None and now - first_seen <= store.retry_window_s:
        return FORWARD
    store.grey.setdefault(callee, {})[caller] = now
    return reject(480, "greylisted")


# -- reputation -----------------------------------------------------------------


@dataclass(frozen=True)
class Feedback:
    value: float


@dataclass(frozen=True)
class CallEnded:
    seconds: float


@dataclass(frozen=True)
class Blacklisted:
    pass


@dataclass
class ReputationWeights:
    feedback: float = 1.0
    blacklist: float = 5.0
    density: float = 0.1
    short_calls: float = 2.0


@dataclass
class IdentityStats:
    feedback_sum: float = 0.0
    blacklist_occurrences: int = 0
    call_count: int = 0
    total_call_seconds: float = 0.0
    call_log: list[tuple[float, float]] = field(default_factory=list)  # (t, duration)


class ReputationStore:
    """Composite statistical score: feedback minus blacklist hits, call density,
    and the short-call ratio, each weighted."""

    def __init__(self, weights: ReputationWeights | None = None):
        self.weights = weights or ReputationWeights()
        self._stats: dict[str, IdentityStats] = {}

    def stats(self, identity: str) -> IdentityStats:
        return self._stats.setdefault(identity, IdentityStats())

    def update(self, identity: str, event, now: float = 0.0) -> None:
        s = self.stats(identity)
        if isinstance(event, Feedback):
            s.feedback_sum += event.value
        elif isinstance(event, Blacklisted):
            s.blacklist_occurrences += 1
        elif isinstance(event, CallEnded):
            s.call_count += 1
            s.total_call_seconds += event.seconds
            s.call_log.append((now, event.seconds))
        else:
            raise DefenseError(f"unknown reputation event {event!r}")

    def score(self, identity: str, now: float = 0.0) -> float:
        s = self._stats.get(identity)
        if s is None:
            return 0.0
        w = self.weights
        density = sum(1 for t, _ in s.call_log if now - 86400.0 < t <= now) / 24.0
        short_ratio = (
            sum(1 for _, d in s.call_log if d < SHORT_CALL_S) / len(s.call_log) if s.call_log else 0.0
        )
        return (
            w.feedback * s.feedback_sum
            - w.blacklist * s.blacklist_occurrences
            - w.density * density
            - w.short_calls * short_ratio
        )


def reputation_update(identity: str, event, store: ReputationStore, now: float = 0.0) -> ReputationStore:
    store.update(identity, event, now)
    return store


def reputation_check(
    identity: str,
    store: ReputationStore,
    reject_below: float,
    challenge_below: float,
    now: float = 0.0,
) -> Verdict:
    """Low score rejects, borderline demands payment, a clean score forwards."""
    if reject_below > challenge_below:
        raise DefenseError("reject_below must be <= challenge_below")
    score = store.score(identity, now)
    if score < reject_below:
        return reject(603, "reputation")
    if score < challenge_below:
        return challenge("payment", None)
    return FORWARD


# -- turing test ----------------------------------------------------------------


class TuringGate:
    """Digit challenge; the digits live in the challenge body (the symbolic audio)."""

    def __init__(self, rng: random.Random, expiry_s: float = 30.0):
        self._rng = rng
        self.expiry_s = expiry_s
        self._tokens: dict[str, float] = {}  # digits -> expires_at

    def challenge(self, now: float) -> Verdict:
        while True:
            digits = f"{self._rng.randrange(100000):05d}"
            if digits not in self._tokens:
                break
        self._tokens[digits] = now + self.expiry_s
        return Verdict("challenge", challenge_kind="turing", token=digits)

    def verify(self, token: str, answer: str, now: float) -> Verdict:
        expires = self._tokens.get(token)
        if expires is None:
            raise UnknownToken(token)
        if now > expires:
            del self._tokens[token]
            raise ExpiredToken(token)
        del self._tokens[token]
        if answer == token:
            return FORWARD
        return reject(403, "turing")


def turing_challenge(gate: TuringGate, now: float = 0.0) -> Verdict:
    return gate.challenge(now)


def turing_verify(gate: TuringGate, token: str, answer: str, now: float = 0.0) -> Verdict:
    return gate.verify(token, answer, now)


# -- computational puzzle ---------------------------------------------------------


@dataclass(frozen=True)
class Puzzle:
    image: int  # first `bits` bits of the hash of a secret nonce
    bits: int


def _hash_prefix(preimage: bytes, bits: int) -> int:
    digest = hashlib.sha1(preimage).digest()
    return int.from_bytes(digest, "big") >> (160 - bits)


def puzzle_challenge(bits: int, rng: random.Random) -> Verdict:
    """Publish the truncated hash image of a fresh secret nonce."""
    if not 1 <= bits <= 32:
        raise DefenseError("difficulty bits must be in 1..32")
    nonce = rng.getrandbits(64).to_bytes(8, "big")
    return Verdict("challenge", challenge_kind="puzzle", token=Puzzle(image=_hash_prefix(nonce, bits), bits=bits))


def puzzle_verify(image: int, bits: int, preimage: bytes) -> Verdict:
    if _hash_prefix(preimage, bits) == image:
        return FORWARD
    return reject(403, "puzzle")


# -- payments at risk --------------------------------------------------------------


@dataclass
class Hold:
    payer: str
    payee: str
    amount: int


class PaymentLedger:
    """In-memory micro-unit ledger; every hold settles exactly once."""

    def __init__(self, balances: dict[str, int] | None = None):
        self.balances: dict[str, int] = dict(balances or {})
        self.holds: dict[str, Hold] = {}
        self._hold_seq = 0

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    def total(self) -> int:
        return sum(self.balances.values()) + sum(h.amount for h in self.holds.values())

    def hold(self, payer: str, payee: str, amount: int) -> str:
        if amount < 0:
            raise DefenseError("negative hold")
        if self.balance(payer) < amount:
            raise InsufficientFunds(f"{payer} has {self.balance(payer)} < {amount}")
        self.balances[payer] = self.balance(payer) - amount
        self._hold_seq += 1
        hold_id = f"h{self._hold_seq}"
        self.holds[hold_id] = Hold(payer=payer, payee=payee, amount=amount)
        return hold_id

    def settle(self, hold_id: str, callee_says_spit: bool) -> None:
        hold = self.holds.pop(hold_id, None)
        if hold is None:
            if hold_id.startswith("h") and hold_id[1:].isdigit() and int(hold_id[1:]) <= self._hold_seq:
                raise DoubleSettle(hold_id)
            raise UnknownHold(hold_id)
        beneficiary = hold.payee if callee_says_spit else hold.payer
        self.balances[beneficiary] = self.balance(beneficiary) + hold.amount


def payment_hold(caller: str, callee: str, amount: int, ledger: PaymentLedger) -> Verdict:
    """Escrow the amount up front; a caller who cannot pay is rejected outright."""
    try:
        hold_id = ledger.hold(caller, callee, amount)
    except InsufficientFunds:
        return reject(402, "payment")
    return Verdict("challenge", challenge_kind="payment", token=hold_id)


def payment_settle(hold_id: str, callee_says_spit: bool, ledger: PaymentLedger) -> PaymentLedger:
    ledger.settle(hold_id, callee_says_spit)
    return ledger
