"""The defense-side SIP endpoint/proxy.

Answers SIP over a transport handle: screens INVITEs through the configured
gate chain, runs a registrar, traps unassigned URIs in the honeypot, relays
calls to registered contacts, and keeps per-call outcome accounting."""

from __future__ import annotations

import heapq
import random
import time
import xml.etree.ElementTree as ET
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

from . import defenses as dfs
from . import ids, sipmsg
from .sipmsg import SipMessage, SipUri
from .transport import Addr, LoopbackNet, NodeHandle

GATE_KINDS = (
    "passive_fingerprint",
    "active_fingerprint",
    "list",
    "reputation",
    "turing",
    "puzzle",
    "payment",
    "ids",
)

OUTCOME_FORWARDED = "forwarded"
OUTCOME_REJECTED = "rejected"
OUTCOME_CHALLENGED = "challenged"
OUTCOME_QUARANTINED = "quarantined"
OUTCOME_NO_SUCH_USER = "no_such_user"  # 404 with no honeypot: not a screened attempt

_TAP_LIMIT = 20000


@dataclass(frozen=True)
class GateSpec:
    kind: str
    params: dict[str, str] = field(default_factory=dict)


@dataclass
class DefenseConfig:
    domain: str = "example.com"
    users: dict[str, bool] = field(default_factory=dict)  # user name -> online
    options_policy: str = "honest"  # "honest" | "always-200"
    chain: list[GateSpec] = field(default_factory=list)
    honeypot_enabled: bool = False
    feedback_header: str = dfs.FEEDBACK_HEADER_DEFAULT
    ring_delay_s: float = 0.0
    answer_delay_s: float = 0.0
    registrar_ttl_s: float = 3600.0
    challenge_expiry_s: float = 30.0
    probe_timeout_s: float = 0.25
    retry_window_s: float = 60.0
    grey_ttl_s: float = 86400.0
    consent: bool = False
    shared_whitelist: bool = False
    promote_on_challenge: bool = True
    weights: dfs.ReputationWeights = field(default_factory=dfs.ReputationWeights)
    rep_reject_below: float = -3.0
    rep_challenge_below: float = -1.0
    puzzle_bits: int = 16
    payment_amount: int = 100
    unknown_method: str = "forward"
    fingerprint_db: dfs.FingerprintDb | None = None
    ids_model: ids.CptModel | None = None
    ids_window_s: float = 60.0
    whitelist: list[tuple[str, str]] = field(default_factory=list)  # (owner uri, caller uri)
    blacklist: list[tuple[str, str]] = field(default_factory=list)
    balances: dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        for gate in self.chain:
            if gate.kind not in GATE_KINDS:
                raise dfs.DefenseError(f"unknown gate kind {gate.kind!r}")
            if gate.kind.endswith("fingerprint") and self.fingerprint_db is None:
                raise dfs.DefenseError(f"{gate.kind} gate needs a fingerprint db")
            if gate.kind == "ids" and self.ids_model is None:
                raise dfs.DefenseError("ids gate needs a model")
        if self.options_policy not in ("honest", "always-200"):
            raise dfs.DefenseError(f"bad options policy {self.options_policy!r}")

    def user_uri(self, user: str) -> str:
        return f"sip:{user}@{self.domain}"


def load_config(path: str | Path) -> DefenseConfig:
    path = Path(path)
    return config_from_xml(path.read_text(encoding="utf-8"), base_dir=path.parent)


def config_from_xml(text: str, base_dir: Path | None = None) -> DefenseConfig:
    root = ET.fromstring(text)
    cfg = DefenseConfig(domain=root.get("domain", "example.com"))
    users = root.find("users")
    if users is not None:
        cfg.options_policy = users.get("options_policy", "honest")
        for u in users.findall("user"):
            cfg.users[u.get("name", "")] = u.get("online", "true") == "true"
        for r in users.findall("range"):
            prefix, width = r.get("prefix", ""), int(r.get("width", "4"))
            online = r.get("online", "true") == "true"
            for i in range(10**width):
                cfg.users[f"{prefix}{i:0{width}d}"] = online
    lists = root.find("lists")
    if lists is not None:
        cfg.retry_window_s = float(lists.get("retry_window_s", cfg.retry_window_s))
        cfg.grey_ttl_s = float(lists.get("grey_ttl_s", cfg.grey_ttl_s))
        cfg.consent = lists.get("consent", "false") == "true"
        cfg.shared_whitelist = lists.get("shared_whitelist", "false") == "true"
        for w in lists.findall("white"):
            cfg.whitelist.append((w.get("owner", "*"), w.get("uri", "")))
        for b in lists.findall("black"):
            cfg.blacklist.append((b.get("owner", "*"), b.get("uri", "")))
    rep = root.find("reputation")
    if rep is not None:
        cfg.weights = dfs.ReputationWeights(
            feedback=float(rep.get("w_f", "1")),
            blacklist=float(rep.get("w_b", "5")),
            density=float(rep.get("w_d", "0.1")),
            short_calls=float(rep.get("w_l", "2")),
        )
        cfg.rep_reject_below = float(rep.get("reject_below", cfg.rep_reject_below))
        cfg.rep_challenge_below = float(rep.get("challenge_below", cfg.rep_challenge_below))
    pay = root.find("payments")
    if pay is not None:
        cfg.payment_amount = int(pay.get("amount", cfg.payment_amount))
        for b in pay.findall("balance"):
            cfg.balances[b.get("account", "")] = int(b.get("amount", "0"))
    for tag, attr, cast in (
        ("turing", "expiry_s", float),
        ("puzzle", "bits", int),
        ("ids", "window_s", float),
        ("registrar", "ttl_s", float),
    ):
        el = root.find(tag)
        if el is not None and el.get(attr) is not None:
            if tag == "turing":
                cfg.challenge_expiry_s = float(el.get(attr))
            elif tag == "puzzle":
                cfg.puzzle_bits = int(el.get(attr))
            elif tag == "ids":
                cfg.ids_window_s = float(el.get(attr))
            elif tag == "registrar":
                cfg.registrar_ttl_s = float(el.get(attr))
    fp = root.find("fingerprints")
    if fp is not None and fp.get("path"):
        p = Path(fp.get("path"))
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        cfg.fingerprint_db = dfs.FingerprintDb.load(p)
    idsel = root.find("ids")
    if idsel is not None and idsel.get("model"):
        p = Path(idsel.get("model"))
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        cfg.ids_model = ids.CptModel.load(p)
    hp = root.find("honeypot")
    if hp is not None:
        cfg.honeypot_enabled = hp.get("enabled", "false") == "true"
    ans = root.find("answer")
    if ans is not None:
        cfg.ring_delay_s = float(ans.get("ring_delay_s", "0"))
        cfg.answer_delay_s = float(ans.get("answer_delay_s", "0"))
    chain = root.find("chain")
    if chain is not None:
        for g in chain.findall("gate"):
            params = {k: v for k, v in g.attrib.items() if k != "kind"}
            cfg.chain.append(GateSpec(kind=g.get("kind", ""), params=params))
    cfg.validate()
    return cfg


class _CallCtx:
    __slots__ = (
        "call_id",
        "invite",
        "caller",
        "callee_user",
        "callee_uri",
        "src",
        "gate_index",
        "phase",
        "epoch",
        "probe_results",
        "probe_by_cseq",
        "challenge_id",
        "challenge_kind",
        "challenge_token",
        "hold_id",
        "relay_addr",
        "answered_at",
        "established",
    )

    def __init__(self, call_id: str, invite: SipMessage, caller: str, callee_user: str, callee_uri: str, src: Addr):
        self.call_id = call_id
        self.invite = invite
        self.caller = caller
        self.callee_user = callee_user
        self.callee_uri = callee_uri
        self.src = src
        self.gate_index = 0
        self.phase = "screening"
        self.epoch = 0
        self.probe_results: dict[str, tuple[str, dict[str, str]]] = {}
        self.probe_by_cseq: dict[str, str] = {}
        self.challenge_id = ""
        self.challenge_kind = ""
        self.challenge_token: object = None
        self.hold_id: str | None = None
        self.relay_addr: Addr | None = None
        self.answered_at: float | None = None
        self.established = False

    def bump(self) -> int:
        self.epoch += 1
        return self.epoch


class DefenseEndpoint:
    """Attach to a LoopbackNet (or drive via serve_udp) and let it answer."""

    def __init__(self, config: DefenseConfig, rng: random.Random | None = None):
        config.validate()
        self.config = config
        self.handle: NodeHandle | None = None  # set by bind()
        self.rng = rng or random.Random(0)
        self.lists = dfs.ListStore(
            retry_window_s=config.retry_window_s,
            grey_ttl_s=config.grey_ttl_s,
            consent=config.consent,
            shared_whitelist=config.shared_whitelist,
        )
        for owner, uri in config.whitelist:
            self.lists.add_white(owner, uri)
        self.reputation = dfs.ReputationStore(weights=config.weights)
        for owner, uri in config.blacklist:
            self.lists.add_black(owner, uri)
            self.reputation.update(uri, dfs.Blacklisted(), now=0.0)
        self.ledger = dfs.PaymentLedger(dict(config.balances))
        self.turing = dfs.TuringGate(self.rng, expiry_s=config.challenge_expiry_s)
        self.space = ids.UriSpace(assigned=set(config.users))
        self.honeypot_log = ids.HoneypotLog()
        self.bindings: dict[str, tuple[Addr, str, float]] = {}  # user -> (addr, contact uri, expires)
        self.binding_history: list[tuple[float, str, str]] = []
        self.calls: dict[str, _CallCtx] = {}
        self.outcomes: dict[str, str] = {}
        self.established_sessions = 0
        self.parse_errors = 0
        self._challenges: dict[str, _CallCtx] = {}
        self._challenge_seq = 0
        self._tap: dict[str, deque[ids.TraceEvent]] = {}

    def bind(self, handle) -> None:
        self.handle = handle

    # -- accounting -----------------------------------------------------------

    def outcome_counts(self) -> Counter:
        return Counter(self.outcomes.values())

    def _set_outcome(self, ctx: _CallCtx, outcome: str) -> None:
        self.outcomes[ctx.call_id] = outcome

    # -- traffic tap ------------------------------------------------------------

    def _tap_event(self, identity: str, msg: SipMessage, direction: str) -> None:
        q = self._tap.setdefault(identity, deque(maxlen=_TAP_LIMIT))
        q.append(ids.TraceEvent(t=self.handle.now(), direction=direction, msg=msg))

    def trace_of(self, identity: str) -> list[ids.TraceEvent]:
        return list(self._tap.get(identity, ()))

    # -- inbound ---------------------------------------------------------------

    def on_datagram(self, data: bytes, src: Addr) -> None:
        try:
            msg = sipmsg.parse(data)
        except sipmsg.SipError:
            self.parse_errors += 1
            return
        if msg.is_request:
            self._on_request(msg, src)
        else:
            self._on_response(msg, src)

    def _on_request(self, msg: SipMessage, src: Addr) -> None:
        caller = str(msg.from_uri) if msg.from_uri else f"sip:unknown@{src[0]}"
        self._tap_event(caller, msg, "in")
        ctx = self.calls.get(msg.call_id or "")
        if ctx is not None and ctx.relay_addr is not None and msg.method not in ("REGISTER",):
            self._relay(ctx, msg, src)
            return
        method = msg.method
        if method == "INVITE":
            self._handle_invite(msg, src, caller)
        elif method == "REGISTER":
            self._handle_register(msg, src)
        elif method == "OPTIONS":
            self._handle_options(msg, src, caller)
        elif method == "INFO":
            self._handle_info(msg, src)
        elif method == "ACK":
            self._handle_ack(msg, src)
        elif method == "CANCEL":
            self._handle_cancel(msg, src)
        elif method == "BYE":
            self._handle_bye(msg, src)
        else:
            self._reply(msg, 501, "Not Implemented", src, identity=caller)

    # -- request handlers ---------------------------------------------------------

    def _handle_invite(self, msg: SipMessage, src: Addr, caller: str) -> None:
        call_id = msg.call_id or f"anon-{len(self.calls)}"
        self._reply(msg, 100, "Trying", src, identity=caller)
        callee_user = msg.uri.user if msg.uri else ""
        ctx = _CallCtx(
            call_id=call_id,
            invite=msg,
            caller=caller,
            callee_user=callee_user,
            callee_uri=self.config.user_uri(callee_user),
            src=src,
        )
        ctx.bump()
        self.calls[call_id] = ctx
        if callee_user not in self.config.users:
            if self.config.honeypot_enabled:
                self._quarantine(ctx)
            else:
                self._set_outcome(ctx, OUTCOME_NO_SUCH_USER)
                self._reply(msg, 404, "Not Found", src, identity=caller)
                ctx.phase = "done"
            return
        self._advance_chain(ctx)

    def _handle_register(self, msg: SipMessage, src: Addr) -> None:
        aor = msg.to_uri or msg.uri
        user = aor.user if aor else ""
        contact_raw = msg.header("Contact") or ""
        now = self.handle.now()
        try:
            contact = SipUri.parse(contact_raw) if contact_raw else None
        except sipmsg.DomainError:
            contact = None
        if contact is None:
            self._reply(msg, 400, "Bad Request", src)
            return
        addr = (contact.host, contact.port or 5060)
        self.bindings[user] = (addr, str(contact), now + self.config.registrar_ttl_s)
        self.binding_history.append((now, user, str(contact)))
        self._reply(msg, 200, "OK", src)

    def _handle_options(self, msg: SipMessage, src: Addr, caller: str) -> None:
        call_id = msg.call_id or f"opt-{len(self.outcomes)}"
        user = msg.uri.user if msg.uri else ""
        target = self.config.user_uri(user)
        if user not in self.config.users and self.config.honeypot_enabled:
            self.outcomes[call_id] = OUTCOME_QUARANTINED
            self.honeypot_log.record(self.handle.now(), caller, f"{src[0]}:{src[1]}", "OPTIONS", target)
            self._reply(msg, 200, "OK", src, identity=caller)
            return
        if self.config.options_policy == "always-200":
            self.outcomes[call_id] = (
                OUTCOME_FORWARDED if user in self.config.users else OUTCOME_NO_SUCH_USER
            )
            self._reply(msg, 200, "OK", src, identity=caller)
            return
        if user not in self.config.users:
            self.outcomes[call_id] = OUTCOME_NO_SUCH_USER
            self._reply(msg, 404, "Not Found", src, identity=caller)
        elif not self.config.users[user]:
            self.outcomes[call_id] = OUTCOME_FORWARDED
            self._reply(msg, 480, "Temporarily Unavailable", src, identity=caller)
        else:
            self.outcomes[call_id] = OUTCOME_FORWARDED
            self._reply(msg, 200, "OK", src, identity=caller)

    def _handle_info(self, msg: SipMessage, src: Addr) -> None:
        self._reply(msg, 200, "OK", src)
        cid = msg.header(dfs.CHALLENGE_ID_HEADER) or ""
        ctx = self._challenges.get(cid)
        if ctx is None or ctx.phase != "challenged":
            return
        fields = dfs.body_fields(msg.body)
        now = self.handle.now()
        verdict: dfs.Verdict
        if ctx.challenge_kind == "turing":
            try:
                verdict = self.turing.verify(str(ctx.challenge_token), fields.get("answer", ""), now)
            except (dfs.UnknownToken, dfs.ExpiredToken):
                verdict = dfs.reject(403, "turing")
        elif ctx.challenge_kind == "puzzle":
            puzzle: dfs.Puzzle = ctx.challenge_token  # type: ignore[assignment]
            try:
                preimage = bytes.fromhex(fields.get("preimage", ""))
            except ValueError:
                preimage = b""
            verdict = dfs.puzzle_verify(puzzle.image, puzzle.bits, preimage)
        elif ctx.challenge_kind == "payment":
            if fields.get("accept", "") == ctx.hold_id:
                verdict = dfs.FORWARD
            else:
                verdict = dfs.reject(402, "payment")
        else:
            return
        del self._challenges[cid]
        ctx.bump()
        if verdict.is_forward:
            self._on_challenge_passed(ctx)
            ctx.phase = "screening"
            ctx.gate_index += 1
            self._advance_chain(ctx)
        else:
            if ctx.challenge_kind == "payment" and ctx.hold_id is not None:
                self.ledger.settle(ctx.hold_id, callee_says_spit=False)
                ctx.hold_id = None
            self._do_reject(ctx, verdict)

    def _on_challenge_passed(self, ctx: _CallCtx) -> None:
        # Challenge success doubles as consent: a grey caller becomes known-good.
        if self.config.promote_on_challenge:
            if self.lists.grey.get(ctx.callee_uri, {}).pop(ctx.caller, None) is not None:
                self.lists.add_white(ctx.callee_uri, ctx.caller)

    def _handle_ack(self, msg: SipMessage, src: Addr) -> None:
        ctx = self.calls.get(msg.call_id or "")
        if ctx is None:
            return
        if ctx.phase == "answered" and not ctx.established:
            ctx.established = True
            self.established_sessions += 1

    def _handle_cancel(self, msg: SipMessage, src: Addr) -> None:
        ctx = self.calls.get(msg.call_id or "")
        self._reply(msg, 200, "OK", src)
        if ctx is None or ctx.established:
            return
        if ctx.phase in ("ringing", "answered", "screening", "challenged", "probing"):
            ctx.bump()  # cancels any pending answer timer
            ctx.phase = "done"
            self._reply(ctx.invite, 487, "Request Terminated", ctx.src, identity=ctx.caller)

    def _handle_bye(self, msg: SipMessage, src: Addr) -> None:
        self._reply(msg, 200, "OK", src)
        ctx = self.calls.get(msg.call_id or "")
        if ctx is None:
            return
        now = self.handle.now()
        if ctx.established and ctx.answered_at is not None:
            self.reputation.update(ctx.caller, dfs.CallEnded(now - ctx.answered_at), now)
        if ctx.hold_id is not None:
            # Caller hangs up with nobody marking it spit: the escrow refunds.
            self.ledger.settle(ctx.hold_id, callee_says_spit=False)
            ctx.hold_id = None
        ctx.bump()
        ctx.phase = "done"

    def _on_response(self, msg: SipMessage, src: Addr) -> None:
        ctx = self.calls.get(msg.call_id or "")
        if ctx is None:
            return
        if ctx.phase == "probing" and msg.cseq_method == "OPTIONS" and src == ctx.src:
            cseq = (msg.header("CSeq") or "").split()
            probe_class = ctx.probe_by_cseq.get(cseq[0] if cseq else "")
            if probe_class and probe_class not in ctx.probe_results:
                ctx.probe_results[probe_class] = (
                    str(msg.status),
                    {k.lower(): v.strip() for k, v in msg.headers},
                )
                if len(ctx.probe_results) == len(dfs.PROBE_CLASSES):
                    self._finish_probe(ctx)
            return
        if ctx.relay_addr is not None and src == ctx.relay_addr:
            # Callee leg answered: track session state, pass it through.
            if msg.status == 200 and msg.cseq_method == "INVITE":
                ctx.phase = "answered"
                ctx.answered_at = self.handle.now()
            self.handle.send(sipmsg.serialize(msg), ctx.src)

    # -- relay --------------------------------------------------------------------

    def _relay(self, ctx: _CallCtx, msg: SipMessage, src: Addr) -> None:
        if src == ctx.src and ctx.relay_addr is not None:
            if msg.method == "ACK" and ctx.phase == "answered" and not ctx.established:
                ctx.established = True
                self.established_sessions += 1
            self.handle.send(sipmsg.serialize(msg), ctx.relay_addr)
        elif src == ctx.relay_addr:
            if msg.method == "BYE":
                self._ingest_feedback(ctx, msg)
                self._end_session(ctx)
            self.handle.send(sipmsg.serialize(msg), ctx.src)
        if msg.method == "BYE" and src == ctx.src:
            self._end_session(ctx)

    def _ingest_feedback(self, ctx: _CallCtx, bye: SipMessage) -> None:
        raw = bye.header(self.config.feedback_header)
        if raw is None:
            return
        try:
            value = float(raw)
        except ValueError:
            return
        now = self.handle.now()
        self.reputation.update(ctx.caller, dfs.Feedback(value), now)
        if ctx.hold_id is not None:
            self.ledger.settle(ctx.hold_id, callee_says_spit=value < 0)
            ctx.hold_id = None

    def _end_session(self, ctx: _CallCtx) -> None:
        now = self.handle.now()
        if ctx.established and ctx.answered_at is not None:
            self.reputation.update(ctx.caller, dfs.CallEnded(now - ctx.answered_at), now)
        if ctx.hold_id is not None:
            self.ledger.settle(ctx.hold_id, callee_says_spit=False)
            ctx.hold_id = None
        ctx.bump()
        ctx.phase = "done"

    # -- chain --------------------------------------------------------------------

    def _advance_chain(self, ctx: _CallCtx) -> None:
        now = self.handle.now()
        while ctx.gate_index < len(self.config.chain):
            gate = self.config.chain[ctx.gate_index]
            verdict = self._evaluate_gate(ctx, gate, now)
            if verdict is None:
                return  # suspended: probing or challenged
            if not verdict.is_forward:
                self._apply_non_forward(ctx, verdict)
                return
            ctx.gate_index += 1
        self._deliver(ctx)

    def _evaluate_gate(self, ctx: _CallCtx, gate: GateSpec, now: float) -> dfs.Verdict | None:
        kind = gate.kind
        if kind == "passive_fingerprint":
            return dfs.passive_check(ctx.invite, self.config.fingerprint_db, self.config.unknown_method)
        if kind == "active_fingerprint":
            self._start_probe(ctx)
            return None
        if kind == "list":
            mode = gate.params.get("mode", "full")
            if mode == "black-only":
                return dfs.reject(603, "blacklisted") if self.lists.in_black(ctx.callee_uri, ctx.caller) else dfs.FORWARD
            if mode == "white-only":
                return dfs.FORWARD if self.lists.in_white(ctx.callee_uri, ctx.caller) else dfs.reject(603, "not whitelisted")
            return dfs.list_check(ctx.caller, ctx.callee_uri, self.lists, now)
        if kind == "reputation":
            return dfs.reputation_check(
                ctx.caller, self.reputation, self.config.rep_reject_below, self.config.rep_challenge_below, now
            )
        if kind == "turing":
            # Known-good callers skip the gate: this is what lets the challenge
            # solve the white-list introduction problem instead of nagging everyone.
            if self.lists.in_white(ctx.callee_uri, ctx.caller):
                return dfs.FORWARD
            return self.turing.challenge(now)
        if kind == "puzzle":
            if self.lists.in_white(ctx.callee_uri, ctx.caller):
                return dfs.FORWARD
            return dfs.puzzle_challenge(self.config.puzzle_bits, self.rng)
        if kind == "payment":
            if self.lists.in_white(ctx.callee_uri, ctx.caller):
                return dfs.FORWARD
            return dfs.payment_hold(ctx.caller, ctx.callee_uri, self.config.payment_amount, self.ledger)
        if kind == "ids":
            return self._ids_gate(ctx, now)
        raise dfs.DefenseError(f"unknown gate {kind!r}")

    def _ids_gate(self, ctx: _CallCtx, now: float) -> dfs.Verdict:
        model = self.config.ids_model
        assert model is not None
        window_s = self.config.ids_window_s
        events = [e for e in self._tap.get(ctx.caller, ()) if e.t > now - window_s]
        window = ids.extract_window(events, window_s)
        try:
            posterior = ids.infer(window, model)
        except ids.UnbinnableValue:
            return dfs.FORWARD
        if ids.top_class(posterior) != "normal":
            return dfs.reject(603, "ids")
        return dfs.FORWARD

    def _apply_non_forward(self, ctx: _CallCtx, verdict: dfs.Verdict) -> None:
        if verdict.kind == "reject":
            self._do_reject(ctx, verdict)
        elif verdict.kind == "challenge":
            self._issue_challenge(ctx, verdict)
        elif verdict.kind == "quarantine":
            self._quarantine(ctx)
        else:  # pragma: no cover
            raise dfs.DefenseError(verdict.kind)

    def _do_reject(self, ctx: _CallCtx, verdict: dfs.Verdict) -> None:
        self._set_outcome(ctx, OUTCOME_REJECTED)
        ctx.bump()
        ctx.phase = "done"
        self._reply(ctx.invite, verdict.status, verdict.reason or "Rejected", ctx.src, identity=ctx.caller)

    def _issue_challenge(self, ctx: _CallCtx, verdict: dfs.Verdict) -> None:
        now = self.handle.now()
        kind = verdict.challenge_kind
        token = verdict.token
        if kind == "payment" and token is None:
            hold = dfs.payment_hold(ctx.caller, ctx.callee_uri, self.config.payment_amount, self.ledger)
            if hold.kind == "reject":
                self._do_reject(ctx, hold)
                return
            token = hold.token
        self._challenge_seq += 1
        cid = f"ch{self._challenge_seq}"
        ctx.challenge_id = cid
        ctx.challenge_kind = kind
        ctx.challenge_token = token
        ctx.phase = "challenged"
        epoch = ctx.bump()
        self._challenges[cid] = ctx
        self._set_outcome(ctx, OUTCOME_CHALLENGED)
        if kind == "turing":
            body = f"digits: {token}\n"
        elif kind == "puzzle":
            body = f"image: {token.image}\nbits: {token.bits}\n"
        else:
            ctx.hold_id = str(token)
            body = f"amount: {self.config.payment_amount}\nhold: {token}\n"
        self._reply(
            ctx.invite,
            183,
            "Session Progress",
            ctx.src,
            extra=[(dfs.CHALLENGE_ID_HEADER, cid), (dfs.CHALLENGE_KIND_HEADER, kind)],
            body=body.encode("utf-8"),
            identity=ctx.caller,
        )
        self.handle.call_at(now + self.config.challenge_expiry_s, lambda: self._challenge_expired(ctx, epoch, cid))

    def _challenge_expired(self, ctx: _CallCtx, epoch: int, cid: str) -> None:
        if ctx.epoch != epoch or ctx.phase != "challenged":
            return
        self._challenges.pop(cid, None)
        if ctx.hold_id is not None:
            self.ledger.settle(ctx.hold_id, callee_says_spit=False)
            ctx.hold_id = None
        status = 402 if ctx.challenge_kind == "payment" else 403
        self._do_reject(ctx, dfs.reject(status, f"{ctx.challenge_kind} unanswered"))

    def _start_probe(self, ctx: _CallCtx) -> None:
        ctx.phase = "probing"
        ctx.probe_results = {}
        epoch = ctx.bump()
        probes = dfs.build_probes(ctx.caller, self.handle.addr, ctx.call_id)
        for i, (probe_class, msg) in enumerate(probes, start=1):
            ctx.probe_by_cseq[str(i)] = probe_class
            self.handle.send(sipmsg.serialize(msg), ctx.src)
        self.handle.call_at(self.handle.now() + self.config.probe_timeout_s, lambda: self._probe_timeout(ctx, epoch))

    def _probe_timeout(self, ctx: _CallCtx, epoch: int) -> None:
        if ctx.epoch != epoch or ctx.phase != "probing":
            return
        self._finish_probe(ctx)

    def _finish_probe(self, ctx: _CallCtx) -> None:
        results = dict(ctx.probe_results)
        for probe_class in dfs.PROBE_CLASSES:
            results.setdefault(probe_class, (dfs.TIMEOUT_SYMBOL, {}))
        ctx.bump()
        if dfs.behavior_vector_matches(self.config.fingerprint_db, results):
            ctx.phase = "screening"
            ctx.gate_index += 1
            self._advance_chain(ctx)
        else:
            self._do_reject(ctx, dfs.reject(403, "behavior"))

    # -- delivery -------------------------------------------------------------------

    def _deliver(self, ctx: _CallCtx) -> None:
        self._set_outcome(ctx, OUTCOME_FORWARDED)
        binding = self.bindings.get(ctx.callee_user)
        now = self.handle.now()
        if binding is not None and binding[2] > now:
            ctx.relay_addr = binding[0]
            ctx.phase = "relaying"
            ctx.bump()
            self.handle.send(sipmsg.serialize(ctx.invite), ctx.relay_addr)
            return
        if not self.config.users.get(ctx.callee_user, False):
            ctx.phase = "done"
            ctx.bump()
            self._reply(ctx.invite, 480, "Temporarily Unavailable", ctx.src, identity=ctx.caller)
            return
        ctx.phase = "ringing"
        epoch = ctx.bump()
        self.handle.call_at(now + self.config.ring_delay_s, lambda: self._ring(ctx, epoch))
        self.handle.call_at(
            now + self.config.ring_delay_s + self.config.answer_delay_s, lambda: self._answer(ctx, epoch)
        )

    def _ring(self, ctx: _CallCtx, epoch: int) -> None:
        if ctx.epoch != epoch or ctx.phase != "ringing":
            return
        self._reply(ctx.invite, 180, "Ringing", ctx.src, identity=ctx.caller)

    def _answer(self, ctx: _CallCtx, epoch: int) -> None:
        if ctx.epoch != epoch or ctx.phase != "ringing":
            return
        ctx.phase = "answered"
        ctx.answered_at = self.handle.now()
        contact = f"<sip:{ctx.callee_user}@{self.handle.addr[0]}:{self.handle.addr[1]}>"
        self._reply(ctx.invite, 200, "OK", ctx.src, extra=[("Contact", contact)], identity=ctx.caller)

    def _quarantine(self, ctx: _CallCtx) -> None:
        # The trap answers plausibly so scanners file the URI as assigned-online.
        self._set_outcome(ctx, OUTCOME_QUARANTINED)
        target = self.config.user_uri(ctx.callee_user)
        self.honeypot_log.record(
            self.handle.now(), ctx.caller, f"{ctx.src[0]}:{ctx.src[1]}", ctx.invite.method or "", target
        )
        ctx.phase = "ringing"
        epoch = ctx.bump()
        now = self.handle.now()
        self.handle.call_at(now + self.config.ring_delay_s, lambda: self._ring(ctx, epoch))
        self.handle.call_at(
            now + self.config.ring_delay_s + self.config.answer_delay_s, lambda: self._honeypot_answer(ctx, epoch)
        )

    def _honeypot_answer(self, ctx: _CallCtx, epoch: int) -> None:
        if ctx.epoch != epoch or ctx.phase != "ringing":
            return
        ctx.phase = "answered"
        self._reply(ctx.invite, 200, "OK", ctx.src, identity=ctx.caller)

    # -- admin operations ----------------------------------------------------------

    def blacklist_identity(self, owner: str, identity: str) -> None:
        self.lists.add_black(owner, identity)
        self.reputation.update(identity, dfs.Blacklisted(), self.handle.now())

    def approve_caller(self, callee_uri: str, caller: str) -> None:
        self.lists.approve(callee_uri, caller)

    # -- plumbing -------------------------------------------------------------------

    def _reply(
        self,
        req: SipMessage,
        status: int,
        reason: str,
        dst: Addr,
        extra: list[tuple[str, str]] | None = None,
        body: bytes = b"",
        identity: str | None = None,
    ) -> None:
        headers = []
        for name in ("Via", "From", "To", "Call-ID", "CSeq"):
            value = req.header(name)
            if value is not None:
                headers.append((name, value))
        headers.extend(extra or [])
        msg = sipmsg.response(status, reason, headers, body)
        if identity is not None:
            self._tap_event(identity, msg, "out")
        self.handle.send(sipmsg.serialize(msg), dst)


def attach_endpoint(
    net: LoopbackNet, addr: Addr, config: DefenseConfig, rng: random.Random | None = None
) -> DefenseEndpoint:
    endpoint = DefenseEndpoint(config, rng)
    endpoint.bind(net.attach(addr, endpoint))
    return endpoint


class _UdpHandle:
    """NodeHandle lookalike over a real socket, with a private timer heap."""

    def __init__(self, sock):
        self._sock = sock
        self.addr = sock.addr
        self._timers: list[tuple[float, int, object]] = []
        self._seq = 0

    def now(self) -> float:
        return time.monotonic()

    def send(self, data: bytes, dst: Addr) -> None:
        self._sock.send(data, dst)

    def call_at(self, when: float, fn) -> None:
        self._seq += 1
        heapq.heappush(self._timers, (when, self._seq, fn))

    def fire_due(self) -> None:
        while self._timers and self._timers[0][0] <= self.now():
            _, _, fn = heapq.heappop(self._timers)
            fn()


def serve_udp(config: DefenseConfig, local: Addr, rng: random.Random | None = None, stop_check=None) -> None:
    """Blocking UDP server loop for `defend --transport udp`."""
    from .transport import UdpSocket

    sock = UdpSocket(local)
    handle = _UdpHandle(sock)
    endpoint = DefenseEndpoint(config, rng)
    endpoint.bind(handle)
    stop_check = stop_check or (lambda: False)
    try:
        while not stop_check():
            item = sock.receive(0.05)
            if item is not None:
                endpoint.on_datagram(*item)
            handle.fire_due()
    finally:
        sock.close()
