"""Experiment harness: run attack x defense matchups on the loopback transport
and measure what got through. Everything is seeded and runs in virtual time."""

from __future__ import annotations

import json
import random
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

from . import attacks, defenses as dfs, endpoint as ep, engine, ids, scenario as sc, sipmsg
from .transport import Addr, LoopbackNet, VirtualClock

DATA_DIR = Path(__file__).parent / "data"

GATE_ADDR: Addr = ("10.0.0.1", 5060)
ATTACKER_ADDR: Addr = ("10.0.0.99", 5061)
RECEIVER_ADDR: Addr = ("10.0.0.98", 5062)
SOLVER_ADDR: Addr = ("10.0.0.97", 5080)

DOMAIN = "example.com"
ASSIGNED_USERS = [f"u{i:03d}" for i in range(20)]
HONEST_IDENTITY = f"sip:friend@{DOMAIN}"
KNOWN_SPITTER = "sip:spitter@spam.example"
FUNDED_VICTIM = f"sip:subscriber0@{DOMAIN}"

DRAIN_WINDOW_S = 120.0  # settle pending challenge expiries after the runs end


class HarnessError(Exception):
    pass


@dataclass(frozen=True)
class Experiment:
    name: str
    attack: str
    defense: str
    attack_params: dict = field(default_factory=dict)
    defense_params: dict = field(default_factory=dict)
    repetitions: int = 1
    seed: int = 0


@dataclass
class EvalReport:
    name: str
    attack: str
    defense: str
    attempted: int = 0
    forwarded: int = 0
    rejected: int = 0
    challenged: int = 0
    quarantined: int = 0
    no_such_user: int = 0
    false_positive_rate: float | None = None
    runtime_s: float = 0.0
    incomplete: bool = False
    error: str = ""

    @property
    def bypass_rate(self) -> float:
        return self.forwarded / self.attempted if self.attempted else 0.0

    @property
    def detection_rate(self) -> float:
        return (self.rejected + self.quarantined) / self.attempted if self.attempted else 0.0

    def to_json_dict(self) -> dict:
        # runtime_s deliberately left out: reports must be byte-stable across runs
        return {
            "name": self.name,
            "attack": self.attack,
            "defense": self.defense,
            "attempted": self.attempted,
            "forwarded": self.forwarded,
            "rejected": self.rejected,
            "challenged_unresolved": self.challenged,
            "quarantined": self.quarantined,
            "no_such_user": self.no_such_user,
            "bypass_rate": round(self.bypass_rate, 6),
            "detection_rate": round(self.detection_rate, 6),
            "false_positive_rate": self.false_positive_rate,
            "incomplete": self.incomplete,
            "error": self.error,
        }


class SimPhone:
    """A bare endpoint at its own IP: the hardphone a direct-IP scan finds."""

    def __init__(self, user: str, send_ringing: bool = True):
        self.user = user
        self.send_ringing = send_ringing
        self.handle = None
        self.invites = 0
        self.established = 0

    def bind(self, handle) -> None:
        self.handle = handle

    def on_datagram(self, data: bytes, src: Addr) -> None:
        try:
            msg = sipmsg.parse(data)
        except sipmsg.SipError:
            return
        if not msg.is_request:
            return
        contact = f"<sip:{self.user}@{self.handle.addr[0]}:{self.handle.addr[1]}>"
        if msg.method == "INVITE":
            self.invites += 1
            if self.send_ringing:
                self._reply(msg, 180, "Ringing", src)
            self._reply(msg, 200, "OK", src, extra=[("Contact", contact)])
        elif msg.method == "OPTIONS":
            self._reply(msg, 200, "OK", src, extra=[("Contact", contact)])
        elif msg.method == "ACK":
            self.established += 1
        elif msg.method in ("BYE", "CANCEL"):
            self._reply(msg, 200, "OK", src)

    def _reply(self, req, status, reason, dst, extra=None):
        headers = [(n, v) for n in ("Via", "From", "To", "Call-ID", "CSeq") if (v := req.header(n)) is not None]
        headers.extend(extra or [])
        self.handle.send(sipmsg.serialize(sipmsg.response(status, reason, headers)), dst)


def attach_node(net: LoopbackNet, addr: Addr, node) -> None:
    node.bind(net.attach(addr, node))


class Lab:
    """One experiment's world: a net, its clock, the defense endpoint, helpers."""

    def __init__(self, config: ep.DefenseConfig, seed: int):
        self.clock = VirtualClock()
        self.net = LoopbackNet(self.clock)
        self.rng = random.Random(seed)
        self.endpoint = ep.attach_endpoint(self.net, GATE_ADDR, config, random.Random(seed + 1))
        self.domain = config.domain

    def engine_run(self, plan: engine.ShootPlan, local: Addr, start_at: float = 0.0, timeout_s: float = 3600.0) -> engine.EngineRun:
        sock = self.net.socket(local)
        return engine.EngineRun(plan, sock, self.clock, global_timeout_s=timeout_s, start_at=start_at)

    def drive(self, runs: list[engine.EngineRun], drain_s: float = DRAIN_WINDOW_S) -> None:
        while not all(r.done for r in runs):
            progressed = False
            for r in runs:
                progressed |= r.pump()
            if progressed:
                continue
            dues = [r.next_due() for r in runs if not r.done]
            t = self.net.next_timer_due()
            if t is not None:
                dues.append(t)
            if not dues:
                break
            self.clock.sleep_until(min(dues))
            self.net.fire_due()
        # Settle whatever timers are still pending (challenge expiries mostly).
        horizon = self.clock.now() + drain_s
        while True:
            due = self.net.next_timer_due()
            if due is None or due > horizon:
                break
            self.clock.sleep_until(due)
            self.net.fire_due()


# -- defense registry ----------------------------------------------------------------


def _base_config(**kw) -> ep.DefenseConfig:
    cfg = ep.DefenseConfig(
        domain=DOMAIN,
        users={u: True for u in ASSIGNED_USERS},
        whitelist=[("*", HONEST_IDENTITY)],
        **kw,
    )
    return cfg


def _defense_none(params: dict) -> ep.DefenseConfig:
    return _base_config()

def _defense_passive_fp(params: dict) -> ep.DefenseConfig:
    return _base_config(chain=[ep.GateSpec("passive_fingerprint")], fingerprint_db=_shipped_db())

def _defense_active_fp(params: dict) -> ep.DefenseConfig:
    return _base_config(chain=[ep.GateSpec("active_fingerprint")], fingerprint_db=_shipped_db())

def _defense_blacklist(params: dict) -> ep.DefenseConfig:
    cfg = _base_config(chain=[ep.GateSpec("list", {"mode": "black-only"})])
    cfg.blacklist.append(("*", KNOWN_SPITTER))
    return cfg

def _defense_greylist(params: dict) -> ep.DefenseConfig:
    return _base_config(chain=[ep.GateSpec("list")], retry_window_s=60.0)

def _defense_whitelist(params: dict) -> ep.DefenseConfig:
    cfg = _base_config(chain=[ep.GateSpec("list", {"mode": "white-only"})], shared_whitelist=True)
    for u in ASSIGNED_USERS:
        cfg.whitelist.append((f"sip:{u}@{DOMAIN}", f"sip:colleague@{DOMAIN}"))
    return cfg

def _defense_reputation(params: dict) -> ep.DefenseConfig:
    return _base_config(chain=[ep.GateSpec("reputation")], rep_reject_below=-3.0, rep_challenge_below=-1.0)

def _defense_turing(params: dict) -> ep.DefenseConfig:
    return _base_config(chain=[ep.GateSpec("turing")], challenge_expiry_s=30.0)

def _defense_puzzle(params: dict) -> ep.DefenseConfig:
    return _base_config(chain=[ep.GateSpec("puzzle")], puzzle_bits=int(params.get("bits", "10")))

def _defense_payment(params: dict) -> ep.DefenseConfig:
    cfg = _base_config(chain=[ep.GateSpec("payment")], payment_amount=100)
    cfg.balances[FUNDED_VICTIM] = 100_000
    cfg.balances[HONEST_IDENTITY] = 100_000
    return cfg

def _defense_ids(params: dict) -> ep.DefenseConfig:
    return _base_config(chain=[ep.GateSpec("ids")], ids_model=_shipped_model(), ids_window_s=60.0)

def _defense_honeypot(params: dict) -> ep.DefenseConfig:
    return _base_config(honeypot_enabled=True)


DEFENSES = {
    "none": _defense_none,
    "passive_fp": _defense_passive_fp,
    "active_fp": _defense_active_fp,
    "blacklist": _defense_blacklist,
    "greylist": _defense_greylist,
    "whitelist": _defense_whitelist,
    "reputation": _defense_reputation,
    "turing": _defense_turing,
    "puzzle": _defense_puzzle,
    "payment": _defense_payment,
    "ids": _defense_ids,
    "honeypot": _defense_honeypot,
}


def _shipped_db() -> dfs.FingerprintDb:
    return dfs.FingerprintDb.load(DATA_DIR / "fingerprints.xml")


def _shipped_model() -> ids.CptModel:
    return ids.CptModel.load(DATA_DIR / "cpt_model.json")


def _standard_templates() -> sc.TemplateStore:
    return sc.TemplateStore.from_dir(DATA_DIR / "sets")


# -- attack scenario builders -----------------------------------------------------------


def _spit_scenario(hold_ms: int = 0, accept_payment: bool = False) -> tuple[sc.Scenario, sc.TemplateStore]:
    """INVITE, wait for the answer, ACK, optionally hold, BYE. The payment
    variant confirms a 183 demand via INFO first."""
    store = _standard_templates()
    steps: list[sc.Step] = [sc.Send(template="invite")]
    if accept_payment:
        store.add(
            sc.MessageTemplate(
                "standard",
                "pay_accept",
                "INFO sip:[target_user]@[remote_ip]:[remote_port] SIP/2.0\n"
                "Via: SIP/2.0/UDP [local_ip]:[local_port];branch=z9hG4bK-[call_id]-[cseq]\n"
                "Max-Forwards: 70\n"
                "From: [field0] <sip:[field1]@[domain]>;tag=[call_id]\n"
                "To: <sip:[target_user]@[domain]>\n"
                "Call-ID: [call_id]\n"
                "CSeq: [cseq] INFO\n"
                "X-Challenge-Id: [challenge_id]\n"
                "\n"
                "accept: yes\n",
            )
        )
        steps += [
            sc.Recv(status="183", jump="pay", timeout_ms=300),
            sc.Recv(status="200", timeout_ms=4000),
        ]
    else:
        steps += [sc.Recv(status="200", timeout_ms=4000)]
    tail: list[sc.Step] = [sc.Send(template="ack")]
    if hold_ms > 0:
        tail.append(sc.Pause(ms=hold_ms))
    tail += [
        sc.Send(template="bye"),
        sc.Recv(status="200", timeout_ms=4000),
        sc.Stop(intent="success"),
    ]
    steps += tail
    if accept_payment:
        steps += [
            sc.Label("pay"),
            sc.Send(template="pay_accept"),
            sc.Recv(status="200", timeout_ms=4000),  # INFO acknowledged
            sc.Recv(status="200", timeout_ms=4000),  # the call itself
        ] + tail
    scenario = sc.Scenario(name="spit_call", set_name="standard", steps=tuple(steps))
    scenario.validate()
    return scenario, store


def _greylist_retry_scenario() -> tuple[sc.Scenario, sc.TemplateStore]:
    store = _standard_templates()
    steps = (
        sc.Send(template="invite"),
        sc.Recv(status="480", jump="retry", timeout_ms=1000),
        sc.Recv(status="200", timeout_ms=4000),
        sc.Send(template="ack"),
        sc.Send(template="bye"),
        sc.Recv(status="200", timeout_ms=4000),
        sc.Stop(intent="success"),
        sc.Label("retry"),
        sc.Pause(ms=1000),
        sc.Send(template="invite"),
        sc.Recv(status="200", timeout_ms=4000),
        sc.Send(template="ack"),
        sc.Send(template="bye"),
        sc.Recv(status="200", timeout_ms=4000),
        sc.Stop(intent="success"),
    )
    scenario = sc.Scenario(name="greylist_retry", set_name="standard", steps=steps)
    scenario.validate()
    return scenario, store


def _target_rows(count: int) -> engine.Rows:
    return engine.Rows(tuple((ASSIGNED_USERS[i % len(ASSIGNED_USERS)],) for i in range(count)))


def _plan(
    scenario: sc.Scenario,
    store: sc.TemplateStore,
    caller: engine.Source,
    targets: engine.Source,
    rate: float,
    calls: int,
) -> engine.ShootPlan:
    return engine.ShootPlan(
        entries=[engine.ShootEntry(scenario=scenario, rate=rate, max_calls=calls)],
        remote=GATE_ADDR,
        local=ATTACKER_ADDR,
        templates=store,
        caller_source=caller,
        target_source=targets,
        domain=DOMAIN,
    )


# -- attack registry -----------------------------------------------------------------------


def _attack_bulk_spit(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "200"))
    scenario, store = _spit_scenario()
    plan = _plan(scenario, store, engine.Fixed("sip:bulk@spam.example"), _target_rows(calls), 20.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_known_identity(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "50"))
    scenario, store = _spit_scenario()
    plan = _plan(scenario, store, engine.Fixed(KNOWN_SPITTER), _target_rows(calls), 20.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_identity_switch(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "50"))
    scenario, store = _spit_scenario()
    callers = engine.Rows(tuple((f"Fresh{i}", f"fresh{i:04d}") for i in range(calls)))
    plan = _plan(scenario, store, callers, _target_rows(calls), 20.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_device_spoof(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "30"))
    db = _shipped_db()
    device = db.devices[0]
    scenario, store = _spit_scenario()
    spoofed, spoofed_store = attacks.spoof_device(
        scenario, store, device.fingerprints["INVITE"], attacks.BehaviorProfile.from_device(device)
    )
    plan = _plan(spoofed, spoofed_store, engine.Fixed("sip:bulk@spam.example"), _target_rows(calls), 10.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_greylist_retry(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "30"))
    scenario, store = _greylist_retry_scenario()
    plan = _plan(scenario, store, engine.Fixed("sip:patient@spam.example"), _target_rows(calls), 10.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_captcha_relay(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "20"))
    solver = attacks.SolverEndpoint(random.Random(lab.rng.randrange(2**31)))
    attach_node(lab.net, SOLVER_ADDR, solver)
    scenario, store = attacks.captcha_relay(ASSIGNED_USERS[0], SOLVER_ADDR)
    plan = _plan(scenario, store, engine.Fixed("sip:relay@spam.example"), _target_rows(calls), 10.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_rate_adapted(lab: Lab, params: dict) -> None:
    rounds = int(params.get("rounds", "5"))
    accounts = [f"sip:acct{i:02d}@{DOMAIN}" for i in range(len(ASSIGNED_USERS))]
    partition = attacks.partition_accounts(ASSIGNED_USERS, accounts)
    caller_rows = []
    target_rows = []
    for account, group in partition.assignments.items():
        user = sipmsg.SipUri.parse(account).user
        for target in group:
            caller_rows.append((user, user))
            target_rows.append((target,))
    scenario, store = _spit_scenario()
    calls = len(target_rows) * rounds
    plan = _plan(scenario, store, engine.Rows(tuple(caller_rows)), engine.Rows(tuple(target_rows)), 5.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_paid_impersonation(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "20"))
    scenario, store = _spit_scenario(accept_payment=True)
    plan = _plan(scenario, store, engine.Fixed(FUNDED_VICTIM), _target_rows(calls), 10.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_reputation_push(lab: Lab, params: dict) -> None:
    receivers = int(params.get("receivers", "10"))
    spit_calls = int(params.get("calls", "30"))
    boosted = "sip:boosted@spam.example"
    accounts = [f"sip:{u}@{DOMAIN}" for u in ASSIGNED_USERS[:receivers]]
    kit = attacks.reputation_push(accounts, boosted, value=1.0, hold_ms=15000)
    recv_plan = engine.ShootPlan(
        entries=[
            engine.ShootEntry(scenario=attacks.register_scenario(), rate=100.0, max_calls=receivers),
            engine.ShootEntry(scenario=kit.receiver_scenario, rate=1.0, max_calls=receivers),
        ],
        remote=GATE_ADDR,
        local=RECEIVER_ADDR,
        templates=kit.templates,
        caller_source=engine.Rows(kit.receiver_rows),
        target_source=None,
        domain=DOMAIN,
    )
    call_plan = engine.ShootPlan(
        entries=[engine.ShootEntry(scenario=kit.caller_scenario, rate=2.0, max_calls=receivers)],
        remote=GATE_ADDR,
        local=ATTACKER_ADDR,
        templates=kit.templates,
        caller_source=engine.Fixed(boosted),
        target_source=engine.Rows(kit.target_rows),
        domain=DOMAIN,
    )
    recv_run = lab.engine_run(recv_plan, RECEIVER_ADDR)
    call_run = lab.engine_run(call_plan, ATTACKER_ADDR, start_at=2.0)
    lab.drive([recv_run, call_run])
    # Score boosted; now the actual spam wave, aimed at users without bindings.
    scenario, store = _spit_scenario(hold_ms=8000)
    spit_users = ASSIGNED_USERS[receivers:] or ASSIGNED_USERS
    spit_local = ("10.0.0.96", 5065)
    spit_plan = engine.ShootPlan(
        entries=[engine.ShootEntry(scenario=scenario, rate=10.0, max_calls=spit_calls)],
        remote=GATE_ADDR,
        local=spit_local,
        templates=store,
        caller_source=engine.Fixed(boosted),
        target_source=engine.Rows(tuple((spit_users[i % len(spit_users)],) for i in range(spit_calls))),
        domain=DOMAIN,
    )
    lab.drive([lab.engine_run(spit_plan, spit_local)])


def _attack_scan(lab: Lab, params: dict) -> None:
    prefix = params.get("prefix", "u")
    width = int(params.get("width", "3"))
    count = int(params.get("count", "500"))
    users = [f"{prefix}{i:0{width}d}" for i in range(count)]
    sock = lab.net.socket(("10.0.0.95", 5066))
    try:
        attacks.scan_permanent(DOMAIN, users, "INVITE", sock, GATE_ADDR, caller="sip:scanner@spam.example", timeout_s=0.2)
    finally:
        sock.close()


def _attack_spit_known_targets(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "40"))
    scenario, store = _spit_scenario()
    plan = _plan(scenario, store, engine.Fixed("sip:informed@spam.example"), _target_rows(calls), 20.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_whitelist_import(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "30"))
    attacker = "sip:mole@spam.example"
    victim_list: set[str] = set()
    try:
        victim_list = attacks.import_whitelist(lab.endpoint.lists, attacker, f"sip:{ASSIGNED_USERS[0]}@{DOMAIN}")
    except dfs.NotPermitted:
        pass
    identity = sorted(victim_list)[0] if victim_list else attacker
    scenario, store = _spit_scenario()
    uri = sipmsg.SipUri.parse(identity)
    caller = engine.Rows(((uri.user, uri.user),)) if uri.host == DOMAIN else engine.Fixed(identity)
    plan = _plan(scenario, store, caller, _target_rows(calls), 10.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_ringtone(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "20"))
    scenario, store = attacks.ringtone_spit_scenario("http://spam.example/jingle.wav")
    plan = _plan(scenario, store, engine.Fixed("sip:ring@spam.example"), _target_rows(calls), 10.0, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


def _attack_honest(lab: Lab, params: dict) -> None:
    calls = int(params.get("calls", "20"))
    db = _shipped_db()
    device = db.devices[0]
    scenario, store = _spit_scenario(hold_ms=20000)
    honest_scenario, honest_store = attacks.spoof_device(
        scenario, store, device.fingerprints["INVITE"], attacks.BehaviorProfile.from_device(device)
    )
    targets = engine.Rows(tuple((ASSIGNED_USERS[i % 5],) for i in range(calls)))
    plan = _plan(honest_scenario, honest_store, engine.Fixed(HONEST_IDENTITY), targets, 0.5, calls)
    lab.drive([lab.engine_run(plan, ATTACKER_ADDR)])


ATTACKS = {
    "bulk_spit": _attack_bulk_spit,
    "known_identity_spit": _attack_known_identity,
    "identity_switch_spit": _attack_identity_switch,
    "device_spoof_spit": _attack_device_spoof,
    "greylist_retry": _attack_greylist_retry,
    "captcha_relay": _attack_captcha_relay,
    "rate_adapted_spit": _attack_rate_adapted,
    "paid_impersonation": _attack_paid_impersonation,
    "reputation_push": _attack_reputation_push,
    "scan": _attack_scan,
    "spit_known_targets": _attack_spit_known_targets,
    "whitelist_import_spit": _attack_whitelist_import,
    "ringtone": _attack_ringtone,
    "honest": _attack_honest,
}


# -- experiment execution ---------------------------------------------------------------------


def run_experiment(exp: Experiment) -> EvalReport:
    """Deterministic given the seed; the report aggregates all repetitions."""
    if exp.attack not in ATTACKS:
        raise HarnessError(f"unknown attack {exp.attack!r}")
    if exp.defense not in DEFENSES:
        raise HarnessError(f"unknown defense {exp.defense!r}")
    report = EvalReport(name=exp.name, attack=exp.attack, defense=exp.defense)
    started = time.monotonic()
    for rep in range(max(exp.repetitions, 1)):
        seed = exp.seed * 1000 + rep
        config = DEFENSES[exp.defense](dict(exp.defense_params))
        lab = Lab(config, seed)
        try:
            ATTACKS[exp.attack](lab, dict(exp.attack_params))
        except Exception as exc:  # partial report, flagged
            report.incomplete = True
            report.error = f"{type(exc).__name__}: {exc}"
        counts = lab.endpoint.outcome_counts()
        report.forwarded += counts.get(ep.OUTCOME_FORWARDED, 0)
        report.rejected += counts.get(ep.OUTCOME_REJECTED, 0)
        report.challenged += counts.get(ep.OUTCOME_CHALLENGED, 0)
        report.quarantined += counts.get(ep.OUTCOME_QUARANTINED, 0)
        report.no_such_user += counts.get(ep.OUTCOME_NO_SUCH_USER, 0)
    report.attempted = report.forwarded + report.rejected + report.challenged + report.quarantined
    if exp.attack == "honest":
        report.false_positive_rate = round(1.0 - report.bypass_rate, 6) if report.attempted else 0.0
    report.runtime_s = time.monotonic() - started
    return report


DEFAULT_MATRIX_ATTACKS = [
    "bulk_spit",
    "known_identity_spit",
    "identity_switch_spit",
    "device_spoof_spit",
    "greylist_retry",
    "captcha_relay",
    "rate_adapted_spit",
    "paid_impersonation",
    "reputation_push",
    "scan",
    "spit_known_targets",
    "whitelist_import_spit",
    "honest",
]

DEFAULT_MATRIX_DEFENSES = [
    "none",
    "passive_fp",
    "active_fp",
    "blacklist",
    "greylist",
    "whitelist",
    "reputation",
    "turing",
    "puzzle",
    "payment",
    "ids",
    "honeypot",
]

# The qualitative table the shipped matrix must reproduce: every defense falls
# to at least one attack, and the naive attacks are caught by their counters.
EXPECTED_BYPASSES = {
    "none": "bulk_spit",
    "passive_fp": "device_spoof_spit",
    "active_fp": "device_spoof_spit",
    "blacklist": "identity_switch_spit",
    "greylist": "greylist_retry",
    "whitelist": "whitelist_import_spit",
    "reputation": "reputation_push",
    "turing": "captcha_relay",
    "puzzle": "captcha_relay",
    "payment": "paid_impersonation",
    "ids": "rate_adapted_spit",
    "honeypot": "spit_known_targets",
}

EXPECTED_DETECTIONS = [
    ("scan", "honeypot"),
    ("bulk_spit", "ids"),
    ("known_identity_spit", "blacklist"),
]


def baseline_matrix(
    attack_names: list[str] | None = None,
    defense_names: list[str] | None = None,
    seed: int = 0,
) -> dict[tuple[str, str], EvalReport]:
    """Full attack x defense cross product."""
    attack_names = attack_names or DEFAULT_MATRIX_ATTACKS
    defense_names = defense_names or DEFAULT_MATRIX_DEFENSES
    if not attack_names or not defense_names:
        raise HarnessError("matrix needs non-empty attack and defense lists")
    out: dict[tuple[str, str], EvalReport] = {}
    for defense in defense_names:
        for attack in attack_names:
            exp = Experiment(name=f"{attack}__vs__{defense}", attack=attack, defense=defense, seed=seed)
            out[(attack, defense)] = run_experiment(exp)
    return out


def matrix_satisfies_qualitative_table(matrix: dict[tuple[str, str], EvalReport]) -> list[str]:
    """Empty list when the shipped expectations hold; else the violations."""
    problems = []
    for defense, attack in EXPECTED_BYPASSES.items():
        report = matrix.get((attack, defense))
        if report is None:
            problems.append(f"missing cell {attack} vs {defense}")
        elif report.bypass_rate < 0.95:
            problems.append(f"{attack} vs {defense}: bypass {report.bypass_rate:.3f} < 0.95")
    for attack, defense in EXPECTED_DETECTIONS:
        report = matrix.get((attack, defense))
        if report is None:
            problems.append(f"missing cell {attack} vs {defense}")
        elif report.detection_rate < 0.95:
            problems.append(f"{attack} vs {defense}: detection {report.detection_rate:.3f} < 0.95")
    return problems


# -- report output ------------------------------------------------------------------------------


def write_matrix(matrix: dict[tuple[str, str], EvalReport], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = {f"{a}__vs__{d}": r.to_json_dict() for (a, d), r in sorted(matrix.items())}
    (out_dir / "matrix.json").write_text(json.dumps(cells, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    attacks_seen = sorted({a for a, _ in matrix})
    defenses_seen = sorted({d for _, d in matrix})
    lines = ["defense," + ",".join(attacks_seen)]
    for d in defenses_seen:
        row = [d]
        for a in attacks_seen:
            r = matrix.get((a, d))
            row.append(f"{r.bypass_rate:.3f}" if r else "")
        lines.append(",".join(row))
    (out_dir / "matrix.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_matrix_xml(text: str) -> tuple[list[str], list[str]]:
    """experiments.xml: <matrix><attack name=.../><defense name=.../></matrix>"""
    root = ET.fromstring(text)
    attack_names = [a.get("name", "") for a in root.findall("attack")]
    defense_names = [d.get("name", "") for d in root.findall("defense")]
    return attack_names, defense_names


def render_matrix_table(matrix: dict[tuple[str, str], EvalReport]) -> str:
    attacks_seen = sorted({a for a, _ in matrix})
    defenses_seen = sorted({d for _, d in matrix})
    width = max(len(a) for a in attacks_seen + defenses_seen) + 2
    out = ["bypass rate (forwarded/attempted)", ""]
    header = " " * width + "".join(a[: width - 1].ljust(width) for a in attacks_seen)
    out.append(header)
    for d in defenses_seen:
        row = d.ljust(width)
        for a in attacks_seen:
            r = matrix.get((a, d))
            row += (f"{r.bypass_rate:.2f}" if r else "-").ljust(width)
        out.append(row)
    return "\n".join(out)
