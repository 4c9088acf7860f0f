"""Shoot mode: run scenario lists at configured call rates, collect exit codes and logs.

Exit codes per entry: 0 all calls successful, 1 at least one call failed,
97 stop command or global timeout, 99 no calls processed, -1 fatal error.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from . import scenario as sc
from . import sipmsg
from .transport import Addr, BindFailure, Clock, LoopbackNet, RealClock, UdpSocket

SCHEDULER_TICK_S = 0.010  # documented upper bound on start-time jitter
DEFAULT_GLOBAL_TIMEOUT_S = 300.0

EXIT_OK = 0
EXIT_FAILED_CALLS = 1
EXIT_STOPPED = 97
EXIT_NO_CALLS = 99
EXIT_FATAL = -1

# Worst-first severity for the CLI exit status.
EXIT_SEVERITY = [EXIT_FATAL, EXIT_NO_CALLS, EXIT_STOPPED, EXIT_FAILED_CALLS, EXIT_OK]


class PlanInvalid(Exception):
    pass


@dataclass(frozen=True)
class Fixed:
    value: str


@dataclass(frozen=True)
class CsvFile:
    path: str


@dataclass(frozen=True)
class Rows:
    """In-memory injection rows, used by attack builders."""

    rows: tuple[tuple[str, ...], ...]


Source = Fixed | CsvFile | Rows | None


@dataclass(frozen=True)
class ShootEntry:
    scenario: sc.Scenario
    rate: float  # call starts per second
    max_calls: int

    def __post_init__(self):
        if self.rate <= 0:
            raise PlanInvalid("call rate must be > 0")
        if self.max_calls < 1:
            raise PlanInvalid("max_calls must be >= 1")


@dataclass
class ShootPlan:
    entries: list[ShootEntry]
    remote: Addr
    local: Addr
    templates: sc.TemplateStore
    caller_source: Source = None
    target_source: Source = None
    domain: str = ""
    base_dir: Path | None = None  # resolves CsvFile paths

    def __post_init__(self):
        if not self.entries:
            raise PlanInvalid("plan has no entries")
        for addr in (self.remote, self.local):
            if not 1 <= addr[1] <= 65535:
                raise PlanInvalid(f"bad port in {addr}")


@dataclass
class EntryResult:
    scenario: str
    exit_code: int
    attempted: int
    succeeded: int
    log: str
    call_starts: list[float] = field(default_factory=list)


@dataclass
class RunResult:
    entries: list[EntryResult]

    def worst_exit(self) -> int:
        codes = {e.exit_code for e in self.entries}
        for code in EXIT_SEVERITY:
            if code in codes:
                return code
        return EXIT_OK

    def to_json_dict(self, log_paths: list[str] | None = None) -> dict:
        return {
            "entries": [
                {
                    "scenario": e.scenario,
                    "exit_code": e.exit_code,
                    "attempted": e.attempted,
                    "succeeded": e.succeeded,
                    "log_path": (log_paths[i] if log_paths else ""),
                }
                for i, e in enumerate(self.entries)
            ],
            "success_rate": success_rate(self),
        }


def success_rate(result: RunResult) -> int:
    """Percent of entries that exited 0, rounded half-up; an empty run is 0, not 100."""
    total = len(result.entries)
    if total == 0:
        return 0
    zeros = sum(1 for e in result.entries if e.exit_code == EXIT_OK)
    return (200 * zeros + total) // (2 * total)


def campaign_duration(targets: int, rate_per_hour: float | Fraction) -> Fraction:
    """Hours needed to reach `targets` victims at `rate_per_hour` calls/hour."""
    if rate_per_hour <= 0:
        raise ValueError("rate must be > 0")
    return Fraction(targets) / Fraction(rate_per_hour)


class _Call:
    __slots__ = (
        "call_id",
        "steps",
        "index",
        "bindings",
        "peer",
        "inbox",
        "wake_at",
        "waiting",
        "cseq",
        "outcome",
        "uas",
    )

    def __init__(self, call_id: str, steps: tuple[sc.Step, ...], bindings: dict[str, str], peer: Addr):
        self.call_id = call_id
        self.steps = steps
        self.index = 0
        self.bindings = bindings
        self.peer = peer
        self.inbox: deque[sipmsg.SipMessage] = deque()
        self.wake_at: float | None = None
        self.waiting: sc.Recv | sc.Pause | None = None
        self.cseq = 1
        self.outcome: str | None = None  # "success" | "aborted"
        self.uas = False


class EngineRun:
    """One plan execution, advanced by step(); drive it yourself or via execute()."""

    def __init__(
        self,
        plan: ShootPlan,
        sock,
        clock: Clock,
        stop_check=None,
        global_timeout_s: float = DEFAULT_GLOBAL_TIMEOUT_S,
        run_id: str = "run",
        start_at: float = 0.0,
    ):
        self.plan = plan
        self.sock = sock
        self.clock = clock
        self.stop_check = stop_check or (lambda: False)
        self._stop_requested = False
        self.deadline = clock.now() + global_timeout_s
        self.start_at = max(start_at, clock.now())
        self.run_id = run_id
        self.results: list[EntryResult] = []
        self.done = False
        self._entry_index = -1
        self._fatal: str | None = None
        self._stopped = False
        self._calls: dict[str, _Call] = {}
        self._log: list[str] = []
        self._starts: list[float] = []
        self._started = 0
        self._finished = 0
        self._succeeded = 0
        self._entry_base = 0.0
        self._caller_table: sc.InjectionTable | None = None
        self._target_table: sc.InjectionTable | None = None
        try:
            self._caller_table = _resolve_table(plan.caller_source, plan.base_dir)
            self._target_table = _resolve_table(plan.target_source, plan.base_dir)
        except (OSError, sc.ScenarioError) as exc:
            self._fatal = f"input table: {exc}"
        self._next_entry()

    def request_stop(self) -> None:
        self._stop_requested = True

    # -- entry lifecycle -------------------------------------------------

    def _current_entry(self) -> ShootEntry | None:
        if 0 <= self._entry_index < len(self.plan.entries):
            return self.plan.entries[self._entry_index]
        return None

    def _next_entry(self) -> None:
        if self._entry_index >= 0:
            self._finish_entry()
        self._entry_index += 1
        if self._entry_index >= len(self.plan.entries):
            self.done = True
            return
        self._calls.clear()
        self._log = []
        self._starts = []
        self._started = 0
        self._finished = 0
        self._succeeded = 0
        self._entry_base = self.clock.now()
        if self._fatal is None:
            entry = self.plan.entries[self._entry_index]
            try:
                entry.scenario.validate()
                for step in entry.scenario.steps:
                    if isinstance(step, sc.Send):
                        self.plan.templates.get(step.template, entry.scenario.set_name)
            except sc.ScenarioError as exc:
                self._fatal = f"entry setup: {exc}"

    def _finish_entry(self) -> None:
        entry = self.plan.entries[self._entry_index]
        if self._fatal is not None:
            code = EXIT_FATAL
        elif self._started == 0:
            code = EXIT_NO_CALLS
        elif self._stopped:
            code = EXIT_STOPPED
        elif self._finished > self._succeeded:
            code = EXIT_FAILED_CALLS
        else:
            code = EXIT_OK
        self.results.append(
            EntryResult(
                scenario=entry.scenario.name,
                exit_code=code,
                attempted=self._started,
                succeeded=self._succeeded,
                log="\n".join(self._log),
                call_starts=list(self._starts),
            )
        )

    # -- inbound ----------------------------------------------------------

    def on_datagram(self, data: bytes, src: Addr) -> None:
        now = self.clock.now()
        try:
            msg = sipmsg.parse(data)
        except sipmsg.SipError as exc:
            self._log.append(f"{now:.6f} recv-error {type(exc).__name__} -")
            return
        call_id = msg.call_id or ""
        call = self._calls.get(call_id)
        entry = self._current_entry()
        if call is None and entry is not None and entry.scenario.starts_as_receiver:
            if msg.is_request and self._started < entry.max_calls and self._fatal is None:
                call = self._spawn_uas_call(entry, call_id or f"{self.run_id}-anon-{self._started}", src)
        if call is None or call.outcome is not None:
            self._log.append(f"{now:.6f} recv-stray {msg.start_line} {call_id}")
            return
        self._log.append(f"{now:.6f} recv {msg.start_line} {call_id}")
        if msg.header("X-Challenge-Id") is not None:
            call.bindings["challenge_id"] = msg.header("X-Challenge-Id") or ""
            call.bindings["challenge_body"] = msg.body.decode("utf-8", errors="replace")
        call.inbox.append(msg)

    def _spawn_uas_call(self, entry: ShootEntry, call_id: str, src: Addr) -> _Call:
        bindings = self._static_bindings(self.plan.remote)
        bindings["call_id"] = call_id
        call = _Call(call_id, entry.scenario.steps, bindings, src)
        call.uas = True
        self._calls[call_id] = call
        self._started += 1
        self._starts.append(self.clock.now())
        return call

    # -- stepping ---------------------------------------------------------

    def step(self) -> bool:
        """Advance everything that can advance now; True if anything moved."""
        if self.done:
            return False
        now = self.clock.now()
        if now < self.start_at:
            return False
        if self._entry_base < self.start_at:
            self._entry_base = self.start_at
        if not self._stopped and (self._stop_requested or self.stop_check() or now >= self.deadline):
            self._stopped = True
            for call in self._calls.values():
                if call.outcome is None:
                    call.outcome = "aborted"
            self._log.append(f"{now:.6f} stop - -")
        progressed = False
        entry = self._current_entry()
        if entry is None:
            self.done = True
            return False
        if self._fatal is not None or self._stopped:
            # Current entry finishes as -1 or 97; entries that never started
            # finish as 99 on later passes.
            self._next_entry()
            return True
        if not entry.scenario.starts_as_receiver:
            if self._zero_targets(entry):
                self._next_entry()
                return True
            while self._started < entry.max_calls and now >= self._due_start(entry):
                self._start_call(entry)
                progressed = True
        for call in list(self._calls.values()):
            if call.outcome is None:
                progressed |= self._advance_call(call, now)
        if self._entry_complete(entry):
            self._next_entry()
            progressed = True
        return progressed

    def _due_start(self, entry: ShootEntry) -> float:
        return self._entry_base + self._started / entry.rate

    def _entry_complete(self, entry: ShootEntry) -> bool:
        return self._started >= entry.max_calls and not self._calls

    def _zero_targets(self, entry: ShootEntry) -> bool:
        return isinstance(self.plan.target_source, (CsvFile, Rows)) and (
            self._target_table is not None and len(self._target_table) == 0
        )

    def _start_call(self, entry: ShootEntry) -> None:
        index = self._started
        call_id = f"{self.run_id}-e{self._entry_index}-c{index}"
        dest = self.plan.remote
        bindings = self._static_bindings(dest)
        if self._caller_table is not None and len(self._caller_table) > 0:
            bindings.update(self._caller_table.next_bindings())
            row_user = bindings.get("field1") or bindings.get("field0", "")
            bindings["caller_user"] = row_user
        if self._target_table is not None and len(self._target_table) > 0:
            row = self._target_table.next_bindings()
            bindings["target_user"] = row.get("field0", "")
            host = row.get("field1", "")
            if host:
                dest = _parse_hostport(host, self.plan.remote[1])
                bindings["target_host"] = host
        bindings["remote_ip"], bindings["remote_port"] = dest[0], str(dest[1])
        bindings["call_id"] = call_id
        call = _Call(call_id, entry.scenario.steps, bindings, dest)
        self._calls[call_id] = call
        self._started += 1
        self._starts.append(self.clock.now())

    def _static_bindings(self, dest: Addr) -> dict[str, str]:
        plan = self.plan
        b = {
            "local_ip": plan.local[0],
            "local_port": str(plan.local[1]),
            "remote_ip": dest[0],
            "remote_port": str(dest[1]),
            "domain": plan.domain or plan.remote[0],
            "target_user": "",
            "target_host": "",
            "field0": "Anonymous",
            "field1": "anonymous",
            "caller_user": "anonymous",
        }
        if isinstance(plan.caller_source, Fixed):
            uri = sipmsg.SipUri.parse(plan.caller_source.value)
            b.update(
                {"field0": uri.user, "field1": uri.user, "caller_user": uri.user, "caller_domain": uri.host}
            )
        if isinstance(plan.target_source, Fixed):
            b["target_user"] = plan.target_source.value
        return b

    def _advance_call(self, call: _Call, now: float) -> bool:
        progressed = False
        while call.outcome is None:
            if call.index >= len(call.steps):
                call.outcome = "success"
                break
            step = call.steps[call.index]
            if isinstance(step, sc.Label):
                call.index += 1
                progressed = True
            elif isinstance(step, sc.Send):
                if not self._do_send(call, step, now):
                    break
                progressed = True
            elif isinstance(step, sc.Pause):
                if call.wake_at is None:
                    call.wake_at = now + step.ms / 1000.0
                if now < call.wake_at:
                    break
                call.wake_at = None
                call.index += 1
                progressed = True
            elif isinstance(step, sc.Recv):
                moved = self._do_recv(call, step, now)
                progressed |= moved
                if not moved:
                    break
            elif isinstance(step, sc.Stop):
                call.outcome = step.intent
                progressed = True
            else:  # pragma: no cover
                raise AssertionError(step)
        if call.outcome is not None:
            self._on_call_done(call)
        return progressed

    def _on_call_done(self, call: _Call) -> None:
        if call.call_id in self._calls:
            del self._calls[call.call_id]
            self._finished += 1
            if call.outcome == "success":
                self._succeeded += 1

    def _do_send(self, call: _Call, step: sc.Send, now: float) -> bool:
        entry = self._current_entry()
        assert entry is not None
        bindings = dict(call.bindings)
        bindings["cseq"] = str(call.cseq)
        try:
            template = self.plan.templates.get(step.template, entry.scenario.set_name)
            text = sc.expand_text(template, bindings)
            msg = sipmsg.parse(_to_wire_text(text).encode("utf-8"))
            dest = call.peer
            if step.to:
                dest = _parse_hostport(sc.PLACEHOLDER_RE.sub(lambda m: bindings.get(m.group(1), ""), step.to), call.peer[1])
            self.sock.send(sipmsg.serialize(msg), dest)
        except (sc.ScenarioError, sipmsg.SipError, OSError) as exc:
            self._log.append(f"{now:.6f} send-error {type(exc).__name__} {call.call_id}")
            call.outcome = "aborted"
            return False
        self._log.append(f"{now:.6f} send {msg.start_line} {call.call_id}")
        call.cseq += 1
        call.index += 1
        return True

    def _do_recv(self, call: _Call, step: sc.Recv, now: float) -> bool:
        for i, msg in enumerate(call.inbox):
            if step.matches(msg):
                del call.inbox[i]
                call.wake_at = None
                self._bind_received(call, msg)
                if step.jump is not None:
                    call.index = _label_index(call.steps, step.jump)
                else:
                    call.index += 1
                return True
        if call.wake_at is None:
            call.wake_at = now + step.timeout_ms / 1000.0
            return False
        if now >= call.wake_at:
            call.wake_at = None
            if step.jump is None:
                call.outcome = "aborted"
            else:
                # Timed-out branch probe: fall through to the next step.
                call.index += 1
            return True
        return False

    def _bind_received(self, call: _Call, msg: sipmsg.SipMessage) -> None:
        b = call.bindings
        b["recv_from"] = msg.header("From") or ""
        b["recv_to"] = msg.header("To") or ""
        b["recv_via"] = msg.header("Via") or ""
        b["recv_cseq"] = msg.header("CSeq") or ""
        b["recv_method"] = msg.method or ""
        for key, raw in (("recv_from_uri", b["recv_from"]), ("recv_to_uri", b["recv_to"])):
            try:
                b[key] = str(sipmsg.SipUri.parse(raw)) if raw else ""
            except sipmsg.DomainError:
                b[key] = ""
        if call.uas and msg.is_request and msg.uri is not None:
            b["target_user"] = msg.uri.user

    def next_due(self) -> float:
        """Earliest instant something is scheduled to happen."""
        if self.clock.now() < self.start_at:
            return self.start_at
        due = self.deadline
        entry = self._current_entry()
        if entry is not None and not entry.scenario.starts_as_receiver and self._started < entry.max_calls:
            due = min(due, self._due_start(entry))
        for call in self._calls.values():
            if call.wake_at is not None:
                due = min(due, call.wake_at)
        return due

    def pump(self) -> bool:
        """Drain the socket and step until quiescent; True if anything happened."""
        progressed = False
        while True:
            moved = False
            while True:
                item = self.sock.receive(0.0)
                if item is None:
                    break
                self.on_datagram(*item)
                moved = True
            moved |= self.step()
            if not moved:
                return progressed
            progressed = True


def _label_index(steps: tuple[sc.Step, ...], label: str) -> int:
    for i, step in enumerate(steps):
        if isinstance(step, sc.Label) and step.name == label:
            return i
    raise sc.DanglingJump(label)


def _parse_hostport(text: str, default_port: int) -> Addr:
    text = text.strip()
    if ":" in text:
        host, port = text.rsplit(":", 1)
        return (host, int(port))
    return (text, default_port)


def _to_wire_text(text: str) -> str:
    # Template files are edited with plain newlines; the wire wants CRLF.
    text = text.replace("\r\n", "\n")
    if "\n\n" not in text:
        text = text.rstrip("\n") + "\n\n"
    return text.replace("\n", "\r\n")


def _resolve_table(source: Source, base_dir: Path | None) -> sc.InjectionTable | None:
    if isinstance(source, CsvFile):
        path = Path(source.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return sc.InjectionTable.from_file(path)
    if isinstance(source, Rows):
        return sc.InjectionTable([tuple(r) for r in source.rows])
    return None


def execute(
    plan: ShootPlan,
    transport: str = "loopback",
    net: LoopbackNet | None = None,
    clock: Clock | None = None,
    stop_check=None,
    global_timeout_s: float = DEFAULT_GLOBAL_TIMEOUT_S,
    run_id: str = "run",
) -> RunResult:
    """Run a plan to completion on its own event loop.

    Loopback mode needs the shared LoopbackNet the defense endpoint is attached
    to; UDP mode binds plan.local on the host stack.
    """
    if transport == "udp":
        sock = UdpSocket(plan.local)
        clock = clock or RealClock()
        own_net = None
    elif transport == "loopback":
        if net is None:
            raise PlanInvalid("loopback transport needs a LoopbackNet")
        clock = net.clock if clock is None else clock
        sock = net.socket(plan.local)
        own_net = net
    else:
        raise PlanInvalid(f"unknown transport {transport!r}")
    run = EngineRun(
        plan, sock, clock, stop_check=stop_check, global_timeout_s=global_timeout_s, run_id=run_id
    )
    try:
        drive(run, net=own_net)
    finally:
        sock.close()
    return RunResult(entries=run.results)


def drive(run: EngineRun, net: LoopbackNet | None = None) -> None:
    """Event loop for one run; harness experiments drive several runs together instead."""
    clock = run.clock
    while not run.done:
        if run.pump():
            continue
        if run.done:
            break
        due = run.next_due()
        if net is not None:
            timer = net.next_timer_due()
            if timer is not None:
                due = min(due, timer)
        wait = max(due - clock.now(), 0.0)
        item = run.sock.receive(min(wait, SCHEDULER_TICK_S) if isinstance(clock, RealClock) else wait)
        if item is not None:
            run.on_datagram(*item)
        if net is not None:
            net.fire_due()
