"""Intrusion detection: trace-variable extraction, CPT class inference, account
profiling with distance functions, and the honeypot URI space."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sipmsg

LIKELIHOOD_FLOOR = 1e-6  # keeps hard 0/1 likelihood rows from zeroing posteriors

DEFAULT_WINDOW_S = 60.0
DEFAULT_SECTION_S = 3600.0


class IdsError(Exception):
    pass


class UnbinnableValue(IdsError):
    def __init__(self, variable: str, value: float):
        super().__init__(f"{variable}={value} falls outside every bin")
        self.variable = variable
        self.value = value


class DimensionMismatch(IdsError):
    pass


class SingularCovariance(IdsError):
    pass


class ZeroMassHistogram(IdsError):
    pass


class NoBaseline(IdsError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    """One observed wire event: a message or an unparseable datagram."""

    t: float
    direction: str  # "in" | "out"
    msg: sipmsg.SipMessage | None = None
    parse_error: bool = False


@dataclass(frozen=True)
class TraceWindow:
    duration_s: float
    request_intensity: float  # requests/min
    error_response_intensity: float  # responses >= 400, per min
    parsing_error_intensity: float  # per min
    distinct_destinations: int
    max_waiting_dialogs: int
    opened_rtp_ports: int  # media is out of scope; kept for schema fidelity, always 0
    request_distribution: dict[str, int]
    response_distribution: dict[str, int]

    def feature(self, name: str) -> float:
        """Scalar view used by CPT variables; histogram fields expose derived shares."""
        if hasattr(self, name) and name not in ("request_distribution", "response_distribution"):
            return float(getattr(self, name))
        if name == "invite_share":
            total = sum(self.request_distribution.values())
            return self.request_distribution.get("INVITE", 0) / total if total else 0.0
        if name == "success_response_share":
            total = sum(self.response_distribution.values())
            return self.response_distribution.get("2xx", 0) / total if total else 0.0
        raise IdsError(f"unknown trace feature {name!r}")


def extract_window(events: list[TraceEvent], duration_s: float = DEFAULT_WINDOW_S) -> TraceWindow:
    """Compute all trace variables over time-sorted events.

    Destinations come from the To header of requests, falling back to the
    request URI. Waiting dialogs are INVITEs without a final response yet,
    tracked as a running maximum.
    """
    minutes = duration_s / 60.0 if duration_s > 0 else 1.0
    requests = 0
    error_responses = 0
    parse_errors = 0
    destinations: set[str] = set()
    request_dist: Counter[str] = Counter()
    response_dist: Counter[str] = Counter()
    open_dialogs: set[str] = set()
    closed_dialogs: set[str] = set()
    max_waiting = 0
    for ev in events:
        if ev.parse_error:
            parse_errors += 1
            continue
        msg = ev.msg
        if msg is None:
            continue
        if msg.is_request:
            requests += 1
            request_dist[msg.method or ""] += 1
            dest = msg.to_uri or msg.uri
            if dest is not None:
                destinations.add(str(dest))
            if msg.method == "INVITE" and msg.call_id:
                if msg.call_id not in closed_dialogs:
                    open_dialogs.add(msg.call_id)
                    max_waiting = max(max_waiting, len(open_dialogs))
        else:
            response_dist[f"{msg.status // 100}xx"] += 1
            if msg.status >= 400:
                error_responses += 1
            if msg.status >= 200 and msg.call_id:
                open_dialogs.discard(msg.call_id)
                closed_dialogs.add(msg.call_id)
    return TraceWindow(
        duration_s=duration_s,
        request_intensity=requests / minutes,
        error_response_intensity=error_responses / minutes,
        parsing_error_intensity=parse_errors / minutes,
        distinct_destinations=len(destinations),
        max_waiting_dialogs=max_waiting,
        opened_rtp_ports=0,
        request_distribution=dict(request_dist),
        response_distribution=dict(response_dist),
    )


@dataclass(frozen=True)
class CptVariable:
    """One discretized variable: bin i covers [edges[i], edges[i+1])."""

    name: str
    edges: tuple[float, ...]  # ascending; last edge may be inf
    likelihood: dict[str, tuple[float, ...]]  # class -> per-bin likelihood

    @property
    def bin_count(self) -> int:
        return len(self.edges) - 1

    def bin_of(self, value: float) -> int:
        for i in range(self.bin_count):
            if self.edges[i] <= value < self.edges[i + 1]:
                return i
        raise UnbinnableValue(self.name, value)


@dataclass(frozen=True)
class CptModel:
    classes: tuple[str, ...]
    prior: dict[str, float]
    variables: tuple[CptVariable, ...]

    def validate(self) -> None:
        if abs(sum(self.prior.get(c, 0.0) for c in self.classes) - 1.0) > 1e-9:
            raise IdsError("class prior must sum to 1")
        for var in self.variables:
            if var.bin_count < 1:
                raise IdsError(f"{var.name}: needs at least one bin")
            for cls in self.classes:
                vec = var.likelihood.get(cls)
                if vec is None or len(vec) != var.bin_count:
                    raise IdsError(f"{var.name}: missing/ragged likelihood for {cls}")
                total = sum(vec)
                if not 0 < total <= var.bin_count + 1e-9:
                    raise IdsError(f"{var.name}/{cls}: likelihood sum {total} outside (0, bins]")

    def to_json_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "prior": dict(self.prior),
            "variables": [
                {
                    "name": v.name,
                    "edges": [None if math.isinf(e) else e for e in v.edges],
                    "likelihood": {c: list(vec) for c, vec in v.likelihood.items()},
                }
                for v in self.variables
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CptModel":
        variables = tuple(
            CptVariable(
                name=v["name"],
                edges=tuple(math.inf if e is None else float(e) for e in v["edges"]),
                likelihood={c: tuple(float(x) for x in vec) for c, vec in v["likelihood"].items()},
            )
            for v in doc["variables"]
        )
        model = cls(
            classes=tuple(doc["classes"]),
            prior={c: float(p) for c, p in doc["prior"].items()},
            variables=variables,
        )
        model.validate()
        return model

    @classmethod
    def load(cls, path: str | Path) -> "CptModel":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2), encoding="utf-8")


def infer(window: TraceWindow, model: CptModel) -> dict[str, float]:
    """Naive-Bayes posterior over attack classes.

    posterior(c) ∝ prior(c) · Π_v likelihood_c,v(bin(value_v)), with zero
    likelihoods floored at 1e-6 so degenerate 0/1 rows stay rankable.
    """
    weights: dict[str, float] = {}
    for cls in model.classes:
        w = model.prior[cls]
        for var in model.variables:
            bin_idx = var.bin_of(window.feature(var.name))
            w *= max(var.likelihood[cls][bin_idx], LIKELIHOOD_FLOOR)
        weights[cls] = w
    total = sum(weights.values())
    return {c: w / total for c, w in weights.items()}


def top_class(posterior: dict[str, float]) -> str:
    return max(sorted(posterior), key=lambda c: posterior[c])


# -- distances ---------------------------------------------------------------


def profile_distance(
    short: "np.ndarray | list[float]",
    long: "np.ndarray | list[float]",
    metric: str = "euclidean",
    covariance: "np.ndarray | None" = None,
) -> float:
    """euclidean | quadratic (squared euclidean) | mahalanobis(covariance)."""
    a = np.asarray(short, dtype=float)
    b = np.asarray(long, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    diff = a - b
    if metric == "euclidean":
        return float(np.sqrt(diff @ diff))
    if metric == "quadratic":
        return float(diff @ diff)
    if metric == "mahalanobis":
        if covariance is None:
            raise IdsError("mahalanobis needs a covariance matrix")
        cov = np.asarray(covariance, dtype=float)
        if cov.shape != (a.size, a.size):
            raise DimensionMismatch(f"covariance {cov.shape} vs vectors {a.shape}")
        try:
            eigvals = np.linalg.eigvalsh(cov)
            if eigvals.min() <= 0:
                raise SingularCovariance(f"min eigenvalue {eigvals.min()}")
            inv = np.linalg.inv(cov)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(str(exc)) from exc
        return float(np.sqrt(diff @ inv @ diff))
    raise IdsError(f"unknown metric {metric!r}")


def hellinger(p: dict[str, float], q: dict[str, float]) -> float:
    """Hellinger distance between histograms, normalized internally; in [0, 1]."""
    p_total = sum(p.values())
    q_total = sum(q.values())
    if p_total <= 0 or q_total <= 0:
        raise ZeroMassHistogram("histogram has no mass")
    keys = set(p) | set(q)
    acc = 0.0
    for k in keys:
        acc += (math.sqrt(p.get(k, 0.0) / p_total) - math.sqrt(q.get(k, 0.0) / q_total)) ** 2
    return min(math.sqrt(acc) / math.sqrt(2.0), 1.0)


# -- account profiles ---------------------------------------------------------


@dataclass
class SectionStats:
    calls: float = 0.0
    distinct_recipients: float = 0.0
    avg_duration_s: float = 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.calls, self.distinct_recipients, self.avg_duration_s)


@dataclass
class AccountProfile:
    account: str
    section_length_s: float
    long_term: list[SectionStats] | None  # one entry per section of the day
    short_term: list[SectionStats]
    long_callees: dict[str, float] = field(default_factory=dict)
    short_callees: dict[str, float] = field(default_factory=dict)

    def vectors(self) -> tuple[np.ndarray, np.ndarray]:
        if self.long_term is None:
            raise NoBaseline(self.account)
        short = np.array([x for s in self.short_term for x in s.as_tuple()])
        long = np.array([x for s in self.long_term for x in s.as_tuple()])
        return short, long


@dataclass(frozen=True)
class Detection:
    abnormal: bool
    evidence: str = ""
    warning: str = ""


def detect_account(
    profile: AccountProfile,
    distance_threshold: float = 50.0,
    hellinger_threshold: float = 0.5,
    metric: str = "euclidean",
) -> Detection:
    """Abnormal when the short-term profile drifts from the long-term baseline."""
    if profile.long_term is None:
        return Detection(abnormal=False, warning="no baseline: account has no completed learning day")
    short, long = profile.vectors()
    d = profile_distance(short, long, metric=metric)
    if d > distance_threshold:
        return Detection(abnormal=True, evidence=f"profile distance {d:.2f} > {distance_threshold}")
    if profile.short_callees and profile.long_callees:
        h = hellinger(profile.short_callees, profile.long_callees)
        if h > hellinger_threshold:
            return Detection(abnormal=True, evidence=f"callee distribution shift {h:.3f} > {hellinger_threshold}")
    return Detection(abnormal=False)


class AccountProfiler:
    """Builds per-section daily statistics from recorded calls.

    Days are divided into fixed-length sections; the learning phase yields a
    long-term profile of daily averages per section, the detection day a
    short-term one.
    """

    def __init__(self, section_length_s: float = DEFAULT_SECTION_S, day_s: float = 86400.0):
        self.section_length_s = section_length_s
        self.day_s = day_s
        self.sections_per_day = int(round(day_s / section_length_s))
        # account -> list of (t, callee, duration_s)
        self._calls: dict[str, list[tuple[float, str, float]]] = defaultdict(list)

    def record_call(self, account: str, t: float, callee: str, duration_s: float) -> None:
        self._calls[account].append((t, callee, duration_s))

    def _day_sections(self, calls: list[tuple[float, str, float]], day: int) -> list[SectionStats]:
        stats = [SectionStats() for _ in range(self.sections_per_day)]
        per_section: dict[int, list[tuple[str, float]]] = defaultdict(list)
        lo, hi = day * self.day_s, (day + 1) * self.day_s
        for t, callee, dur in calls:
            if lo <= t < hi:
                sec = int((t - lo) / self.section_length_s)
                per_section[min(sec, self.sections_per_day - 1)].append((callee, dur))
        for sec, items in per_section.items():
            stats[sec] = SectionStats(
                calls=len(items),
                distinct_recipients=len({c for c, _ in items}),
                avg_duration_s=sum(d for _, d in items) / len(items),
            )
        return stats

    def profile(self, account: str, learning_days: int, detection_day: int) -> AccountProfile:
        calls = self._calls.get(account, [])
        long_term: list[SectionStats] | None = None
        long_callees: Counter[str] = Counter()
        if learning_days >= 1:
            acc = [SectionStats() for _ in range(self.sections_per_day)]
            for day in range(learning_days):
                for i, s in enumerate(self._day_sections(calls, day)):
                    acc[i].calls += s.calls / learning_days
                    acc[i].distinct_recipients += s.distinct_recipients / learning_days
                    acc[i].avg_duration_s += s.avg_duration_s / learning_days
            long_term = acc
            lo, hi = 0.0, learning_days * self.day_s
            long_callees.update(c for t, c, _ in calls if lo <= t < hi)
        short_term = self._day_sections(calls, detection_day)
        lo, hi = detection_day * self.day_s, (detection_day + 1) * self.day_s
        short_callees = Counter(c for t, c, _ in calls if lo <= t < hi)
        return AccountProfile(
            account=account,
            section_length_s=self.section_length_s,
            long_term=long_term,
            short_term=short_term,
            long_callees=dict(long_callees),
            short_callees=dict(short_callees),
        )


# -- honeypot -----------------------------------------------------------------


@dataclass(frozen=True)
class HoneypotRecord:
    t: float
    source_uri: str
    source_addr: str
    method: str
    target_uri: str


class UriSpace:
    """Assigned identities vs the trap space; anything unassigned routes to the trap."""

    def __init__(self, assigned: set[str], honeypot: set[str] | None = None):
        self.assigned = set(assigned)
        self.honeypot = set(honeypot or ())
        overlap = self.assigned & self.honeypot
        if overlap:
            raise IdsError(f"assigned/honeypot overlap: {sorted(overlap)[:3]}")

    def route(self, user: str) -> str:
        return "normal" if user in self.assigned else "honeypot"


def honeypot_route(request_uri: sipmsg.SipUri, space: UriSpace) -> str:
    """"normal" for assigned targets, "honeypot" otherwise."""
    return space.route(request_uri.user)


class HoneypotLog:
    def __init__(self):
        self.records: list[HoneypotRecord] = []

    def record(self, t: float, source_uri: str, source_addr: str, method: str, target_uri: str) -> None:
        self.records.append(HoneypotRecord(t, source_uri, source_addr, method, target_uri))

    def sources(self) -> set[str]:
        return {r.source_uri for r in self.records}

    def to_csv(self) -> str:
        lines = ["timestamp,source_uri,source_addr,method,target_uri"]
        for r in self.records:
            lines.append(f"{r.t:.6f},{r.source_uri},{r.source_addr},{r.method},{r.target_uri}")
        return "\n".join(lines) + "\n"
