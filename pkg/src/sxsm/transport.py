"""Transports: a deterministic in-process loopback network and a UDP adapter.

One SIP message per datagram. The loopback net delivers synchronously in FIFO
order with zero loss and carries a timer wheel so endpoints can delay actions;
with a virtual clock an entire experiment runs deterministically and instantly.
"""

from __future__ import annotations

import heapq
import socket as _socket
import time
from collections import deque
from typing import Callable, Protocol

Addr = tuple[str, int]


class BindFailure(Exception):
    pass


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep_until(self, t: float) -> None: ...


class RealClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep_until(self, t: float) -> None:
        delta = t - time.monotonic()
        if delta > 0:
            time.sleep(delta)


class VirtualClock:
    """Simulated time; sleeping jumps straight to the deadline."""

    def __init__(self, start: float = 0.0):
        self._t = start

    def now(self) -> float:
        return self._t

    def sleep_until(self, t: float) -> None:
        if t > self._t:
            self._t = t


class Node(Protocol):
    """Anything attachable to the loopback net that reacts to datagrams."""

    def on_datagram(self, data: bytes, src: Addr) -> None: ...


class NodeHandle:
    """What an attached node uses to talk back to the network."""

    def __init__(self, net: "LoopbackNet", addr: Addr):
        self._net = net
        self.addr = addr

    def now(self) -> float:
        return self._net.clock.now()

    def send(self, data: bytes, dst: Addr) -> None:
        self._net.send(data, self.addr, dst)

    def call_at(self, when: float, fn: Callable[[], None]) -> None:
        self._net.schedule(when, fn)


class LoopbackNet:
    def __init__(self, clock: Clock | None = None):
        self.clock: Clock = clock or VirtualClock()
        self._nodes: dict[Addr, Node] = {}
        self._timers: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self._delivering = False
        self._queue: deque[tuple[bytes, Addr, Addr]] = deque()

    def attach(self, addr: Addr, node: Node) -> NodeHandle:
        if addr in self._nodes:
            raise BindFailure(f"loopback address {addr} already in use")
        self._nodes[addr] = node
        return NodeHandle(self, addr)

    def detach(self, addr: Addr) -> None:
        self._nodes.pop(addr, None)

    def socket(self, addr: Addr) -> "LoopbackSocket":
        sock = LoopbackSocket(self, addr)
        self.attach(addr, sock)
        return sock

    def send(self, data: bytes, src: Addr, dst: Addr) -> None:
        # FIFO delivery even when a handler sends from inside its handler:
        # nested sends queue behind the message being delivered.
        self._queue.append((data, src, dst))
        if self._delivering:
            return
        self._delivering = True
        try:
            while self._queue:
                d, s, t = self._queue.popleft()
                node = self._nodes.get(t)
                if node is not None:
                    node.on_datagram(d, s)
                # Unknown destinations drop silently, like UDP.
        finally:
            self._delivering = False

    def schedule(self, when: float, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._timers, (when, self._seq, fn))

    def next_timer_due(self) -> float | None:
        return self._timers[0][0] if self._timers else None

    def fire_due(self) -> bool:
        """Run every timer due at the current instant; True if any fired."""
        fired = False
        now = self.clock.now()
        while self._timers and self._timers[0][0] <= now:
            _, _, fn = heapq.heappop(self._timers)
            fn()
            fired = True
        return fired


class LoopbackSocket:
    """Queue-style node: the owner drains the inbox itself."""

    def __init__(self, net: LoopbackNet, addr: Addr):
        self._net = net
        self.addr = addr
        self._inbox: deque[tuple[bytes, Addr]] = deque()

    def on_datagram(self, data: bytes, src: Addr) -> None:
        self._inbox.append((data, src))

    def send(self, data: bytes, dst: Addr) -> None:
        self._net.send(data, self.addr, dst)

    def receive(self, timeout: float = 0.0) -> tuple[bytes, Addr] | None:
        """Pop one datagram, letting net timers run while waiting up to timeout."""
        if self._inbox:
            return self._inbox.popleft()
        clock = self._net.clock
        deadline = clock.now() + timeout
        while True:
            self._net.fire_due()
            if self._inbox:
                return self._inbox.popleft()
            due = self._net.next_timer_due()
            target = deadline if due is None else min(due, deadline)
            if target <= clock.now():
                if clock.now() >= deadline:
                    return None
                continue
            clock.sleep_until(target)
            if self._net.fire_due() and self._inbox:
                return self._inbox.popleft()
            if clock.now() >= deadline and not self._inbox:
                return None

    def close(self) -> None:
        self._net.detach(self.addr)


class UdpSocket:
    """Same shape as LoopbackSocket over a real UDP socket."""

    MAX_DATAGRAM = 65535

    def __init__(self, local: Addr):
        self._sock = _socket.socket(_socket.AF_INET, _socket.SOCK_DGRAM)
        try:
            self._sock.bind(local)
        except OSError as exc:
            raise BindFailure(f"cannot bind {local}: {exc}") from exc
        self.addr = self._sock.getsockname()

    def send(self, data: bytes, dst: Addr) -> None:
        self._sock.sendto(data, dst)

    def receive(self, timeout: float = 0.0) -> tuple[bytes, Addr] | None:
        self._sock.settimeout(max(timeout, 0.0001))
        try:
            return self._sock.recvfrom(self.MAX_DATAGRAM)
        except TimeoutError:
            return None
        except OSError:
            return None

    def close(self) -> None:
        self._sock.close()
