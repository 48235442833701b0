"""Race one DNS query across the first k servers of a ranked upstream list.

The technique: send the same query to k upstreams at once with no
stagger, take the earliest well-formed answer with rcode 0, and keep
listening until the per-lookup deadline so that every byte the race
puts on the wire is charged to it, stragglers included.

Transport is abstracted behind a tiny exchange contract so the same
racing and accounting logic runs over real UDP sockets and over the
virtual-time simulator.
"""

from __future__ import annotations

import ipaddress
import json
import math
import random
import selectors
import socket
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .codec import DecodeError, QuerySpec, ResponseSummary, decode_response, encode_query

DEFAULT_DEADLINE_MS = 5000.0
DEFAULT_PROBE_COUNT = 5
DEFAULT_PROBE_TIMEOUT_MS = 2000.0

UNREACHABLE = math.inf


class ResolverError(Exception):
    """Raced-lookup setup or protocol failure."""


class AllServersUnreachable(ResolverError):
    """No server answered any probe."""


class AllSendsFailed(ResolverError):
    """Every send in a raced lookup failed; nothing was ever in flight."""


@dataclass(frozen=True)
class UpstreamServer:
    """One upstream recursive resolver endpoint."""

    address: str
    port: int = 53
    label: str = ""

    def __post_init__(self) -> None:
        parsed = ipaddress.ip_address(self.address)
        object.__setattr__(self, "address", str(parsed))
        if not 0 < self.port < 65536:
            raise ValueError(f"port must be in 1..65535, got {self.port}")

    @property
    def endpoint(self) -> tuple[str, int]:
        return (self.address, self.port)

    @property
    def family(self) -> int:
        return socket.AF_INET6 if ":" in self.address else socket.AF_INET

    def to_dict(self) -> dict:
        return {"address": self.address, "port": self.port, "label": self.label}

    @classmethod
    def from_dict(cls, entry: dict) -> UpstreamServer:
        return cls(
            address=entry["address"],
            port=int(entry.get("port", 53)),
            label=str(entry.get("label", "")),
        )


@dataclass(frozen=True)
class RankedServerList:
    """Upstreams ordered fastest-first by probe mean; +inf marks unreachable."""

    servers: tuple[UpstreamServer, ...]
    probe_mean_ms: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "servers", tuple(self.servers))
        if not self.servers:
            raise ValueError("server list must be nonempty")
        endpoints = [s.endpoint for s in self.servers]
        if len(set(endpoints)) != len(endpoints):
            raise ValueError("duplicate (address, port) endpoints in server list")
        if self.probe_mean_ms is not None:
            means = tuple(float(m) for m in self.probe_mean_ms)
            object.__setattr__(self, "probe_mean_ms", means)
            if len(means) != len(self.servers):
                raise ValueError("probe_mean_ms length must match servers")
            if any(m < 0 or math.isnan(m) for m in means):
                raise ValueError("probe means must be nonnegative")
            if any(a > b for a, b in zip(means, means[1:])):
                raise ValueError("probe means must be nondecreasing in list order")

    def __len__(self) -> int:
        return len(self.servers)

    @classmethod
    def unranked(cls, servers: Sequence[UpstreamServer]) -> RankedServerList:
        """Treat the given order as the ranking; no probe data attached."""
        return cls(tuple(servers), None)

    def to_dict(self) -> dict:
        rows = []
        for i, server in enumerate(self.servers):
            row = server.to_dict()
            if self.probe_mean_ms is not None:
                mean = self.probe_mean_ms[i]
                row["probe_mean_ms"] = None if math.isinf(mean) else mean
            rows.append(row)
        return {"servers": rows}

    @classmethod
    def from_dict(cls, data: dict) -> RankedServerList:
        rows = data["servers"]
        servers = tuple(UpstreamServer.from_dict(r) for r in rows)
        if any("probe_mean_ms" in r for r in rows):
            # null mean round-trips as the unreachable sentinel
            means = tuple(
                UNREACHABLE if r.get("probe_mean_ms") is None else float(r["probe_mean_ms"])
                for r in rows
            )
            return cls(servers, means)
        return cls(servers, None)


def load_servers(path: str | Path) -> RankedServerList:
    """Read a server file: either a plain JSON array of endpoints (file
    order is the ranking) or the ranked object written by save_servers."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list):
        return RankedServerList.unranked([UpstreamServer.from_dict(e) for e in data])
    if isinstance(data, dict) and "servers" in data:
        return RankedServerList.from_dict(data)
    raise ResolverError(f"{path}: expected a JSON array of servers or a ranked-list object")


def save_servers(ranked: RankedServerList, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ranked.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SendOutcome:
    server_index: int
    bytes_sent: int
    error: str | None = None


@dataclass(frozen=True)
class Arrival:
    """One datagram delivered within the listening window."""

    server_index: int
    datagram: bytes
    elapsed_ms: float


@dataclass(frozen=True)
class ExchangeOutcome:
    sends: tuple[SendOutcome, ...]
    arrivals: tuple[Arrival, ...]  # in delivery order; elapsed_ms nondecreasing


class Transport(Protocol):
    """Send one datagram to a set of servers and collect replies for a window.

    exchange() must deliver only datagrams that arrive at or before
    window_ms, in arrival order. If stop_early is given and returns True
    for an arrival, the transport may close the window at that point.
    """

    def exchange(
        self,
        servers: Sequence[UpstreamServer],
        datagram: bytes,
        window_ms: float,
        stop_early: Callable[[Arrival], bool] | None = None,
    ) -> ExchangeOutcome: ...

    def now_ms(self) -> float: ...


class UdpTransport:
    """Real-network transport: one connected UDP socket per contacted server.

    Connected sockets make the kernel enforce source-address matching,
    so an arrival's server_index is trustworthy.
    """

    def now_ms(self) -> float:
        return time.monotonic() * 1000.0

    def exchange(
        self,
        servers: Sequence[UpstreamServer],
        datagram: bytes,
        window_ms: float,
        stop_early: Callable[[Arrival], bool] | None = None,
    ) -> ExchangeOutcome:
        sends: list[SendOutcome] = []
        arrivals: list[Arrival] = []
        sel = selectors.DefaultSelector()
        socks: list[socket.socket] = []
        start = time.monotonic()
        try:
            for index, server in enumerate(servers):
                sock = None
                try:
                    sock = socket.socket(server.family, socket.SOCK_DGRAM)
                    sock.setblocking(False)
                    sock.connect(server.endpoint)
                    sent = sock.send(datagram)
                    socks.append(sock)
                    sel.register(sock, selectors.EVENT_READ, index)
                    sends.append(SendOutcome(index, sent))
                except OSError as exc:
                    if sock is not None:
                        sock.close()
                    sends.append(SendOutcome(index, 0, error=str(exc)))
            if not sel.get_map():
                return ExchangeOutcome(tuple(sends), ())
            stop = False
            while not stop:
                remaining_s = window_ms / 1000.0 - (time.monotonic() - start)
                if remaining_s <= 0:
                    break
                events = sel.select(remaining_s)
                if not events:
                    break
                for key, _ in events:
                    try:
                        data = key.fileobj.recv(65535)
                    except OSError:
                        # ICMP unreachable surfaced on the socket; stop polling it
                        sel.unregister(key.fileobj)
                        continue
                    elapsed = (time.monotonic() - start) * 1000.0
                    if elapsed > window_ms:
                        stop = True
                        break
                    arrival = Arrival(key.data, data, elapsed)
                    arrivals.append(arrival)
                    if stop_early is not None and stop_early(arrival):
                        stop = True
                        break
        finally:
            sel.close()
            for sock in socks:
                sock.close()
        return ExchangeOutcome(tuple(sends), tuple(arrivals))


@dataclass
class ServerStats:
    """Per-server accounting for one raced lookup."""

    bytes_sent: int = 0
    bytes_received: int = 0
    replied: bool = False
    reply_latency_ms: float | None = None
    send_error: str | None = None

    def to_dict(self) -> dict:
        return {
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "replied": self.replied,
            "reply_latency_ms": self.reply_latency_ms,
            "send_error": self.send_error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ServerStats:
        return cls(
            bytes_sent=int(data["bytes_sent"]),
            bytes_received=int(data["bytes_received"]),
            replied=bool(data["replied"]),
            reply_latency_ms=data.get("reply_latency_ms"),
            send_error=data.get("send_error"),
        )


@dataclass
class RacedResult:
    """Outcome of one first-reply-wins lookup.

    reply_latency_ms in per_server is the server's first rcode-0 reply;
    a server that only returned errors has replied=True with no latency,
    so the winner's latency is <= every recorded reply latency.
    """

    winner_index: int | None
    latency_ms: float | None
    response: ResponseSummary | None
    per_server: list[ServerStats]
    timed_out: bool
    query_bytes: int

    @property
    def bytes_sent_total(self) -> int:
        return sum(s.bytes_sent for s in self.per_server)

    @property
    def bytes_received_total(self) -> int:
        return sum(s.bytes_received for s in self.per_server)

    @property
    def winner_wire_bytes(self) -> int:
        return self.response.wire_bytes if self.response is not None else 0

    def to_dict(self) -> dict:
        return {
            "winner_index": self.winner_index,
            "latency_ms": self.latency_ms,
            "timed_out": self.timed_out,
            "query_bytes": self.query_bytes,
            "bytes_sent_total": self.bytes_sent_total,
            "bytes_received_total": self.bytes_received_total,
            "addresses": self.response.addresses if self.response else [],
            "rcode": self.response.rcode if self.response else None,
            "per_server": [s.to_dict() for s in self.per_server],
        }


def _first_compliant(expected_id: int) -> Callable[[Arrival], bool]:
    def check(arrival: Arrival) -> bool:
        try:
            return decode_response(arrival.datagram, expected_id).rcode == 0
        except DecodeError:
            return False

    return check


def score_exchange(
    query: QuerySpec, outcome: ExchangeOutcome, contacted: int, query_bytes: int
) -> RacedResult:
    """Turn a time-ordered exchange into a raced result.

    The first arrival that decodes with the query's id and rcode 0 wins;
    everything else only feeds the byte and reply accounting.
    """
    per_server = [ServerStats() for _ in range(contacted)]
    for send in outcome.sends:
        per_server[send.server_index].bytes_sent = send.bytes_sent
        per_server[send.server_index].send_error = send.error
    winner_index: int | None = None
    latency_ms: float | None = None
    response: ResponseSummary | None = None
    for arrival in outcome.arrivals:
        stats = per_server[arrival.server_index]
        stats.bytes_received += len(arrival.datagram)
        try:
            summary = decode_response(arrival.datagram, query.id)
        except DecodeError:
            continue
        stats.replied = True
        if summary.rcode != 0:
            continue
        if stats.reply_latency_ms is None:
            stats.reply_latency_ms = arrival.elapsed_ms
        if winner_index is None:
            winner_index = arrival.server_index
            latency_ms = arrival.elapsed_ms
            response = summary
    return RacedResult(
        winner_index=winner_index,
        latency_ms=latency_ms,
        response=response,
        per_server=per_server,
        timed_out=winner_index is None,
        query_bytes=query_bytes,
    )


def resolve_raced(
    query: QuerySpec,
    ranked: RankedServerList,
    k: int,
    deadline_ms: float = DEFAULT_DEADLINE_MS,
    transport: Transport | None = None,
) -> RacedResult:
    """Race one query to the first k ranked servers, first rcode-0 reply wins.

    The same transaction id goes to all k servers, so callers should put
    a fresh random id in each lookup's QuerySpec. Listening (and byte
    accounting) continues until deadline_ms even after a winner.
    """
    if not 1 <= k <= len(ranked):
        raise ResolverError(f"k must be in 1..{len(ranked)}, got {k}")
    if deadline_ms <= 0:
        raise ResolverError(f"deadline_ms must be positive, got {deadline_ms}")
    if transport is None:
        transport = UdpTransport()
    datagram = encode_query(query)
    outcome = transport.exchange(ranked.servers[:k], datagram, deadline_ms)
    if all(send.error is not None for send in outcome.sends):
        detail = "; ".join(f"{ranked.servers[s.server_index].address}: {s.error}" for s in outcome.sends)
        raise AllSendsFailed(f"could not send to any of the {k} servers ({detail})")
    return score_exchange(query, outcome, contacted=k, query_bytes=len(datagram))


def probe_and_rank(
    servers: Sequence[UpstreamServer],
    probe_names: Sequence[str],
    probes_per_server: int = DEFAULT_PROBE_COUNT,
    probe_timeout_ms: float = DEFAULT_PROBE_TIMEOUT_MS,
    transport: Transport | None = None,
    rng: random.Random | None = None,
) -> RankedServerList:
    """Measure each server's mean lookup latency and sort fastest-first.

    Probes run one at a time, cycling through probe_names. Only rcode-0
    replies count toward the mean; a server with no successful probe is
    ranked last as unreachable. Ties keep input order.
    """
    if not servers:
        raise ResolverError("no servers to probe")
    if probes_per_server < 1:
        raise ResolverError("probes_per_server must be >= 1")
    if not probe_names:
        raise ResolverError("need at least one probe name")
    if transport is None:
        transport = UdpTransport()
    if rng is None:
        rng = random.Random()
    means: list[float] = []
    for server in servers:
        successes: list[float] = []
        for j in range(probes_per_server):
            query = QuerySpec(probe_names[j % len(probe_names)], id=rng.getrandbits(16))
            datagram = encode_query(query)
            outcome = transport.exchange(
                [server], datagram, probe_timeout_ms, stop_early=_first_compliant(query.id)
            )
            for arrival in outcome.arrivals:
                try:
                    summary = decode_response(arrival.datagram, query.id)
                except DecodeError:
                    continue
                if summary.rcode == 0:
                    successes.append(arrival.elapsed_ms)
                    break
        means.append(math.fsum(successes) / len(successes) if successes else UNREACHABLE)
    if all(math.isinf(m) for m in means):
        raise AllServersUnreachable(f"none of the {len(servers)} servers answered any probe")
    order = sorted(range(len(servers)), key=lambda i: means[i])
    return RankedServerList(
        tuple(servers[i] for i in order), tuple(means[i] for i in order)
    )
