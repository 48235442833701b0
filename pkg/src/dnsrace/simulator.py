"""Deterministic stand-in upstreams for desk-scale resolver experiments.

A SimWorld describes a set of upstream servers by latency distribution,
loss probability, and exact response size. SimTransport serves that
world through the same exchange contract the real UDP path uses, but on
a virtual clock, so tens of thousands of raced lookups run in seconds
and replay bit-identically from (world, seed).

Randomness is counter-based: each (upstream, lookup) pair gets its own
Philox substream keyed by (master_seed, upstream.seed) with the lookup
counter in the high counter word. Adding or removing an upstream never
perturbs another upstream's draws, which makes cross-k comparisons
exactly paired.

min_of_k_oracle gives the closed-form (or exhaustively computed)
statistics of the fastest of k independent replies, for checking raced
results against ground truth.
"""

from __future__ import annotations

import bisect
import json
import math
import socket
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .codec import HEADER_LEN, TYPE_A, TYPE_AAAA, _read_name
from .resolver import (
    Arrival,
    ExchangeOutcome,
    SendOutcome,
    UpstreamServer,
)

_MASK64 = (1 << 64) - 1
_RR_FIXED = struct.Struct(">HHIH")  # type, class, ttl, rdlength (after the name)
_TXT_TYPE = 16
_CLASS_IN = 1
_TTL = 60


class SimulatorError(Exception):
    """Invalid simulated-world configuration or unsatisfiable response size."""


@dataclass(frozen=True)
class Constant:
    """Every reply takes exactly latency_ms."""

    latency_ms: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.latency_ms) or self.latency_ms < 0:
            raise SimulatorError(f"constant latency must be >= 0, got {self.latency_ms}")

    def sample(self, rng: np.random.Generator) -> float:
        return self.latency_ms

    def to_dict(self) -> dict:
        return {"kind": "constant", "latency_ms": self.latency_ms}


@dataclass(frozen=True)
class ShiftedExponential:
    """shift_ms plus an exponential with the given mean."""

    shift_ms: float
    mean_ms: float

    def __post_init__(self) -> None:
        if self.shift_ms < 0 or not math.isfinite(self.shift_ms):
            raise SimulatorError(f"shift must be >= 0, got {self.shift_ms}")
        if self.mean_ms < 0 or not math.isfinite(self.mean_ms):
            raise SimulatorError(f"mean must be >= 0, got {self.mean_ms}")

    def sample(self, rng: np.random.Generator) -> float:
        return self.shift_ms + rng.exponential(self.mean_ms)

    def to_dict(self) -> dict:
        return {"kind": "shifted_exponential", "shift_ms": self.shift_ms, "mean_ms": self.mean_ms}


@dataclass(frozen=True)
class LogNormal:
    """exp(Normal(mu, sigma)) milliseconds."""

    mu: float
    sigma: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.mu):
            raise SimulatorError(f"mu must be finite, got {self.mu}")
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise SimulatorError(f"sigma must be >= 0, got {self.sigma}")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.lognormal(self.mu, self.sigma))

    def to_dict(self) -> dict:
        return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class Empirical:
    """Uniform draw, with replacement, from a fixed sample list."""

    samples_ms: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples_ms", tuple(float(s) for s in self.samples_ms))
        if not self.samples_ms:
            raise SimulatorError("empirical sample list must be nonempty")
        if any(not math.isfinite(s) or s < 0 for s in self.samples_ms):
            raise SimulatorError("empirical samples must be finite and >= 0")

    def sample(self, rng: np.random.Generator) -> float:
        return self.samples_ms[int(rng.integers(0, len(self.samples_ms)))]

    def to_dict(self) -> dict:
        return {"kind": "empirical", "samples_ms": list(self.samples_ms)}


Distribution = Union[Constant, ShiftedExponential, LogNormal, Empirical]

_DISTRIBUTION_KINDS: dict[str, Callable[[dict], Distribution]] = {
    "constant": lambda d: Constant(d["latency_ms"]),
    "shifted_exponential": lambda d: ShiftedExponential(d["shift_ms"], d["mean_ms"]),
    "lognormal": lambda d: LogNormal(d["mu"], d["sigma"]),
    "empirical": lambda d: Empirical(tuple(d["samples_ms"])),
}


def distribution_from_dict(data: dict) -> Distribution:
    kind = data.get("kind")
    if kind not in _DISTRIBUTION_KINDS:
        raise SimulatorError(
            f"unknown distribution kind {kind!r}; expected one of {sorted(_DISTRIBUTION_KINDS)}"
        )
    try:
        return _DISTRIBUTION_KINDS[kind](data)
    except KeyError as exc:
        raise SimulatorError(f"distribution {kind!r} is missing parameter {exc}") from None


@dataclass(frozen=True)
class SimUpstream:
    """One simulated server: how fast it answers, how often it doesn't,
    how many bytes its answer occupies on the wire."""

    label: str
    distribution: Distribution
    loss_probability: float = 0.0
    response_bytes: int = 100
    seed: int = 0
    rcode: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.loss_probability <= 1:
            raise SimulatorError(f"loss_probability must be in [0, 1], got {self.loss_probability}")
        if self.response_bytes < 1:
            raise SimulatorError(f"response_bytes must be positive, got {self.response_bytes}")
        if not 0 <= self.rcode <= 15:
            raise SimulatorError(f"rcode must be in 0..15, got {self.rcode}")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "distribution": self.distribution.to_dict(),
            "loss_probability": self.loss_probability,
            "response_bytes": self.response_bytes,
            "seed": self.seed,
            "rcode": self.rcode,
        }

    @classmethod
    def from_dict(cls, data: dict, index: int) -> SimUpstream:
        return cls(
            label=str(data.get("label", f"sim-{index}")),
            distribution=distribution_from_dict(data["distribution"]),
            loss_probability=float(data.get("loss_probability", 0.0)),
            response_bytes=int(data.get("response_bytes", 100)),
            seed=int(data.get("seed", index)),
            rcode=int(data.get("rcode", 0)),
        )


@dataclass(frozen=True)
class SimWorld:
    upstreams: tuple[SimUpstream, ...]
    master_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "upstreams", tuple(self.upstreams))
        if not self.upstreams:
            raise SimulatorError("world must have at least one upstream")

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "upstreams": [u.to_dict() for u in self.upstreams],
        }

    @classmethod
    def from_dict(cls, data: dict) -> SimWorld:
        upstreams = tuple(
            SimUpstream.from_dict(entry, i) for i, entry in enumerate(data["upstreams"])
        )
        return cls(upstreams, int(data.get("master_seed", 0)))


def load_world(path: str | Path) -> SimWorld:
    with open(path, encoding="utf-8") as fh:
        return SimWorld.from_dict(json.load(fh))


def save_world(world: SimWorld, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world.to_dict(), indent=2) + "\n", encoding="utf-8")


def _substream(upstream: SimUpstream, master_seed: int, lookup_counter: int) -> np.random.Generator:
    # lookup counter sits in the top counter word; internal block
    # increments start at word 0, so distinct lookups never collide
    key = [master_seed & _MASK64, upstream.seed & _MASK64]
    counter = [0, 0, 0, lookup_counter & _MASK64]
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def sample_latency(
    upstream: SimUpstream, master_seed: int, lookup_counter: int
) -> float | None:
    """Latency of this upstream's reply to one lookup, or None when lost.

    The loss uniform is always drawn before the latency draw, so the
    same (seed, counter) gives the same latency whether or not loss is
    enabled elsewhere in the configuration.
    """
    rng = _substream(upstream, master_seed, lookup_counter)
    lost = rng.random() < upstream.loss_probability
    latency = float(upstream.distribution.sample(rng))
    return None if lost else latency


def min_of_k_oracle(distribution: Distribution, k: int, statistic: str) -> float:
    """Exact mean or p95 of the minimum of k independent draws.

    Constant and ShiftedExponential are closed-form; Empirical is
    computed exhaustively from the sample list. LogNormal has no closed
    form and is rejected.
    """
    if k < 1:
        raise SimulatorError(f"k must be >= 1, got {k}")
    if statistic not in ("mean", "p95"):
        raise SimulatorError(f"statistic must be 'mean' or 'p95', got {statistic!r}")
    if isinstance(distribution, Constant):
        return distribution.latency_ms
    if isinstance(distribution, ShiftedExponential):
        # min of k exponentials(mean) is exponential(mean / k)
        scaled = distribution.mean_ms / k
        if statistic == "mean":
            return distribution.shift_ms + scaled
        return distribution.shift_ms + scaled * math.log(20.0)
    if isinstance(distribution, Empirical):
        return _empirical_min_oracle(distribution.samples_ms, k, statistic)
    raise SimulatorError(
        f"no analytic oracle for {type(distribution).__name__}; use an empirical sample list"
    )


def _empirical_min_oracle(samples: Sequence[float], k: int, statistic: str) -> float:
    values = sorted(samples)
    m = len(values)
    # distinct values ascending, with the count of samples strictly above each
    distinct: list[tuple[float, int]] = []
    for v in values:
        if distinct and distinct[-1][0] == v:
            continue
        distinct.append((v, m - bisect.bisect_right(values, v)))
    if statistic == "p95":
        for v, above in distinct:
            if 1.0 - (above / m) ** k >= 0.95:
                return v
        return distinct[-1][0]
    mean = 0.0
    prev_ge = 1.0  # P(min >= smallest value)
    for v, above in distinct:
        p_gt = (above / m) ** k
        mean += v * (prev_ge - p_gt)
        prev_ge = p_gt
    return mean


def _character_strings(rdata_len: int) -> bytes:
    # pack exactly rdata_len bytes as consecutive <len, text> strings
    out = bytearray()
    remaining = rdata_len
    while remaining > 0:
        chunk = min(256, remaining)
        out.append(chunk - 1)
        out.extend(b"x" * (chunk - 1))
        remaining -= chunk
    return bytes(out)


def _answer_rr(qtype: int, upstream_index: int) -> bytes:
    if qtype == TYPE_AAAA:
        rdata = b"\x20\x01\x0d\xb8" + b"\x00" * 10 + struct.pack(">H", upstream_index + 1)
    else:
        rdata = bytes([192, 0, 2, (upstream_index % 254) + 1])
    return b"\xc0\x0c" + _RR_FIXED.pack(qtype, _CLASS_IN, _TTL, len(rdata)) + rdata


def _txt_rr(rdata_len: int) -> bytes:
    return b"\xc0\x0c" + _RR_FIXED.pack(_TXT_TYPE, _CLASS_IN, _TTL, rdata_len) + _character_strings(rdata_len)


_PAD_MIN = 13  # smallest possible TXT record: 12 fixed bytes + 1 rdata byte


def synthesize_response(query_datagram: bytes, upstream: SimUpstream, upstream_index: int) -> bytes:
    """Build a valid response to the given query occupying exactly
    upstream.response_bytes bytes on the wire.

    An address record answers the question when it fits; a TXT record
    absorbs any remaining bytes. Sizes that land in the unfillable gap
    (1..12 bytes past a valid layout) are a configuration error.
    """
    if len(query_datagram) < HEADER_LEN + 5:
        raise SimulatorError("query datagram too short to contain a question")
    try:
        _, name_end = _read_name(query_datagram, HEADER_LEN)
    except Exception as exc:
        raise SimulatorError(f"could not parse query question: {exc}") from None
    if name_end + 4 > len(query_datagram):
        raise SimulatorError("query datagram truncated before qtype/qclass")
    question = query_datagram[HEADER_LEN : name_end + 4]
    (qtype,) = struct.unpack(">H", query_datagram[name_end : name_end + 2])
    target = upstream.response_bytes

    candidates: list[list[bytes]] = []
    if upstream.rcode == 0 and qtype in (TYPE_A, TYPE_AAAA):
        candidates.append([_answer_rr(qtype, upstream_index)])
    candidates.append([])

    base_len = HEADER_LEN + len(question)
    for answers in candidates:
        body = base_len + sum(len(a) for a in answers)
        gap = target - body
        if gap == 0:
            records = answers
        elif gap >= _PAD_MIN:
            records = answers + [_txt_rr(gap - 12)]
        else:
            continue
        header = struct.pack(
            ">HHHHHH",
            struct.unpack(">H", query_datagram[:2])[0],
            0x8180 | upstream.rcode,
            1,
            len(records),
            0,
            0,
        )
        datagram = header + question + b"".join(records)
        assert len(datagram) == target
        return datagram
    raise SimulatorError(
        f"response_bytes={target} is unreachable for this question "
        f"(needs {base_len} bytes minimum and cannot pad gaps of 1..12)"
    )


def sim_address(index: int) -> str:
    """Synthetic private address for the index-th simulated upstream."""
    if not 0 <= index < 250 * 250:
        raise SimulatorError(f"upstream index {index} outside the address plan")
    return f"10.53.{index // 250}.{index % 250 + 1}"


class SimTransport:
    """Virtual-time transport over a SimWorld.

    One exchange is one lookup: the clock advances by the listening
    window (or to the early stop), replies sort by (latency, send
    order), and every response is synthesized at its configured size.
    """

    def __init__(self, world: SimWorld):
        self.world = world
        self.servers: list[UpstreamServer] = [
            UpstreamServer(sim_address(i), 53, u.label) for i, u in enumerate(world.upstreams)
        ]
        self._by_endpoint = {s.endpoint: i for i, s in enumerate(self.servers)}
        self._clock_ms = 0.0
        self._lookup_counter = 0
        self._templates: dict[tuple[int, bytes], bytes] = {}

    def now_ms(self) -> float:
        return self._clock_ms

    def _response_for(self, upstream_index: int, datagram: bytes) -> bytes:
        key = (upstream_index, datagram[2:])
        template = self._templates.get(key)
        if template is None:
            template = synthesize_response(
                datagram, self.world.upstreams[upstream_index], upstream_index
            )
            self._templates[key] = template
        return datagram[:2] + template[2:]

    def exchange(
        self,
        servers: Sequence[UpstreamServer],
        datagram: bytes,
        window_ms: float,
        stop_early: Callable[[Arrival], bool] | None = None,
    ) -> ExchangeOutcome:
        lookup = self._lookup_counter
        self._lookup_counter += 1
        sends: list[SendOutcome] = []
        pending: list[tuple[float, int, bytes]] = []
        for send_index, server in enumerate(servers):
            upstream_index = self._by_endpoint.get(server.endpoint)
            if upstream_index is None:
                sends.append(
                    SendOutcome(
                        send_index, 0, error=f"no simulated upstream at {server.address}:{server.port}"
                    )
                )
                continue
            sends.append(SendOutcome(send_index, len(datagram)))
            upstream = self.world.upstreams[upstream_index]
            latency = sample_latency(upstream, self.world.master_seed, lookup)
            if latency is None or latency > window_ms:
                continue
            pending.append((latency, send_index, self._response_for(upstream_index, datagram)))
        pending.sort(key=lambda item: (item[0], item[1]))
        arrivals: list[Arrival] = []
        advance = window_ms
        for latency, send_index, response in pending:
            arrival = Arrival(send_index, response, latency)
            arrivals.append(arrival)
            if stop_early is not None and stop_early(arrival):
                advance = latency
                break
        self._clock_ms += advance
        return ExchangeOutcome(tuple(sends), tuple(arrivals))


class LoopbackSimServer:
    """Real-time twin of SimTransport: each upstream is a UDP socket on
    loopback that answers after genuinely sleeping its sampled latency.

    Use as a context manager; .servers lists the bound endpoints in
    world order. Same sampling discipline as SimTransport, with the
    per-upstream query sequence number as the lookup counter.
    """

    def __init__(self, world: SimWorld, host: str = "127.0.0.1"):
        self.world = world
        self.host = host
        self.servers: list[UpstreamServer] = []
        self._socks: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._timers: list[threading.Timer] = []
        self._counters = [0] * len(world.upstreams)
        self._lock = threading.Lock()
        self._closing = threading.Event()

    def __enter__(self) -> LoopbackSimServer:
        self.start()
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.stop()

    def start(self) -> None:
        for index, upstream in enumerate(self.world.upstreams):
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind((self.host, 0))
            self.servers.append(
                UpstreamServer(self.host, sock.getsockname()[1], upstream.label)
            )
            thread = threading.Thread(
                target=self._serve, args=(index, sock), name=f"sim-upstream-{index}", daemon=True
            )
            self._socks.append(sock)
            self._threads.append(thread)
        for thread in self._threads:
            thread.start()

    def _serve(self, index: int, sock: socket.socket) -> None:
        upstream = self.world.upstreams[index]
        while not self._closing.is_set():
            try:
                datagram, peer = sock.recvfrom(65535)
            except OSError:
                return
            with self._lock:
                counter = self._counters[index]
                self._counters[index] += 1
            latency = sample_latency(upstream, self.world.master_seed, counter)
            if latency is None:
                continue
            response = synthesize_response(datagram, upstream, index)
            timer = threading.Timer(latency / 1000.0, self._reply, args=(sock, response, peer))
            timer.daemon = True
            with self._lock:
                self._timers.append(timer)
            timer.start()

    @staticmethod
    def _reply(sock: socket.socket, response: bytes, peer: tuple) -> None:
        try:
            sock.sendto(response, peer)
        except OSError:
            pass

    def stop(self) -> None:
        self._closing.set()
        with self._lock:
            timers = list(self._timers)
        for timer in timers:
            timer.cancel()
        for sock in self._socks:
            sock.close()
        for thread in self._threads:
            thread.join(timeout=2.0)
