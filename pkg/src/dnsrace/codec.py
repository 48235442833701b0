"""Minimal DNS wire codec: encode queries, parse answers, count exact bytes.

Covers just enough of the RFC 1035 message format to issue A/AAAA queries
over UDP, match the responses that come back, and attribute every on-wire
byte to traffic accounting. No EDNS0, no TCP fallback, no DNSSEC.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, field

HEADER_LEN = 12
MAX_LABEL_LEN = 63
MAX_NAME_LEN = 255
CLASS_IN = 1

TYPE_A = 1
TYPE_AAAA = 28

_HEADER = struct.Struct(">HHHHHH")
_FLAG_QR = 0x8000
_FLAG_TC = 0x0200
_FLAG_RD = 0x0100


class DnsCodecError(Exception):
    """Base for all wire-format errors."""


class EncodeError(DnsCodecError):
    """Query cannot be expressed on the wire (bad label or name length)."""


class DecodeError(DnsCodecError):
    """Base for malformed or unexpected inbound datagrams."""


class TruncatedDatagram(DecodeError):
    """Datagram ends before the structure it claims to contain."""


class NotAResponse(DecodeError):
    """QR flag says this datagram is a query, not a response."""


class IdMismatch(DecodeError):
    """Response transaction id does not match the query we sent."""


class CompressionLoop(DecodeError):
    """Name compression pointers revisit an offset."""


class MalformedName(DecodeError):
    """Reserved label type bits or a pointer outside the datagram."""


class QType(enum.IntEnum):
    A = TYPE_A
    AAAA = TYPE_AAAA


@dataclass(frozen=True)
class QuerySpec:
    """One question: name, record type, transaction id, RD flag."""

    qname: str
    qtype: QType = QType.A
    id: int = 0
    recursion_desired: bool = True

    def __post_init__(self) -> None:
        if not 0 <= self.id <= 0xFFFF:
            raise EncodeError(f"transaction id {self.id} outside 16-bit range")
        if self.qtype not in (QType.A, QType.AAAA):
            raise EncodeError(f"unsupported query type {self.qtype}")


@dataclass
class ResponseSummary:
    """What the resolver needs from a response: status, addresses, exact size."""

    id: int
    rcode: int
    answer_count: int
    addresses: list[str] = field(default_factory=list)
    wire_bytes: int = 0
    truncated: bool = False
    qname: str | None = None
    qtype: int | None = None


def encode_name(qname: str) -> bytes:
    """Encode a dot-separated name as length-prefixed labels plus the root byte."""
    name = qname[:-1] if qname.endswith(".") else qname
    if not name:
        raise EncodeError("empty query name")
    out = bytearray()
    for label in name.split("."):
        try:
            raw = label.encode("ascii")
        except UnicodeEncodeError as exc:
            raise EncodeError(f"non-ASCII label in {qname!r}") from exc
        if not raw:
            raise EncodeError(f"empty label in {qname!r}")
        if len(raw) > MAX_LABEL_LEN:
            raise EncodeError(f"label {label!r} longer than {MAX_LABEL_LEN} bytes")
        out.append(len(raw))
        out.extend(raw)
    out.append(0)
    if len(out) > MAX_NAME_LEN:
        raise EncodeError(f"encoded name is {len(out)} bytes, limit {MAX_NAME_LEN}")
    return bytes(out)


def encode_query(q: QuerySpec) -> bytes:
    """Build a single-question query datagram; its length is what traffic accounting charges."""
    flags = _FLAG_RD if q.recursion_desired else 0
    header = _HEADER.pack(q.id, flags, 1, 0, 0, 0)
    return header + encode_name(q.qname) + struct.pack(">HH", int(q.qtype), CLASS_IN)


def _read_name(datagram: bytes, offset: int) -> tuple[str, int]:
    """Walk a (possibly compressed) name. Returns (name, offset after it).

    A visited-offset set bounds pointer chasing, so decoding terminates on
    every input.
    """
    labels: list[str] = []
    visited: set[int] = set()
    end_offset = -1  # offset after the name in the original record, set at first jump
    pos = offset
    while True:
        if pos >= len(datagram):
            raise TruncatedDatagram(f"name runs past end of datagram at offset {pos}")
        length = datagram[pos]
        if length == 0:
            if end_offset < 0:
                end_offset = pos + 1
            break
        kind = length & 0xC0
        if kind == 0xC0:
            if pos + 1 >= len(datagram):
                raise TruncatedDatagram("compression pointer cut off")
            target = ((length & 0x3F) << 8) | datagram[pos + 1]
            if target in visited:
                raise CompressionLoop(f"pointer revisits offset {target}")
            visited.add(target)
            if target >= len(datagram):
                raise MalformedName(f"pointer to offset {target} outside datagram")
            if end_offset < 0:
                end_offset = pos + 2
            pos = target
        elif kind == 0x00:
            if pos + 1 + length > len(datagram):
                raise TruncatedDatagram("label runs past end of datagram")
            labels.append(datagram[pos + 1 : pos + 1 + length].decode("latin-1"))
            pos += 1 + length
        else:
            raise MalformedName(f"reserved label type bits 0x{kind:02x}")
    return ".".join(labels), end_offset


def decode_response(datagram: bytes, expected_id: int) -> ResponseSummary:
    """Parse a response datagram, collecting A/AAAA addresses from the answer section.

    Non-address answer records are skipped but still counted. Never reads
    past the datagram; all failures raise a DecodeError subclass.
    """
    if len(datagram) < HEADER_LEN:
        raise TruncatedDatagram(f"datagram is {len(datagram)} bytes, header needs {HEADER_LEN}")
    msg_id, flags, qdcount, ancount, _nscount, _arcount = _HEADER.unpack_from(datagram, 0)
    if not flags & _FLAG_QR:
        raise NotAResponse("QR flag clear: datagram is a query")
    if msg_id != expected_id:
        raise IdMismatch(f"got id {msg_id:#06x}, expected {expected_id:#06x}")

    offset = HEADER_LEN
    qname: str | None = None
    qtype: int | None = None
    for i in range(qdcount):
        name, offset = _read_name(datagram, offset)
        if offset + 4 > len(datagram):
            raise TruncatedDatagram("question section cut off")
        (rtype,) = struct.unpack_from(">H", datagram, offset)
        if i == 0:
            qname, qtype = name, rtype
        offset += 4

    addresses: list[str] = []
    for _ in range(ancount):
        _, offset = _read_name(datagram, offset)
        if offset + 10 > len(datagram):
            raise TruncatedDatagram("answer record header cut off")
        rtype, _rclass, _ttl, rdlength = struct.unpack_from(">HHIH", datagram, offset)
        offset += 10
        if offset + rdlength > len(datagram):
            raise TruncatedDatagram("answer rdata cut off")
        rdata = datagram[offset : offset + rdlength]
        if rtype == TYPE_A and rdlength == 4:
            addresses.append(str(ipaddress.IPv4Address(rdata)))
        elif rtype == TYPE_AAAA and rdlength == 16:
            addresses.append(str(ipaddress.IPv6Address(rdata)))
        offset += rdlength

    return ResponseSummary(
        id=msg_id,
        rcode=flags & 0x000F,
        answer_count=ancount,
        addresses=addresses,
        wire_bytes=len(datagram),
        truncated=bool(flags & _FLAG_TC),
        qname=qname,
        qtype=qtype,
    )
