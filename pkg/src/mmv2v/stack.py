"""Upper sidelink stack: bearers, RLC-UM, PDCP and the vehicular net device.

RLC-UM PDU layout::

    SN (2 bytes, 12 bits used) | flags (1 byte) | {length (2 bytes) | data}...

flags bit 0: the first segment continues an SDU begun in an earlier PDU.
flags bit 1: the last segment is continued in a later PDU.

PDCP adds a 2-byte sequence number and nothing else.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

RLC_SN_MODULUS = 1 << 12
RLC_HEADER_BYTES = 3
RLC_SEGMENT_HEADER_BYTES = 2
RLC_MIN_GRANT = RLC_HEADER_BYTES + RLC_SEGMENT_HEADER_BYTES + 1
FIRST_IS_CONTINUATION = 0x01
LAST_CONTINUES = 0x02

PDCP_SN_MODULUS = 1 << 16
PDCP_HEADER_BYTES = 2

_U16 = struct.Struct(">H")
_RLC_HDR = struct.Struct(">HB")


def _bump(counters: dict, key: str, n: int = 1) -> None:
    counters[key] = counters.get(key, 0) + n


class RlcUmEntity:
    """Unacknowledged-mode RLC: segmentation and concatenation, no retransmission."""

    def __init__(self, capacity: int = 500, unit: str = "packets"):
        if unit not in ("packets", "bytes"):
            raise ValueError("RLC capacity unit must be 'packets' or 'bytes'")
        self.capacity = capacity
        self.unit = unit
        # each entry: [sdu_id, sdu bytes, bytes already sent]
        self.tx_queue: deque[list] = deque()
        self.queued_bytes = 0
        self.tx_sn = 0
        self._next_sdu_id = 0
        self.last_pdu_sdus: list[int] = []
        self.rx_expected: int | None = None
        self._partial: bytearray | None = None
        self.counters: dict[str, int] = {}

    # -- transmit side --

    def occupancy(self) -> int:
        return len(self.tx_queue) if self.unit == "packets" else self.queued_bytes

    def has_room(self, sdu_len: int) -> bool:
        size = 1 if self.unit == "packets" else sdu_len
        return self.occupancy() + size <= self.capacity

    def enqueue(self, sdu: bytes) -> bool:
        if not self.has_room(len(sdu)):
            _bump(self.counters, "tx_overflow_drops")
            return False
        self.tx_queue.append([self._next_sdu_id, sdu, 0])
        self._next_sdu_id += 1
        self.queued_bytes += len(sdu)
        return True

    def buffer_status(self) -> int:
        """Bytes needed to flush the queue, including RLC headers."""
        if not self.tx_queue:
            return 0
        return self.queued_bytes + RLC_SEGMENT_HEADER_BYTES * len(self.tx_queue) + RLC_HEADER_BYTES

    def build_pdu(self, grant: int) -> bytes | None:
        self.last_pdu_sdus = []
        if grant < RLC_MIN_GRANT or not self.tx_queue:
            return None
        flags = 0
        body = bytearray()
        room = grant - RLC_HEADER_BYTES
        first = True
        while self.tx_queue and room > RLC_SEGMENT_HEADER_BYTES:
            entry = self.tx_queue[0]
            sdu_id, sdu, sent = entry
            if first and sent > 0:
                flags |= FIRST_IS_CONTINUATION
            first = False
            avail = room - RLC_SEGMENT_HEADER_BYTES
            rest = len(sdu) - sent
            take = min(rest, avail)
            body += _U16.pack(take)
            body += sdu[sent:sent + take]
            room -= RLC_SEGMENT_HEADER_BYTES + take
            self.queued_bytes -= take
            self.last_pdu_sdus.append(sdu_id)
            if take < rest:
                entry[2] = sent + take
                flags |= LAST_CONTINUES
                break
            self.tx_queue.popleft()
        pdu = _RLC_HDR.pack(self.tx_sn, flags) + bytes(body)
        self.tx_sn = (self.tx_sn + 1) % RLC_SN_MODULUS
        return pdu

    # -- receive side --

    def _discard_partial(self) -> None:
        if self._partial is not None:
            _bump(self.counters, "rx_sdus_discarded")
            self._partial = None

    def receive(self, pdu: bytes) -> list[bytes]:
        if len(pdu) < RLC_HEADER_BYTES:
            _bump(self.counters, "rx_malformed")
            return []
        sn, flags = _RLC_HDR.unpack_from(pdu, 0)
        if self.rx_expected is not None:
            diff = (sn - self.rx_expected) % RLC_SN_MODULUS
            if diff >= RLC_SN_MODULUS // 2:
                _bump(self.counters, "rx_duplicates")
                return []
            if diff > 0:
                _bump(self.counters, "rx_gaps")
                self._discard_partial()
        self.rx_expected = (sn + 1) % RLC_SN_MODULUS

        segments = []
        pos = RLC_HEADER_BYTES
        while pos < len(pdu):
            if pos + RLC_SEGMENT_HEADER_BYTES > len(pdu):
                _bump(self.counters, "rx_malformed")
                self._discard_partial()
                return []
            (length,) = _U16.unpack_from(pdu, pos)
            pos += RLC_SEGMENT_HEADER_BYTES
            if pos + length > len(pdu):
                _bump(self.counters, "rx_malformed")
                self._discard_partial()
                return []
            segments.append(pdu[pos:pos + length])
            pos += length

        delivered = []
        last = len(segments) - 1
        for i, seg in enumerate(segments):
            continuation = i == 0 and flags & FIRST_IS_CONTINUATION
            complete = not (i == last and flags & LAST_CONTINUES)
            if continuation:
                if self._partial is None:
                    # head of this SDU was lost
                    if complete:
                        _bump(self.counters, "rx_sdus_discarded")
                    continue
                self._partial += seg
            else:
                self._discard_partial()
                self._partial = bytearray(seg)
            if complete:
                delivered.append(bytes(self._partial))
                self._partial = None
        return delivered


class PdcpEntity:
    """Sequencing-only PDCP; payload passes through untouched."""

    def __init__(self, history: int = 1024):
        self.tx_sn = 0
        self.rx_expected: int | None = None
        self._recent: deque[int] = deque(maxlen=history)
        self._recent_set: set[int] = set()
        self.counters: dict[str, int] = {}

    def send(self, payload: bytes) -> bytes:
        pdu = _U16.pack(self.tx_sn) + payload
        self.tx_sn = (self.tx_sn + 1) % PDCP_SN_MODULUS
        return pdu

    def skip(self, n: int) -> None:
        """Consume ``n`` sequence numbers for PDUs dropped below PDCP."""
        self.tx_sn = (self.tx_sn + n) % PDCP_SN_MODULUS

    def receive(self, pdu: bytes) -> bytes | None:
        if len(pdu) < PDCP_HEADER_BYTES:
            _bump(self.counters, "rx_truncated")
            return None
        (sn,) = _U16.unpack_from(pdu, 0)
        if sn in self._recent_set:
            _bump(self.counters, "rx_duplicates")
            return None
        if self.rx_expected is not None and sn != self.rx_expected:
            if (sn - self.rx_expected) % PDCP_SN_MODULUS >= PDCP_SN_MODULUS // 2:
                _bump(self.counters, "rx_reordered")
        if self.rx_expected is None or (sn - self.rx_expected) % PDCP_SN_MODULUS < PDCP_SN_MODULUS // 2:
            self.rx_expected = (sn + 1) % PDCP_SN_MODULUS
        if len(self._recent) == self._recent.maxlen:
            self._recent_set.discard(self._recent[0])
        self._recent.append(sn)
        self._recent_set.add(sn)
        return pdu[PDCP_HEADER_BYTES:]


# --- datagrams and classification ----------------------------------------

_DGRAM = struct.Struct(">IIHH")
DATAGRAM_HEADER_BYTES = _DGRAM.size


def address_of(rnti: int) -> int:
    """Network-layer address assigned to a vehicle (10.0.0.0/8 style)."""
    return 0x0A000001 + rnti


@dataclass
class Packet:
    src: int
    dst: int
    payload: bytes
    src_port: int = 0
    dst_port: int = 0
    rx_time: int | None = None

    def encode(self) -> bytes:
        return _DGRAM.pack(self.src, self.dst, self.src_port, self.dst_port) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Packet":
        if len(data) < DATAGRAM_HEADER_BYTES:
            raise ValueError("truncated datagram header")
        src, dst, sp, dp = _DGRAM.unpack_from(data, 0)
        return cls(src, dst, data[DATAGRAM_HEADER_BYTES:], sp, dp)


@dataclass
class PacketFilter:
    """(destination address, optional port) -> bearer id."""

    rules: dict[tuple[int, int | None], int] = field(default_factory=dict)

    def add(self, dst: int, bearer_id: int, port: int | None = None) -> None:
        key = (dst, port)
        if key in self.rules:
            raise ValueError(f"a rule for {key} already maps to bearer {self.rules[key]}")
        self.rules[key] = bearer_id

    def classify(self, packet: Packet) -> int | None:
        hit = self.rules.get((packet.dst, packet.dst_port))
        if hit is None:
            hit = self.rules.get((packet.dst, None))
        return hit


@dataclass
class Bearer:
    bearer_id: int
    local_rnti: int
    peer_rnti: int
    lcid: int
    peer_address: int
    rlc: RlcUmEntity
    pdcp: PdcpEntity
    transmit: bool = True


class BearerError(ValueError):
    pass


class BearerRegistry:
    """Simulation-wide bearer ids; each id belongs to exactly one device pair."""

    def __init__(self):
        self._pairs: dict[int, frozenset[int]] = {}
        self._activated: dict[int, set[int]] = {}

    def claim(self, bearer_id: int, local: int, peer: int) -> None:
        pair = frozenset((local, peer))
        owner = self._pairs.get(bearer_id)
        if owner is None:
            self._pairs[bearer_id] = pair
            self._activated[bearer_id] = {local}
            return
        if owner != pair:
            raise BearerError(f"bearer {bearer_id} already identifies pair {sorted(owner)}")
        if local in self._activated[bearer_id]:
            raise BearerError(f"bearer {bearer_id} already active on device {local}")
        self._activated[bearer_id].add(local)

    def next_id(self) -> int:
        return max(self._pairs, default=0) + 1

    def __len__(self) -> int:
        return len(self._pairs)


class VehicularNetDevice:
    """Per-vehicle device holding the bearer map, classifier and RLC/PDCP entities."""

    def __init__(
        self,
        rnti: int,
        registry: BearerRegistry,
        rlc_capacity: int = 500,
        rlc_unit: str = "packets",
    ):
        self.rnti = rnti
        self.address = address_of(rnti)
        self.registry = registry
        self.rlc_capacity = rlc_capacity
        self.rlc_unit = rlc_unit
        self.bearers: dict[int, Bearer] = {}
        self.by_channel: dict[tuple[int, int], Bearer] = {}
        self.classifier = PacketFilter()
        self.counters: dict[str, int] = {}
        self.receive_callback: Callable[[Packet], None] | None = None

    def activate_bearer(
        self,
        bearer_id: int,
        peer_rnti: int,
        peer_address: int | None = None,
        lcid: int | None = None,
        transmit: bool = True,
    ) -> Bearer:
        if bearer_id in self.bearers:
            raise BearerError(f"bearer {bearer_id} already active on device {self.rnti}")
        if lcid is None:
            lcid = 1
            while (peer_rnti, lcid) in self.by_channel:
                lcid += 1
        if not 1 <= lcid <= 255:
            raise BearerError(f"lcid {lcid} outside 1..255")
        if (peer_rnti, lcid) in self.by_channel:
            raise BearerError(f"(rnti {peer_rnti}, lcid {lcid}) already in use on device {self.rnti}")
        self.registry.claim(bearer_id, self.rnti, peer_rnti)
        peer_address = address_of(peer_rnti) if peer_address is None else peer_address
        bearer = Bearer(
            bearer_id, self.rnti, peer_rnti, lcid, peer_address,
            RlcUmEntity(self.rlc_capacity, self.rlc_unit), PdcpEntity(), transmit,
        )
        if transmit:
            self.classifier.add(peer_address, bearer_id)
        self.bearers[bearer_id] = bearer
        self.by_channel[(peer_rnti, lcid)] = bearer
        return bearer

    def send(self, packet: Packet) -> bool:
        bid = self.classifier.classify(packet)
        if bid is None:
            _bump(self.counters, "no_bearer_drops")
            return False
        bearer = self.bearers[bid]
        ok = bearer.rlc.enqueue(bearer.pdcp.send(packet.encode()))
        if not ok:
            _bump(self.counters, "rlc_drops")
        return ok

    def drop_burst(self, packet: Packet, n: int) -> bool:
        """Account ``n`` copies of ``packet`` as RLC overflow drops, if they would be.

        Returns False (and does nothing) unless the bearer's RLC queue is
        already too full to take the packet.
        """
        bid = self.classifier.classify(packet)
        if bid is None:
            return False
        bearer = self.bearers[bid]
        if bearer.rlc.has_room(PDCP_HEADER_BYTES + DATAGRAM_HEADER_BYTES + len(packet.payload)):
            return False
        bearer.pdcp.skip(n)
        _bump(bearer.rlc.counters, "tx_overflow_drops", n)
        _bump(self.counters, "rlc_drops", n)
        return True

    def receive(self, peer_rnti: int, lcid: int, rlc_pdu: bytes, now: int) -> list[Packet]:
        """Hand one RLC PDU up the stack; returns the packets it completed."""
        bearer = self.by_channel.get((peer_rnti, lcid))
        if bearer is None:
            _bump(self.counters, "unknown_channel_drops")
            return []
        out = []
        for sdu in bearer.rlc.receive(rlc_pdu):
            pkt = self.receive_pdcp(bearer, sdu, now)
            if pkt is not None:
                out.append(pkt)
        return out

    def receive_pdcp(self, bearer: Bearer, sdu: bytes, now: int) -> Packet | None:
        data = bearer.pdcp.receive(sdu)
        if data is None:
            return None
        try:
            pkt = Packet.decode(data)
        except ValueError:
            _bump(self.counters, "truncated_drops")
            return None
        pkt.rx_time = now
        if self.receive_callback is not None:
            self.receive_callback(pkt)
        return pkt

    def transmitting_bearers(self) -> list[Bearer]:
        return [b for b in self.bearers.values() if b.transmit]


def device_send(device: VehicularNetDevice, packet: Packet) -> bool:
    return device.send(packet)


def device_receive(device: VehicularNetDevice, peer_rnti: int, lcid: int, sdu: bytes, now: int) -> Packet | None:
    """Strip PDCP and datagram headers from one PDCP PDU received on (peer, lcid)."""
    bearer = device.by_channel.get((peer_rnti, lcid))
    if bearer is None:
        _bump(device.counters, "unknown_channel_drops")
        return None
    return device.receive_pdcp(bearer, sdu, now)
