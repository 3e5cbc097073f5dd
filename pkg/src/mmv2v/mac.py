"""TDMA sidelink MAC: slot ownership, proportional resource split, TB
multiplexing and link adaptation.

MAC subheader per SDU: 1-byte LCID followed by a 2-byte big-endian length.
LCID 0 marks padding up to the end of the block.
"""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .phy import BlerTable, CsiReport, FrameConfig, TransportBlock, default_bler_table, tbs_bytes

SUBHEADER_BYTES = 3
PADDING_LCID = 0
MAX_SDU_BYTES = 0xFFFF

_SUBHEADER = struct.Struct(">BH")


class SlotAction(enum.Enum):
    TRANSMIT = "transmit"
    RECEIVE = "receive"


class PatternError(ValueError):
    pass


@dataclass(frozen=True)
class SlotPattern:
    """Slot index within the subframe -> owner RNTI, for one group."""

    owners: Mapping[int, int]
    slots_per_subframe: int

    def __post_init__(self):
        for slot in self.owners:
            if not 0 <= slot < self.slots_per_subframe:
                raise PatternError(f"slot {slot} outside 0..{self.slots_per_subframe - 1}")

    @classmethod
    def default(cls, members: Sequence[int], slots_per_subframe: int) -> "SlotPattern":
        """Member k (in group order) owns slot k mod slots_per_subframe."""
        if len(members) > slots_per_subframe:
            raise PatternError(
                f"{len(members)} members cannot each own a slot out of {slots_per_subframe}"
            )
        return cls({k % slots_per_subframe: rnti for k, rnti in enumerate(members)}, slots_per_subframe)

    @classmethod
    def from_assignments(
        cls, assignments: Mapping[int, Iterable[int]], slots_per_subframe: int
    ) -> "SlotPattern":
        """Build from rnti -> slots; a slot claimed twice is rejected."""
        owners: dict[int, int] = {}
        for rnti, slots in assignments.items():
            for s in slots:
                if s in owners:
                    raise PatternError(f"slot {s} assigned to both {owners[s]} and {rnti}")
                owners[s] = rnti
        return cls(owners, slots_per_subframe)

    def owner(self, slot: int) -> int | None:
        return self.owners.get(slot)

    def slots_of(self, rnti: int) -> list[int]:
        return sorted(s for s, r in self.owners.items() if r == rnti)


def slot_indication(t_ns: int, pattern: SlotPattern, rnti: int, cfg: FrameConfig) -> SlotAction:
    if t_ns % cfg.slot_ns:
        raise ValueError(f"{t_ns} ns is not a slot boundary")
    if pattern.owner(cfg.slot_index(t_ns)) == rnti:
        return SlotAction.TRANSMIT
    return SlotAction.RECEIVE


# --- buffer status and link adaptation ------------------------------------


@dataclass(frozen=True)
class BufferStatusReport:
    queued: Mapping[int, int]
    timestamp: int = 0


@dataclass
class AmcState:
    last_csi: CsiReport | None = None
    target_bler: float = 0.1
    fixed_mcs: int | None = None
    default_mcs: int = 0


def select_mcs(amc: AmcState, table: BlerTable | None = None) -> int:
    """Highest MCS whose BLER at the last reported SINR stays within target."""
    table = table or default_bler_table()
    if amc.fixed_mcs is not None:
        return amc.fixed_mcs
    if amc.last_csi is None:
        return amc.default_mcs
    sinr = amc.last_csi.wideband_sinr_db
    best = table.mcs_values[0]
    for m in table.mcs_values:
        if table.bler(m, sinr) <= amc.target_bler * (1 + 1e-9):
            best = m
    return best


@dataclass(frozen=True)
class Grant:
    lcid: int
    symbol_offset: int
    symbol_count: int
    mcs: int
    tbs_bytes: int


def schedule_resources(
    available_symbols: int,
    bsr: BufferStatusReport,
    mcs_by_lcid: Mapping[int, int],
    cfg: FrameConfig,
    table: BlerTable | None = None,
    first_symbol: int | None = None,
) -> list[Grant]:
    """Split the slot's data symbols among LCIDs with queued data.

    Shares are proportional to queued bytes (floored); leftover symbols go one
    each to LCIDs in ascending order. Idle LCIDs receive nothing.
    """
    active = sorted(l for l, q in bsr.queued.items() if q > 0)
    if not active or available_symbols <= 0:
        return []
    total = sum(bsr.queued[l] for l in active)
    shares = {l: available_symbols * bsr.queued[l] // total for l in active}
    left = available_symbols - sum(shares.values())
    for l in active:
        if left == 0:
            break
        shares[l] += 1
        left -= 1
    offset = cfg.control_symbols if first_symbol is None else first_symbol
    grants = []
    for l in active:
        n = shares[l]
        if n == 0:
            continue
        mcs = mcs_by_lcid[l]
        grants.append(Grant(l, offset, n, mcs, tbs_bytes(cfg, mcs, n, table)))
        offset += n
    return grants


# --- TB multiplexing ------------------------------------------------------


class MalformedTransportBlock(ValueError):
    pass


def build_transport_block(
    lcid: int,
    grant_bytes: int,
    queue: deque,
    max_tbs_bytes: int | None = None,
    counters: dict | None = None,
) -> bytes | None:
    """Pack whole SDUs from ``queue`` (FIFO) into at most ``grant_bytes``.

    SDUs are never split here. Returns None when nothing fits.
    """
    out = bytearray()
    room = grant_bytes
    while queue:
        sdu = queue[0]
        need = SUBHEADER_BYTES + len(sdu)
        if need > room:
            if not out and max_tbs_bytes is not None and need > max_tbs_bytes and counters is not None:
                counters["mac_starved"] = counters.get("mac_starved", 0) + 1
            break
        if len(sdu) > MAX_SDU_BYTES:
            raise ValueError("SDU too long for a 2-byte length field")
        queue.popleft()
        out += _SUBHEADER.pack(lcid, len(sdu))
        out += sdu
        room -= need
    return bytes(out) if out else None


def mux(sdus: Iterable[tuple[int, bytes]]) -> bytes:
    out = bytearray()
    for lcid, sdu in sdus:
        out += _SUBHEADER.pack(lcid, len(sdu))
        out += sdu
    return bytes(out)


def demux(
    payload: bytes,
    known_lcids: Iterable[int] | None = None,
    counters: dict | None = None,
) -> list[tuple[int, bytes]]:
    """Inverse of :func:`build_transport_block`. Unknown LCIDs are dropped and counted."""
    known = None if known_lcids is None else set(known_lcids)
    out = []
    pos, n = 0, len(payload)
    while pos < n:
        if payload[pos] == PADDING_LCID:
            break
        if pos + SUBHEADER_BYTES > n:
            raise MalformedTransportBlock(f"truncated subheader at byte {pos}")
        lcid, length = _SUBHEADER.unpack_from(payload, pos)
        pos += SUBHEADER_BYTES
        if pos + length > n:
            raise MalformedTransportBlock(f"SDU length {length} overruns block at byte {pos}")
        sdu = payload[pos:pos + length]
        pos += length
        if known is not None and lcid not in known:
            if counters is not None:
                counters["mac_unknown_lcid"] = counters.get("mac_unknown_lcid", 0) + 1
            continue
        out.append((lcid, sdu))
    return out


@dataclass
class LogicalChannel:
    lcid: int
    peer: int
    queue: deque = field(default_factory=deque)

    @property
    def queued_bytes(self) -> int:
        return sum(len(s) for s in self.queue)


# --- per-device MAC -------------------------------------------------------


class SidelinkMac:
    """Owns the slot loop decisions of one device.

    At each owned slot the RLC buffer status of every transmitting bearer is
    read, the data symbols are split, one RLC PDU is pulled per grant and
    packed into a transport block for the PHY. Logical channels are keyed
    by ``(peer rnti, lcid)`` since LCIDs are only unique per peer.
    """

    def __init__(
        self,
        rnti: int,
        frame: FrameConfig,
        pattern: SlotPattern,
        table: BlerTable,
        device,
        phy,
        target_bler: float = 0.1,
        fixed_mcs: int | None = None,
        default_mcs: int = 0,
    ):
        self.rnti = rnti
        self.frame = frame
        self.pattern = pattern
        self.table = table
        self.device = device
        self.phy = phy
        self.target_bler = target_bler
        self.fixed_mcs = fixed_mcs
        self.default_mcs = default_mcs
        self.amc: dict[int, AmcState] = {}
        self.channels: dict[tuple[int, int], LogicalChannel] = {}
        self.counters: dict[str, int] = {}
        # per (peer, lcid) byte accounting for the conservation check
        self.tx_bytes: dict[tuple[int, int], int] = {}
        self.rx_bytes: dict[tuple[int, int], int] = {}
        self.corrupt_bytes: dict[tuple[int, int], int] = {}
        self.on_packets = None

    def amc_for(self, peer: int) -> AmcState:
        st = self.amc.get(peer)
        if st is None:
            st = self.amc[peer] = AmcState(None, self.target_bler, self.fixed_mcs, self.default_mcs)
        return st

    def on_csi(self, peer: int, report: CsiReport) -> None:
        self.amc_for(peer).last_csi = report

    def _channel(self, peer: int, lcid: int) -> LogicalChannel:
        ch = self.channels.get((peer, lcid))
        if ch is None:
            ch = self.channels[(peer, lcid)] = LogicalChannel(lcid, peer)
        return ch

    def slot_indication(self, t_ns: int) -> list:
        if slot_indication(t_ns, self.pattern, self.rnti, self.frame) is not SlotAction.TRANSMIT:
            return []
        bearers = {(b.peer_rnti, b.lcid): b for b in self.device.transmitting_bearers()}
        queued = {}
        for key, b in bearers.items():
            q = b.rlc.buffer_status() + self._channel(*key).queued_bytes
            if q > 0:
                queued[key] = q
        if not queued:
            return []
        mcs_by = {key: select_mcs(self.amc_for(key[0]), self.table) for key in queued}
        grants = schedule_resources(
            self.frame.data_symbols, BufferStatusReport(queued, t_ns), mcs_by, self.frame, self.table
        )
        tbs = []
        for g in grants:
            peer, lcid = g.lcid
            ch = self._channel(peer, lcid)
            room = g.tbs_bytes - SUBHEADER_BYTES - ch.queued_bytes - SUBHEADER_BYTES * len(ch.queue)
            if room > 0:
                pdu = bearers[(peer, lcid)].rlc.build_pdu(min(room, MAX_SDU_BYTES))
                if pdu is not None:
                    ch.queue.append(pdu)
            sent_bytes = ch.queued_bytes
            payload = build_transport_block(lcid, g.tbs_bytes, ch.queue, g.tbs_bytes, self.counters)
            if payload is None:
                continue
            sent_bytes -= ch.queued_bytes
            self.tx_bytes[(peer, lcid)] = self.tx_bytes.get((peer, lcid), 0) + sent_bytes
            tb = TransportBlock(payload, g.mcs, g.symbol_offset, g.symbol_count, g.tbs_bytes, self.rnti, peer, lcid)
            self.phy.add_transport_block(tb)
            tbs.append(tb)
        self.counters["tx_tbs"] = self.counters.get("tx_tbs", 0) + len(tbs)
        return tbs

    def receive_tb(self, tb, now: int) -> list:
        known = {lcid for (peer, lcid) in self.device.by_channel if peer == tb.tx_rnti}
        packets = []
        for lcid, sdu in demux(tb.payload, known, self.counters):
            key = (tb.tx_rnti, lcid)
            self.rx_bytes[key] = self.rx_bytes.get(key, 0) + len(sdu)
            packets.extend(self.device.receive(tb.tx_rnti, lcid, sdu, now))
        return packets

    def note_corrupt(self, tb) -> None:
        """Account the SDU bytes of a TB this device failed to decode."""
        for lcid, sdu in demux(tb.payload):
            key = (tb.tx_rnti, lcid)
            self.corrupt_bytes[key] = self.corrupt_bytes.get(key, 0) + len(sdu)
