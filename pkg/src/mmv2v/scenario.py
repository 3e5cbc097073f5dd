"""Scenario assembly: vehicles, groups, pairing, CBR traffic and run metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .channel import (
    AntennaArray,
    BlockerType,
    ChannelConfig,
    ChannelModel,
    ChannelScenario,
    LinkState,
    Mover,
    ShadowingProfile,
    noise_floor_dbm,
)
from .config import ScenarioConfig
from .kernel import NS_PER_MS, NS_PER_S, Simulator, StreamFactory
from .mac import SidelinkMac, SlotPattern
from .phy import BlerTable, FrameConfig, SidelinkPhy, SpectrumChannel, TraceRecord, default_bler_table
from .stack import Bearer, BearerError, BearerRegistry, Packet, VehicularNetDevice, address_of

# flow id, sequence number, send timestamp (ns)
APP_HEADER = struct.Struct(">IIq")
APP_HEADER_BYTES = APP_HEADER.size
ECHO_FLOW_BIT = 1 << 31
APP_PORT = 9


@dataclass(frozen=True)
class Vehicle:
    rnti: int
    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    antenna: AntennaArray = field(default_factory=AntennaArray)
    street: int | None = None


def position_at(v: Vehicle, t_ns: int) -> np.ndarray:
    if t_ns < 0:
        raise ValueError("time must be non-negative")
    return np.asarray(v.position, float) + np.asarray(v.velocity, float) * (t_ns / NS_PER_S)


def closest_approach_ns(a: Vehicle, b: Vehicle) -> int:
    """Instant (clamped at 0) minimising |p_a(t) - p_b(t)|."""
    dp = np.asarray(a.position, float) - np.asarray(b.position, float)
    dv = np.asarray(a.velocity, float) - np.asarray(b.velocity, float)
    vv = float(dv @ dv)
    if vv == 0.0:
        return 0
    return max(0, round(-float(dp @ dv) / vv * NS_PER_S))


@dataclass
class Group:
    name: str
    members: tuple[int, ...]
    pattern: SlotPattern
    bearers: list[Bearer] = field(default_factory=list)


def pair_devices(
    members: Sequence[int],
    devices: Mapping[int, VehicularNetDevice],
    registry: BearerRegistry,
) -> list[Bearer]:
    """Two directed bearers per unordered pair, with simulation-wide unique ids.

    For a pair (a, b) with a listed first, a -> b rides LCID 1 and b -> a
    rides LCID 2; each bearer is also activated (receive-only) at its far end.
    """
    if len(set(members)) != len(members):
        raise BearerError("duplicate member in group")
    out = []
    for a, b in combinations(members, 2):
        for lcid, (tx, rx) in enumerate(((a, b), (b, a)), start=1):
            bid = registry.next_id()
            out.append(devices[tx].activate_bearer(bid, rx, lcid=lcid, transmit=True))
            devices[rx].activate_bearer(bid, tx, lcid=lcid, transmit=False)
    return out


@dataclass
class CbrSource:
    flow_id: int
    src: int
    dst: int
    packet_size: int
    interval_ns: int
    start_ns: int = 0
    stop_ns: int | None = None
    echo: bool = False
    next_ns: int | None = None
    seq: int = 0

    def __post_init__(self):
        if self.interval_ns <= 0:
            raise ValueError("CBR interval must be positive")
        if self.packet_size < APP_HEADER_BYTES:
            raise ValueError(f"packet size must be at least {APP_HEADER_BYTES} bytes")
        if self.next_ns is None:
            self.next_ns = self.start_ns

    @property
    def rate_bps(self) -> float:
        return self.packet_size * 8 * NS_PER_S / self.interval_ns

    def active_at(self, t_ns: int) -> bool:
        return self.start_ns <= t_ns and (self.stop_ns is None or t_ns < self.stop_ns)


def app_payload(flow_id: int, seq: int, send_ns: int, size: int) -> bytes:
    return APP_HEADER.pack(flow_id, seq, send_ns) + bytes(size - APP_HEADER_BYTES)


def cbr_tick(src: CbrSource, t_ns: int) -> tuple[bytes, int]:
    """Emit one packet at ``t_ns``; returns the payload and the next tick time."""
    if not src.active_at(t_ns):
        raise ValueError(f"source {src.flow_id} is not active at {t_ns} ns")
    payload = app_payload(src.flow_id, src.seq, t_ns, src.packet_size)
    src.seq += 1
    src.next_ns = t_ns + src.interval_ns
    return payload, src.next_ns


# --- metrics --------------------------------------------------------------


@dataclass
class FlowStats:
    flow_id: int
    src: int
    dst: int
    packet_size: int
    interval_ns: int | None = None
    sent: int = 0
    received: int = 0
    dropped: int = 0
    rx_bytes: int = 0
    latency_sum_ns: int = 0
    min_latency_ns: int | None = None


@dataclass
class LinkSeries:
    times: list[int] = field(default_factory=list)
    sinr_db: list[float] = field(default_factory=list)
    mcs: list[int] = field(default_factory=list)
    corrupt: int = 0


@dataclass
class RunMetrics:
    flows: dict[int, FlowStats] = field(default_factory=dict)
    links: dict[tuple[int, int], LinkSeries] = field(default_factory=dict)

    def add_trace(self, rec: TraceRecord) -> None:
        ls = self.links.setdefault((rec.tx_rnti, rec.rx_rnti), LinkSeries())
        ls.times.append(rec.time_ns)
        ls.sinr_db.append(rec.sinr_db)
        ls.mcs.append(rec.mcs)
        ls.corrupt += rec.corrupt


def finalize_metrics(raw: RunMetrics, duration_ns: int) -> dict:
    """Per-flow throughput and latency plus per-link SINR/MCS means."""
    seconds = duration_ns / NS_PER_S
    flows = []
    for fid in sorted(raw.flows):
        f = raw.flows[fid]
        offered = None
        if f.interval_ns is not None:
            offered = f.packet_size * 8 * NS_PER_S / f.interval_ns / 1e6
        flows.append(
            {
                "flow": fid,
                "src": f.src,
                "dst": f.dst,
                "packet_size": f.packet_size,
                "sent": f.sent,
                "received": f.received,
                "dropped": f.dropped,
                "rx_bytes": f.rx_bytes,
                "offered_mbps": offered,
                "throughput_mbps": f.rx_bytes * 8 / seconds / 1e6,
                "mean_latency_ms": (f.latency_sum_ns / f.received / NS_PER_MS) if f.received else None,
            }
        )
    links = []
    for (tx, rx) in sorted(raw.links):
        ls = raw.links[(tx, rx)]
        n = len(ls.sinr_db)
        links.append(
            {
                "tx": tx,
                "rx": rx,
                "tbs": n,
                "corrupt": ls.corrupt,
                "mean_sinr_db": float(np.mean(ls.sinr_db)) if n else None,
                "min_sinr_db": float(np.min(ls.sinr_db)) if n else None,
                "mean_mcs": float(np.mean(ls.mcs)) if n else None,
            }
        )
    return {"duration_s": seconds, "flows": flows, "links": links}


# --- assembly -------------------------------------------------------------


@dataclass(frozen=True)
class AppEvent:
    kind: str  # "tx", "rx" or "drop"
    time_ns: int
    flow: int
    seq: int
    src: int
    dst: int
    size: int
    send_time_ns: int


class Simulation:
    """A fully wired scenario; call :meth:`run` once."""

    def __init__(self, cfg: ScenarioConfig, phy_sink=None, record_app_events: bool = True):
        self.cfg = cfg
        self.record_app_events = record_app_events
        self.duration_ns = cfg.duration
        self.sim = Simulator()
        self.streams = StreamFactory(cfg.seed)
        self.table: BlerTable = (
            BlerTable.load(cfg.phy.mcs_table) if cfg.phy.mcs_table else default_bler_table()
        )
        self.frame = FrameConfig(
            cfg.phy.numerology, cfg.phy.bandwidth_hz, cfg.phy.control_symbols, cfg.phy.tbs_overhead
        )
        self.noise_dbm = noise_floor_dbm(cfg.phy.bandwidth_hz, cfg.phy.noise_figure_db)

        self.vehicles: dict[int, Vehicle] = {}
        for v in sorted(cfg.vehicles, key=lambda v: v.rnti):
            ant = AntennaArray(
                v.antenna.elements, v.antenna.isotropic, v.antenna.boresight_deg, v.antenna.element_gain_dbi
            )
            self.vehicles[v.rnti] = Vehicle(v.rnti, tuple(v.position), tuple(v.velocity), ant, v.street)

        ch = cfg.channel
        self.channel = ChannelModel(
            ChannelConfig(
                scenario=ChannelScenario.parse(ch.scenario),
                frequency_ghz=ch.frequency_ghz,
                forced_state=LinkState.parse(ch.forced_state) if ch.forced_state else None,
                fading_mode=ch.fading,
                fading_sigma_db=ch.fading_sigma_db,
                update_period_ns=ch.update_period,
                update_distance_m=ch.update_distance_m,
                negated_exponent=ch.extended_urban_negated_exponent,
                blockers=tuple(BlockerType(b.name, b.height_m, b.weight) for b in ch.blockers),
                shadowing=ShadowingProfile(ch.shadowing.slope_db, ch.shadowing.offset_db, ch.shadowing.sigma_db),
            ),
            {r: Mover(v.position, v.velocity, v.street) for r, v in self.vehicles.items()},
            self.streams,
            {r: v.position[2] for r, v in self.vehicles.items()},
        )
        self.spectrum = SpectrumChannel(
            self.channel, {r: v.antenna for r, v in self.vehicles.items()}, ch.simple_interference_gain
        )

        self.registry = BearerRegistry()
        self.devices: dict[int, VehicularNetDevice] = {}
        self.phys: dict[int, SidelinkPhy] = {}
        self.macs: dict[int, SidelinkMac] = {}
        self.groups: list[Group] = []
        self.metrics = RunMetrics()
        self.phy_records: list[TraceRecord] = []
        self.app_events: list[AppEvent] = []
        self._phy_sink = phy_sink

        S = self.frame.slots_per_subframe
        patterns: dict[int, SlotPattern] = {}
        for g in cfg.groups:
            if g.name in cfg.mac.slot_patterns:
                pat = SlotPattern.from_assignments(cfg.mac.slot_patterns[g.name], S)
            else:
                pat = SlotPattern.default(g.members, S)
            self.groups.append(Group(g.name, tuple(g.members), pat))
            for m in g.members:
                patterns[m] = pat

        override = cfg.effective_mcs_override()
        for rnti in self.vehicles:
            dev = VehicularNetDevice(rnti, self.registry, cfg.stack.rlc_capacity, cfg.stack.rlc_capacity_unit)
            phy = SidelinkPhy(
                rnti, self.sim, self.frame, self.spectrum, self.table,
                cfg.phy.tx_power_dbm, self.noise_dbm, self.streams,
            )
            mac = SidelinkMac(
                rnti, self.frame, patterns.get(rnti, SlotPattern({}, S)), self.table, dev, phy,
                cfg.mac.target_bler, override, cfg.mac.default_mcs,
            )
            phy.on_receive = mac.receive_tb
            phy.on_corrupt = mac.note_corrupt
            phy.on_trace = self._record_phy
            phy.on_csi = self._feedback_from(rnti)
            dev.receive_callback = self._sink_for(rnti)
            self.devices[rnti], self.phys[rnti], self.macs[rnti] = dev, phy, mac

        for g in self.groups:
            g.bearers = pair_devices(g.members, self.devices, self.registry)

        self.sources: list[CbrSource] = []
        self._by_device: dict[int, list[CbrSource]] = {}
        self._echo: set[int] = set()
        for i, t in enumerate(cfg.traffic):
            stop = self.duration_ns if t.stop is None else min(t.stop, self.duration_ns)
            src = CbrSource(i, t.src, t.dst, t.packet_size, t.interval, t.start, stop, t.echo)
            self.sources.append(src)
            self._by_device.setdefault(t.src, []).append(src)
            self.metrics.flows[i] = FlowStats(i, t.src, t.dst, t.packet_size, t.interval)
            if t.echo:
                self._echo.add(i)
                self.metrics.flows[i | ECHO_FLOW_BIT] = FlowStats(i | ECHO_FLOW_BIT, t.dst, t.src, t.packet_size)

        self._ran = False

    # -- wiring callbacks --

    def _record_phy(self, rec: TraceRecord) -> None:
        self.phy_records.append(rec)
        self.metrics.add_trace(rec)
        if self._phy_sink is not None:
            self._phy_sink(rec)

    def _feedback_from(self, rx: int):
        def feedback(tx: int, report) -> None:
            self.macs[tx].on_csi(rx, report)

        return feedback

    def _sink_for(self, rnti: int):
        def sink(pkt: Packet) -> None:
            flow, seq, sent = APP_HEADER.unpack_from(pkt.payload, 0)
            st = self.metrics.flows.get(flow)
            if st is None or st.dst != rnti:
                return
            size = len(pkt.payload)
            lat = pkt.rx_time - sent
            st.received += 1
            st.rx_bytes += size
            st.latency_sum_ns += lat
            st.min_latency_ns = lat if st.min_latency_ns is None else min(st.min_latency_ns, lat)
            if self.record_app_events:
                self.app_events.append(AppEvent("rx", pkt.rx_time, flow, seq, st.src, rnti, size, sent))
            if flow in self._echo:
                self._flush_sources(rnti, pkt.rx_time)
                self._send(rnti, st.src, flow | ECHO_FLOW_BIT, seq, pkt.rx_time, size)

        return sink

    def _send(self, src: int, dst: int, flow: int, seq: int, t_ns: int, size: int) -> None:
        st = self.metrics.flows[flow]
        st.sent += 1
        pkt = Packet(address_of(src), address_of(dst), app_payload(flow, seq, t_ns, size), APP_PORT, APP_PORT)
        if self.record_app_events:
            self.app_events.append(AppEvent("tx", t_ns, flow, seq, src, dst, size, t_ns))
        if not self.devices[src].send(pkt):
            st.dropped += 1
            if self.record_app_events:
                self.app_events.append(AppEvent("drop", t_ns, flow, seq, src, dst, size, t_ns))

    def _flush_sources(self, rnti: int, until_ns: int) -> None:
        # Packets are generated lazily: the RLC queue is only read at slot
        # boundaries, so catching up before each read preserves queue order.
        dev = self.devices[rnti]
        for src in self._by_device.get(rnti, ()):
            while src.next_ns <= until_ns and src.active_at(src.next_ns):
                t = src.next_ns
                last = until_ns if src.stop_ns is None else min(until_ns, src.stop_ns - 1)
                n = (last - t) // src.interval_ns + 1
                probe = Packet(dev.address, address_of(src.dst), bytes(src.packet_size), APP_PORT, APP_PORT)
                if n > 1 and dev.drop_burst(probe, n):
                    # queue is full and nothing drains it before the next slot
                    self._bulk_drop(src, n)
                    continue
                seq = src.seq
                cbr_tick(src, t)
                self._send(src.src, src.dst, src.flow_id, seq, t, src.packet_size)

    def _bulk_drop(self, src: CbrSource, n: int) -> None:
        st = self.metrics.flows[src.flow_id]
        st.sent += n
        st.dropped += n
        if self.record_app_events:
            for k in range(n):
                t = src.next_ns + k * src.interval_ns
                seq = src.seq + k
                self.app_events.append(AppEvent("tx", t, src.flow_id, seq, src.src, src.dst, src.packet_size, t))
                self.app_events.append(AppEvent("drop", t, src.flow_id, seq, src.src, src.dst, src.packet_size, t))
        src.seq += n
        src.next_ns += n * src.interval_ns

    def _slot_tick(self, t: int) -> None:
        if t > 0 and t % self.cfg.phy.csi_period == 0:
            for phy in self.phys.values():
                phy.csi_tick(t)
        for rnti in self.devices:
            self._flush_sources(rnti, t)
        for mac in self.macs.values():
            mac.slot_indication(t)
        for phy in self.phys.values():
            phy.start_slot(t)
        nxt = t + self.frame.slot_ns
        if nxt < self.duration_ns:
            self.sim.schedule(nxt, self._slot_tick, nxt)

    # -- running --

    def run(self) -> dict:
        if self._ran:
            raise RuntimeError("a simulation instance runs once")
        self._ran = True
        self.sim.schedule(0, self._slot_tick, 0)
        stats = self.sim.run_until(self.duration_ns)
        for rnti in self.devices:
            self._flush_sources(rnti, self.duration_ns)
        summary = finalize_metrics(self.metrics, self.duration_ns)
        summary["events_executed"] = stats.events_executed
        summary["counters"] = self.counters()
        return summary

    def counters(self) -> dict[str, int]:
        out: dict[str, int] = {}

        def add(d):
            for k, v in d.items():
                out[k] = out.get(k, 0) + v

        for rnti in self.devices:
            dev = self.devices[rnti]
            add(dev.counters)
            add(self.phys[rnti].counters)
            add(self.macs[rnti].counters)
            for b in dev.bearers.values():
                add({f"rlc_{k}": v for k, v in b.rlc.counters.items()})
                add({f"pdcp_{k}": v for k, v in b.pdcp.counters.items()})
        add({f"channel_{k}": v for k, v in self.channel.stats.items()})
        return dict(sorted(out.items()))

    def sorted_app_events(self) -> list[AppEvent]:
        return sorted(self.app_events, key=lambda e: e.time_ns)


def build_scenario(cfg: ScenarioConfig, phy_sink=None, record_app_events: bool = True) -> Simulation:
    return Simulation(cfg, phy_sink, record_app_events)
