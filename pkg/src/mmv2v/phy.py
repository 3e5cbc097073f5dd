"""Sidelink PHY: frame timing, transport-block sizing, the shared spectrum,
interference-aware SINR, the BLER error model and CSI reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .channel import AntennaArray, ChannelModel, db_to_lin, lin_to_db
from .kernel import NS_PER_MS, RandomStream

SYMBOLS_PER_SLOT = 14
SUBFRAME_NS = NS_PER_MS
FRAME_NS = 10 * NS_PER_MS
SUBFRAMES_PER_FRAME = 10


@dataclass(frozen=True)
class FrameConfig:
    numerology: int = 2
    bandwidth_hz: float = 100e6
    control_symbols: int = 2
    # extra fractional overhead applied inside tbs_bytes on top of the reserved symbols
    tbs_overhead: float = 0.0

    def __post_init__(self):
        if self.numerology not in (2, 3):
            raise ValueError(f"numerology must be 2 or 3, got {self.numerology}")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0 <= self.control_symbols < SYMBOLS_PER_SLOT:
            raise ValueError("control_symbols must leave at least one data symbol")

    @property
    def scs_khz(self) -> int:
        return 15 * 2**self.numerology

    @property
    def slots_per_subframe(self) -> int:
        return 2**self.numerology

    @property
    def slot_ns(self) -> int:
        return SUBFRAME_NS // self.slots_per_subframe

    @property
    def symbols_per_slot(self) -> int:
        return SYMBOLS_PER_SLOT

    @property
    def data_symbols(self) -> int:
        return SYMBOLS_PER_SLOT - self.control_symbols

    @property
    def n_rb(self) -> int:
        return int(self.bandwidth_hz // (12 * self.scs_khz * 1e3))

    def symbol_boundary_ns(self, k: int) -> int:
        """Offset of symbol edge ``k`` (0..14) from the slot start, rounded to the nearest ns."""
        return (self.slot_ns * k * 2 + SYMBOLS_PER_SLOT) // (2 * SYMBOLS_PER_SLOT)

    def symbols_duration_ns(self, offset: int, count: int) -> int:
        return self.symbol_boundary_ns(offset + count) - self.symbol_boundary_ns(offset)

    @property
    def symbol_ns(self) -> float:
        return self.slot_ns / SYMBOLS_PER_SLOT

    def slot_index(self, t_ns: int) -> int:
        """Index of the slot containing ``t_ns`` within its subframe."""
        return (t_ns % SUBFRAME_NS) // self.slot_ns


# --- MCS / BLER table -----------------------------------------------------


@dataclass(frozen=True)
class McsEntry:
    mcs: int
    modulation_bits: int
    code_rate: float
    threshold_db: float
    width_db: float

    @property
    def spectral_efficiency(self) -> float:
        return self.modulation_bits * self.code_rate


class BlerTable:
    """Per-MCS logistic BLER curves: BLER = 1 / (1 + exp((sinr - threshold) / width))."""

    def __init__(self, entries: Iterable[McsEntry]):
        self.entries = {e.mcs: e for e in entries}
        self._validate()

    def _validate(self):
        idx = sorted(self.entries)
        if not idx or idx != list(range(idx[0], idx[-1] + 1)):
            raise ValueError("MCS indices must be contiguous")
        prev = None
        for m in idx:
            e = self.entries[m]
            if e.modulation_bits not in (2, 4, 6, 8):
                raise ValueError(f"MCS {m}: modulation order {e.modulation_bits} not in {{2,4,6,8}}")
            if not 0.0 < e.code_rate < 1.0:
                raise ValueError(f"MCS {m}: code rate {e.code_rate} outside (0, 1)")
            if e.width_db <= 0:
                raise ValueError(f"MCS {m}: transition width must be positive")
            if prev is not None and e.threshold_db <= prev.threshold_db:
                raise ValueError(f"MCS {m}: thresholds must increase with MCS")
            prev = e

    @property
    def mcs_values(self) -> list[int]:
        return sorted(self.entries)

    @property
    def max_mcs(self) -> int:
        return max(self.entries)

    def __getitem__(self, mcs: int) -> McsEntry:
        return self.entries[mcs]

    def __contains__(self, mcs: int) -> bool:
        return mcs in self.entries

    def bler(self, mcs: int, sinr_db: float) -> float:
        e = self.entries[mcs]
        x = (e.threshold_db - sinr_db) / e.width_db
        if x >= 0:
            z = math.exp(-x)
            return 1.0 / (1.0 + z)
        z = math.exp(x)
        return z / (1.0 + z)

    @classmethod
    def from_text(cls, text: str) -> "BlerTable":
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 5:
                raise ValueError(f"line {lineno}: expected 5 columns, got {len(parts)}")
            rows.append(
                McsEntry(int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]))
            )
        return cls(rows)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "BlerTable":
        if path is None:
            text = resources.files("mmv2v").joinpath("data/mcs_table.txt").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_text(text)


_DEFAULT_TABLE: BlerTable | None = None


def default_bler_table() -> BlerTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = BlerTable.load()
    return _DEFAULT_TABLE


def tbs_bytes(
    cfg: FrameConfig,
    mcs: int,
    symbol_count: int,
    table: BlerTable | None = None,
    overhead: float | None = None,
    n_rb: int | None = None,
) -> int:
    if symbol_count <= 0:
        return 0
    table = table or default_bler_table()
    e = table[mcs]
    overhead = cfg.tbs_overhead if overhead is None else overhead
    n_rb = cfg.n_rb if n_rb is None else n_rb
    bits = math.floor(symbol_count * n_rb * 12 * e.modulation_bits * e.code_rate * (1.0 - overhead))
    return bits // 8


# --- transport blocks and the shared spectrum -----------------------------


@dataclass
class TransportBlock:
    payload: bytes
    mcs: int
    symbol_offset: int
    symbol_count: int
    tbs_bytes: int
    tx_rnti: int
    rx_rnti: int
    lcid: int = 0

    def __post_init__(self):
        if len(self.payload) > self.tbs_bytes:
            raise ValueError(f"payload {len(self.payload)} B exceeds TBS {self.tbs_bytes} B")
        if self.symbol_count < 1:
            raise ValueError("a transport block needs at least one symbol")


@dataclass
class SpectrumSignal:
    tx_rnti: int
    start: int
    duration: int
    tx_power_dbm: float
    n_rb: int
    tb: TransportBlock

    @property
    def end(self) -> int:
        return self.start + self.duration

    @property
    def rx_rnti(self) -> int:
        return self.tb.rx_rnti

    @property
    def psd_dbm_per_rb(self) -> float:
        return self.tx_power_dbm - 10.0 * math.log10(self.n_rb)

    def overlaps(self, other: "SpectrumSignal") -> bool:
        return self.start < other.end and other.start < self.end


class TransmissionOverlapError(RuntimeError):
    pass


def effective_sinr_linear(
    start: int,
    end: int,
    signal_mw: float,
    noise_mw: float,
    interferers: Sequence[tuple[int, int, float]],
) -> float:
    """Time-average of S / (N + I(t)) over [start, end) with piecewise-constant I(t)."""
    edges = {start, end}
    for a, b, _ in interferers:
        if a > start and a < end:
            edges.add(a)
        if b > start and b < end:
            edges.add(b)
    pts = sorted(edges)
    total = 0.0
    for lo, hi in zip(pts, pts[1:]):
        i_mw = 0.0
        for a, b, p in interferers:
            if a <= lo and b >= hi:
                i_mw += p
        total += (hi - lo) * signal_mw / (noise_mw + i_mw)
    return total / (end - start)


def sinr_db(
    target: SpectrumSignal,
    overlapping: Sequence[SpectrumSignal],
    power_at_rx_dbm: Callable[[SpectrumSignal], float],
    noise_dbm: float,
) -> float:
    """SINR of ``target`` at its receiver given the concurrent signals."""
    s_mw = db_to_lin(power_at_rx_dbm(target))
    interf = [
        (max(o.start, target.start), min(o.end, target.end), db_to_lin(power_at_rx_dbm(o)))
        for o in overlapping
        if o is not target and o.overlaps(target)
    ]
    return lin_to_db(effective_sinr_linear(target.start, target.end, s_mw, db_to_lin(noise_dbm), interf))


def decode(tb: TransportBlock, sinr: float, table: BlerTable, stream: RandomStream) -> bool:
    """True if delivered; one uniform draw per call regardless of outcome."""
    return stream.uniform() >= table.bler(tb.mcs, sinr)


class SpectrumChannel:
    """Registry of in-flight signals shared by every attached device.

    The received power of a signal at a device combines the link loss from
    the channel model with the transmitter's beam (aimed at its own peer)
    and the receiver's beam (aimed at the transmitter it wants to hear).
    """

    def __init__(
        self,
        channel: ChannelModel,
        arrays: Mapping[int, AntennaArray],
        simple_interference_gain: bool = False,
    ):
        self.channel = channel
        self.arrays = dict(arrays)
        self.simple_interference_gain = simple_interference_gain
        self.signals: list[SpectrumSignal] = []
        self.receivers: dict[int, object] = {}
        self._horizon = 0

    def attach(self, rnti: int, phy) -> None:
        self.receivers[rnti] = phy

    def deliver(self, signal: SpectrumSignal) -> None:
        """End-of-signal hook: the intended receiver decodes the TB."""
        rx = self.receivers.get(signal.rx_rnti)
        if rx is not None:
            rx.end_rx(signal)

    def start_tx(self, signal: SpectrumSignal) -> SpectrumSignal:
        self._prune(signal.start)
        for s in self.signals:
            if s.tx_rnti == signal.tx_rnti and s.overlaps(signal):
                raise TransmissionOverlapError(
                    f"device {signal.tx_rnti} already transmitting in [{s.start}, {s.end})"
                )
        self.signals.append(signal)
        return signal

    def _prune(self, now: int) -> None:
        # keep anything that may still overlap a signal starting now or later
        if now - self._horizon < SUBFRAME_NS:
            return
        self._horizon = now
        keep_after = now - SUBFRAME_NS
        self.signals = [s for s in self.signals if s.end > keep_after]

    def overlapping(self, target: SpectrumSignal) -> list[SpectrumSignal]:
        return [s for s in self.signals if s is not target and s.overlaps(target)]

    def _azimuth(self, a: int, b: int, t_ns: int) -> float:
        pa = self.channel.movers[a].at(t_ns)
        pb = self.channel.movers[b].at(t_ns)
        return math.atan2(pb[1] - pa[1], pb[0] - pa[0])

    def gain_db(self, signal: SpectrumSignal, rx: int, rx_aim: int, t_ns: int) -> float:
        tx = signal.tx_rnti
        intended = rx == signal.rx_rnti and rx_aim == tx
        tx_arr, rx_arr = self.arrays[tx], self.arrays[rx]
        if intended:
            return tx_arr.gain_db(0.0, 0.0) + rx_arr.gain_db(0.0, 0.0)
        if self.simple_interference_gain:
            return 0.0
        g_tx = tx_arr.gain_db(self._azimuth(tx, signal.rx_rnti, t_ns), self._azimuth(tx, rx, t_ns))
        g_rx = rx_arr.gain_db(self._azimuth(rx, rx_aim, t_ns), self._azimuth(rx, tx, t_ns))
        return g_tx + g_rx

    def power_at_dbm(self, signal: SpectrumSignal, rx: int, rx_aim: int, t_ns: int) -> float:
        return (
            signal.tx_power_dbm
            - self.channel.loss_db(signal.tx_rnti, rx, t_ns)
            + self.gain_db(signal, rx, rx_aim, t_ns)
        )

    def sinr_db(self, target: SpectrumSignal, noise_dbm: float) -> float:
        rx, tx, t = target.rx_rnti, target.tx_rnti, target.start
        return sinr_db(
            target,
            self.overlapping(target),
            lambda s: self.power_at_dbm(s, rx, tx, t),
            noise_dbm,
        )


# --- CSI ------------------------------------------------------------------


@dataclass(frozen=True)
class CsiReport:
    wideband_sinr_db: float
    timestamp: int


@dataclass
class CsiTracker:
    """SINR measurements for one (receiver, transmitter) pair."""

    window: list[float] = field(default_factory=list)
    last: CsiReport | None = None

    def add(self, sinr: float) -> None:
        self.window.append(sinr)

    def tick(self, now: int) -> CsiReport | None:
        self.last = csi_tick(self.window, now, self.last)
        self.window = []
        return self.last


def csi_tick(measurements_db: Sequence[float], now: int, last: CsiReport | None = None) -> CsiReport | None:
    """Linear average of the window's SINRs; falls back to the previous report."""
    if not measurements_db:
        return last
    mean = sum(db_to_lin(x) for x in measurements_db) / len(measurements_db)
    return CsiReport(lin_to_db(mean), now)


# --- per-device PHY -------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    time_ns: int
    tx_rnti: int
    rx_rnti: int
    sinr_db: float
    mcs: int
    tb_bytes: int
    corrupt: bool


class SidelinkPhy:
    """Transmission buffer, slot-aligned transmit and the receive/decode path.

    TBs handed over by the MAC during a slot indication go on air at
    ``slot_start + symbol_offset`` once :meth:`start_slot` runs. A TB is
    decoded by its intended receiver when its last symbol ends.
    """

    def __init__(
        self,
        rnti: int,
        sim,
        frame: FrameConfig,
        spectrum: SpectrumChannel,
        table: BlerTable,
        tx_power_dbm: float,
        noise_dbm: float,
        streams,
    ):
        self.rnti = rnti
        self.sim = sim
        self.frame = frame
        self.spectrum = spectrum
        self.table = table
        self.tx_power_dbm = tx_power_dbm
        self.noise_dbm = noise_dbm
        self.streams = streams
        self.tx_buffer: list[TransportBlock] = []
        self.csi: dict[int, CsiTracker] = {}
        self.counters: dict[str, int] = {}
        self.on_receive: Callable[[TransportBlock, int], None] | None = None
        self.on_corrupt: Callable[[TransportBlock], None] | None = None
        self.on_csi: Callable[[int, CsiReport], None] | None = None
        self.on_trace: Callable[[TraceRecord], None] | None = None
        spectrum.attach(rnti, self)

    def add_transport_block(self, tb: TransportBlock) -> None:
        if tb.tx_rnti != self.rnti:
            raise ValueError("transport block belongs to another device")
        self.tx_buffer.append(tb)

    def start_slot(self, slot_start: int) -> list[SpectrumSignal]:
        sent = []
        for tb in self.tx_buffer:
            sig = SpectrumSignal(
                self.rnti,
                slot_start + self.frame.symbol_boundary_ns(tb.symbol_offset),
                self.frame.symbols_duration_ns(tb.symbol_offset, tb.symbol_count),
                self.tx_power_dbm,
                self.frame.n_rb,
                tb,
            )
            self.spectrum.start_tx(sig)
            self.sim.schedule(sig.end, self.spectrum.deliver, sig)
            sent.append(sig)
        self.tx_buffer = []
        return sent

    def end_rx(self, signal: SpectrumSignal) -> None:
        tb = signal.tb
        sinr = self.spectrum.sinr_db(signal, self.noise_dbm)
        ok = decode(tb, sinr, self.table, self.streams.get(f"phy/decode/{tb.tx_rnti}-{self.rnti}"))
        self.csi.setdefault(tb.tx_rnti, CsiTracker()).add(sinr)
        key = "rx_tbs" if ok else "rx_corrupt_tbs"
        self.counters[key] = self.counters.get(key, 0) + 1
        if self.on_trace is not None:
            self.on_trace(TraceRecord(signal.end, tb.tx_rnti, self.rnti, sinr, tb.mcs, tb.tbs_bytes, not ok))
        if ok:
            if self.on_receive is not None:
                self.on_receive(tb, signal.end)
        elif self.on_corrupt is not None:
            self.on_corrupt(tb)

    def csi_tick(self, now: int) -> None:
        for tx in sorted(self.csi):
            tracker = self.csi[tx]
            fresh = bool(tracker.window)
            report = tracker.tick(now)
            if fresh and report is not None and self.on_csi is not None:
                self.on_csi(tx, report)
