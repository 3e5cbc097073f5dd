"""Trace files and the end-of-run summary.

``phy_trace.csv``: one row per received TB (delivered or corrupt).
``app_trace.csv``: one row per application event (tx, rx, drop).
``summary.txt``: YAML with the effective config and the run statistics.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, TextIO

import yaml

from .phy import TraceRecord

PHY_COLUMNS = ("time_ns", "tx_rnti", "rx_rnti", "sinr_db", "mcs", "tb_bytes", "corrupt")
APP_COLUMNS = ("event", "time_ns", "flow", "seq", "src", "dst", "size", "send_time_ns")

PHY_TRACE = "phy_trace.csv"
APP_TRACE = "app_trace.csv"
SUMMARY = "summary.txt"


def format_db(x: float) -> str:
    return f"{x:.2f}"


def phy_row(rec: TraceRecord) -> list[str]:
    return [
        str(rec.time_ns), str(rec.tx_rnti), str(rec.rx_rnti), format_db(rec.sinr_db),
        str(rec.mcs), str(rec.tb_bytes), "1" if rec.corrupt else "0",
    ]


class PhyTraceWriter:
    """Incremental CSV writer; rows are flushed as they arrive."""

    def __init__(self, fh: TextIO):
        self.fh = fh
        self.writer = csv.writer(fh, lineterminator="\n")
        self.writer.writerow(PHY_COLUMNS)
        self.last_time = None
        self.rows = 0

    def __call__(self, rec: TraceRecord) -> None:
        if self.last_time is not None and rec.time_ns < self.last_time:
            raise ValueError("trace records must be time-ordered")
        self.last_time = rec.time_ns
        self.writer.writerow(phy_row(rec))
        self.rows += 1
        if self.rows % 4096 == 0:
            self.fh.flush()


def write_trace(records: Iterable[TraceRecord], fh: TextIO) -> int:
    w = PhyTraceWriter(fh)
    for r in records:
        w(r)
    fh.flush()
    return w.rows


def write_app_trace(events: Iterable, fh: TextIO) -> int:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(APP_COLUMNS)
    n = 0
    for e in events:
        w.writerow([e.kind, e.time_ns, e.flow, e.seq, e.src, e.dst, e.size, e.send_time_ns])
        n += 1
    fh.flush()
    return n


def read_phy_trace(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("time_ns", "tx_rnti", "rx_rnti", "mcs", "tb_bytes", "corrupt"):
            r[k] = int(r[k])
        r["sinr_db"] = float(r["sinr_db"])
    return rows


def read_app_trace(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in APP_COLUMNS[1:]:
            r[k] = int(r[k])
    return rows


def summary_text(effective_config: dict, statistics: dict) -> str:
    return yaml.safe_dump({"config": effective_config, "statistics": statistics}, sort_keys=False)


def replay_summary(app_rows: list[dict], duration_ns: int) -> dict[int, dict]:
    """Per-flow statistics recomputed from the app trace alone."""
    flows: dict[int, dict] = {}
    for r in app_rows:
        f = flows.setdefault(r["flow"], {"sent": 0, "received": 0, "dropped": 0, "rx_bytes": 0, "lat": 0})
        if r["event"] == "tx":
            f["sent"] += 1
        elif r["event"] == "drop":
            f["dropped"] += 1
        elif r["event"] == "rx":
            f["received"] += 1
            f["rx_bytes"] += r["size"]
            f["lat"] += r["time_ns"] - r["send_time_ns"]
    out = {}
    for fid, f in flows.items():
        out[fid] = {
            "sent": f["sent"],
            "received": f["received"],
            "dropped": f["dropped"],
            "rx_bytes": f["rx_bytes"],
            "throughput_mbps": f["rx_bytes"] * 8 / (duration_ns / 1e9) / 1e6,
            "mean_latency_ms": f["lat"] / f["received"] / 1e6 if f["received"] else None,
        }
    return out


def render_csv(write_fn, items) -> str:
    buf = io.StringIO()
    write_fn(items, buf)
    return buf.getvalue()
