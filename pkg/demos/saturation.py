"""Offered load against delivered throughput and latency for the same-lane pair.

At 100 MHz the pair saturates near 108 Mbps, after which the 500-packet RLC
queue fills and latency jumps to tens of milliseconds. At 400 MHz the same
slot carries four times the resource blocks.

    python3 demos/saturation.py
"""

from mmv2v.config import load_config
from mmv2v.scenario import build_scenario

RATES = {8.192: 1_000_000, 80.0: 102_400, 204.8: 40_000, 819.2: 10_000}

print(f"{'offered':>9} {'BW':>5} {'delivered':>10} {'latency':>10}")
for offered, interval in RATES.items():
    for bw in (100e6, 400e6):
        cfg = load_config(
            "example-one",
            [f"phy.bandwidth_hz={bw}", f"traffic.0.interval={interval}", "traffic.0.echo=false", "duration=500ms"],
        )
        f = build_scenario(cfg, record_app_events=False).run()["flows"][0]
        print(f"{offered:9.3f} {bw / 1e6:5.0f} {f['throughput_mbps']:10.2f} {f['mean_latency_ms']:8.3f} ms")
