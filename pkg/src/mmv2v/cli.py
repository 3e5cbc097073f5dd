"""Command-line entry point.

    mmv2v run <config> [--duration D] [--seed S] [--set path=value]... [--out DIR]
    mmv2v sweep <config> --param path=v1,v2,... [--param ...] --seeds N [--out DIR]
    mmv2v list

``<config>`` is a YAML file or the name of a shipped scenario. The output
directory defaults to ``$MMV2V_OUT`` and then ``./mmv2v-out/<name>``.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, effective_config_dict, load_config, shipped_scenarios
from .scenario import build_scenario
from .traces import APP_TRACE, PHY_TRACE, SUMMARY, PhyTraceWriter, summary_text, write_app_trace

OUT_ENV = "MMV2V_OUT"


def _overrides(args) -> list[str]:
    out = []
    if getattr(args, "duration", None):
        out.append(f"duration={args.duration}")
    if getattr(args, "seed", None) is not None:
        out.append(f"seed={args.seed}")
    out.extend(getattr(args, "set", None) or [])
    return out


def output_dir(cli_value: str | None, name: str) -> Path:
    if cli_value:
        return Path(cli_value)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path("mmv2v-out") / name


def run_to_dir(cfg, out: Path) -> dict:
    """Run one scenario and write its three output files into ``out``.

    Files are written under temporary names and renamed at the end, so a
    failed run leaves nothing behind.
    """
    out.mkdir(parents=True, exist_ok=True)
    final = {k: out / k for k in (PHY_TRACE, APP_TRACE, SUMMARY)}
    tmp = {k: out / f".{k}.partial" for k in final}
    try:
        with open(tmp[PHY_TRACE], "w", newline="") as fh:
            sim = build_scenario(cfg, PhyTraceWriter(fh))
            stats = sim.run()
        with open(tmp[APP_TRACE], "w", newline="") as fh:
            write_app_trace(sim.sorted_app_events(), fh)
        tmp[SUMMARY].write_text(summary_text(effective_config_dict(cfg), stats))
        for k in final:
            os.replace(tmp[k], final[k])
    finally:
        for p in tmp.values():
            if p.exists():
                p.unlink()
    return stats


def _print_stats(stats: dict, stream=sys.stdout) -> None:
    for f in stats["flows"]:
        lat = f["mean_latency_ms"]
        lat_s = "n/a" if lat is None else f"{lat:.3f} ms"
        print(
            f"flow {f['flow']}: {f['src']}->{f['dst']} sent={f['sent']} received={f['received']} "
            f"throughput={f['throughput_mbps']:.3f} Mbps latency={lat_s}",
            file=stream,
        )
    for ln in stats["links"]:
        sinr = ln["mean_sinr_db"]
        print(
            f"link {ln['tx']}->{ln['rx']}: tbs={ln['tbs']} corrupt={ln['corrupt']} "
            f"mean_sinr={'n/a' if sinr is None else f'{sinr:.2f} dB'}",
            file=stream,
        )


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = output_dir(args.out, cfg.name)
    stats = run_to_dir(cfg, out)
    _print_stats(stats)
    print(f"outputs written to {out}")
    return 0


def _sweep_one(job):
    ref, overrides, out = job
    cfg = load_config(ref, overrides)
    stats = run_to_dir(cfg, Path(out))
    return overrides, stats


def _parse_param(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ConfigError([(spec, "expected path=v1,v2,...")])
    path, values = spec.split("=", 1)
    vals = [v for v in values.split(",") if v != ""]
    if not vals:
        raise ConfigError([(path, "no values given")])
    return path, vals


def cmd_sweep(args) -> int:
    base = load_config(args.config, _overrides(args))
    params = [_parse_param(p) for p in args.param]
    root = output_dir(args.out, base.name + "-sweep")
    jobs = []
    for combo in itertools.product(*[[(p, v) for v in vals] for p, vals in params]):
        label = "_".join(f"{p.replace('.', '-')}={v}" for p, v in combo) or "base"
        for s in range(args.seeds):
            seed = base.seed + s
            ov = _overrides(args) + [f"{p}={v}" for p, v in combo] + [f"seed={seed}"]
            load_config(args.config, ov)  # validate every point before launching anything
            jobs.append((args.config, ov, str(root / label / f"seed-{seed}")))
    if args.jobs == 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    for ov, stats in results:
        tput = sum(f["throughput_mbps"] for f in stats["flows"])
        print(" ".join(ov[len(_overrides(args)):]) + f" -> total throughput {tput:.3f} Mbps")
    print(f"{len(results)} runs written under {root}")
    return 0


def cmd_list(args) -> int:
    for name in shipped_scenarios():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmv2v", description="mmWave V2V sidelink simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML file or shipped scenario name")
        sp.add_argument("--duration", help="simulated time, e.g. 2s or 500ms")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="PATH=VALUE", help="dotted-path override")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./mmv2v-out/<name>)")

    r = sub.add_parser("run", help="run one scenario")
    common(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a parameter grid over several seeds")
    common(s)
    s.add_argument("--param", action="append", default=[], metavar="PATH=V1,V2")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    s.set_defaults(func=cmd_sweep)

    ls = sub.add_parser("list", help="list shipped scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
