"""Experiment harness: parameter sweeps over scenario files, CSV output and
hop-by-hop packet traces.

    statefulsdn-exp --scenario norway --rates 20:200:20 --rtt-ms 0,3,6,12 --out losses.csv
    statefulsdn-exp --scenario norway --trace 'd22-10#100'
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import scenario as scn
from .apps import tag_name
from .errors import ConfigError, StatefulSdnError, UnknownFlow
from .pipeline import CONTROLLER
from .simnet import MetricsLog, US_PER_MS, measure_processing_time, run

CONSISTENCY_RATES = list(range(100, 2001, 100))
FAILURE_RATES = list(range(20, 201, 20))
RTTS_MS = [0, 3, 6, 12]

CONSISTENCY_COLUMNS = ["rate", "mode", "rtt", "mean_processing_time", "p95_processing_time", "losses"]
FAILURE_COLUMNS = ["rate", "mode", "rtt", "total_losses", "mean_demand_losses", "recovery_delay", "restored_at"]

CONSISTENCY_NOTE = ("# OF: packets of a new flow that arrive before its pin is installed are forwarded via the controller\n"
             "# processing times come from the latency model (RTT + controller processing); "
             "wall-clock emulation peaks are not reproduced")
FAILURE_NOTE = "# OS recovery_delay is 0 by convention: bounced packets are never dropped"


@dataclass
class Sweep:
    scenario: scn.ScenarioSpec
    rates: list
    rtts: list  # microseconds
    modes: list = field(default_factory=lambda: ["os", "of"])
    reps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("repetitions must be at least 1")
        if any(r < 0 for r in self.rates):
            raise ConfigError("rates must be non-negative")
        for m in self.modes:
            if m not in scn.MODES:
                raise ConfigError(f"unknown mode {m!r}")

    def cells(self):
        for rate in self.rates:
            for mode in sorted(self.modes):
                for rtt in self.rtts:
                    yield rate, mode, rtt


def nearest_rank(values, q: float):
    s = sorted(values)
    return s[max(0, math.ceil(q * len(s)) - 1)]


def _num(x):
    return int(x) if x == int(x) else f"{x:.3f}"


def _consistency_cell(spec, rate, mode, rtt, reps, seed):
    times, losses = [], 0
    for rep in range(reps):
        log = run(scn.build(spec, mode, rtt=rtt, rate=rate, seed=seed + rep), spec.until)
        losses += log.count("dropped")
        times += [measure_processing_time(log, f) for f in log.flows]
    mean = sum(times) / len(times) if times else 0.0
    return {
        "rate": rate, "mode": mode, "rtt": rtt,
        "mean_processing_time": f"{mean:.3f}",
        "p95_processing_time": nearest_rank(times, 0.95) if times else 0,
        "losses": _num(losses / reps),
    }


def restoration_time(log: MetricsLog, mode: str):
    """Latest instant at which a demand went back to its primary path, or None."""
    if mode == "of":
        return max((t for t, _, _ in log.restorations), default=None)
    latest = None
    for rec in log.packets.values():
        for c in rec.copies:
            for h in c.hops:
                if h.state_before and h.state_after == 0:
                    latest = h.arrive if latest is None else max(latest, h.arrive)
    return latest


def failure_row(rate, mode, rtt, logs, n_demands) -> dict:
    """One failure-sweep CSV row from the logs of all repetitions of a cell."""
    total, delays, restored = 0, [], []
    for log in logs:
        total += log.count("dropped")
        delays += [upd - sent for sent, upd, _, _ in log.recoveries]
        restored.append(restoration_time(log, mode))
    rec_delay = 0 if mode == "os" or not delays else round(sum(delays) / len(delays))
    restored_at = "" if any(r is None for r in restored) else max(restored)
    return {
        "rate": rate, "mode": mode, "rtt": rtt,
        "total_losses": _num(total / len(logs)),
        "mean_demand_losses": f"{total / len(logs) / max(1, n_demands):.3f}",
        "recovery_delay": rec_delay,
        "restored_at": restored_at,
    }


def _failure_cell(spec, rate, mode, rtt, reps, seed):
    logs = [run(scn.build(spec, mode, rtt=rtt, rate=rate, seed=seed + rep), spec.until) for rep in range(reps)]
    return failure_row(rate, mode, rtt, logs, len(spec.demands))


def _run_cells(fn, sweep: Sweep, jobs: int) -> list:
    cells = list(sweep.cells())
    args = [(sweep.scenario, rate, mode, rtt, sweep.reps, sweep.seed) for rate, mode, rtt in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(fn, *zip(*args)))
    else:
        rows = [fn(*a) for a in args]
    got = [(r["rate"], r["mode"], r["rtt"]) for r in rows]
    if got != cells:
        raise StatefulSdnError("sweep lost or duplicated cells")
    return rows


def run_consistency_sweep(sweep: Sweep, jobs: int = 1) -> list:
    if sweep.scenario.kind != "consistency":
        raise ConfigError("consistency sweep needs a consistency scenario")
    return _run_cells(_consistency_cell, sweep, jobs)


def run_failure_sweep(sweep: Sweep, jobs: int = 1) -> list:
    if sweep.scenario.kind != "failure_recovery":
        raise ConfigError("failure sweep needs a failure_recovery scenario")
    return _run_cells(_failure_cell, sweep, jobs)


def to_csv(rows, columns, note=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if note:
        buf.write(note + "\n")
    return buf.getvalue()


# -- traces ------------------------------------------------------------------

def _label(v, tags: bool) -> str:
    if v is None:
        return "-"
    if tags and v:
        return tag_name(v)
    return str(v)


def emit_trace(log: MetricsLog, flow_id: str, tags: bool = True) -> str:
    """Per-hop text trace of a packet (``flow#seq``) or of every packet of a flow."""
    if "#" in flow_id:
        rec = log.packets.get(flow_id)
        if rec is None:
            raise UnknownFlow(flow_id)
        records = [rec]
    else:
        records = log.flow_packets(flow_id)
    lines = []
    for rec in records:
        lines.append(f"packet {rec.pkt_id} created={rec.created_at} status={rec.status}")
        for n, c in enumerate(rec.copies):
            path = "->".join(h.node for h in c.hops)
            lines.append(f"  copy {n} {c.status}{' ' + c.reason if c.reason else ''} at={c.time} path={path}")
            for h in c.hops:
                out = "controller" if h.out_port == CONTROLLER else _label(h.out_port, False)
                parts = [f"    t={h.arrive}", f"node={h.node}", f"in={_label(h.in_port, False)}", f"out={out}"]
                if h.tag_in is not None or h.tag_out is not None:
                    parts.append(f"tag={_label(h.tag_in, tags)}>{_label(h.tag_out, tags)}")
                if h.state_before is not None:
                    parts.append(f"state={_label(h.state_before, tags)}>{_label(h.state_after, tags)}")
                lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


# -- command line ------------------------------------------------------------

def _parse_rates(text: str) -> list:
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        if step <= 0:
            raise argparse.ArgumentTypeError("step must be positive")
        out, k = [], 0
        while start + k * step <= stop + 1e-9:
            v = start + k * step
            out.append(int(v) if v == int(v) else v)
            k += 1
        return out
    return [int(x) if float(x) == int(float(x)) else float(x) for x in text.split(",")]


def _parse_rtts(text: str) -> list:
    return [round(float(x) * US_PER_MS) for x in text.split(",")]


def _resolve_scenario(name: str) -> scn.ScenarioSpec:
    p = Path(name)
    if p.exists():
        return scn.load(p)
    return scn.load_bundled(name)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="statefulsdn-exp", description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", required=True, help="scenario file, or a bundled name (norway, consistency)")
    ap.add_argument("--mode", choices=["os", "of", "both"], default="both")
    ap.add_argument("--rtt-ms", type=_parse_rtts, default=None, help="comma separated, default 0,3,6,12")
    ap.add_argument("--rates", type=_parse_rates, default=None, help="start:stop:step or comma list")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--reps", type=int, default=1)
    ap.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    ap.add_argument("--out", type=Path, default=None, help="CSV path (stdout if omitted)")
    ap.add_argument("--trace", default=None, help="print a hop trace for a flow or packet (flow#seq) instead")
    ap.add_argument("--rate", type=float, default=None, help="traffic rate for --trace runs")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = _resolve_scenario(args.scenario)
        seed = spec.seed if args.seed is None else args.seed
        modes = ["os", "of"] if args.mode == "both" else [args.mode]
        if args.trace:
            mode = modes[0]
            rtt = args.rtt_ms[0] if args.rtt_ms else None
            log = run(scn.build(spec, mode, rtt=rtt, rate=args.rate, seed=seed), spec.until)
            text = emit_trace(log, args.trace, tags=spec.kind == "failure_recovery")
        else:
            if spec.kind == "consistency":
                rates, fn, cols, note = CONSISTENCY_RATES, run_consistency_sweep, CONSISTENCY_COLUMNS, CONSISTENCY_NOTE
            elif spec.kind == "failure_recovery":
                rates, fn, cols, note = FAILURE_RATES, run_failure_sweep, FAILURE_COLUMNS, FAILURE_NOTE
            else:
                raise ConfigError(f"no sweep defined for {spec.kind} scenarios")
            sweep = Sweep(spec, args.rates or rates, args.rtt_ms or [r * US_PER_MS for r in RTTS_MS],
                          modes, args.reps, seed)
            text = to_csv(fn(sweep, jobs=args.jobs), cols, note)
    except (StatefulSdnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
