"""Resource sweeps over the per-party row count.

Each configuration runs m parties and a dealer, either as separate OS
processes talking TCP (the default, via the CLI) or as threads over
loopback channels.  Byte and round counts are exact and deterministic;
wall time is reported but never asserted.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import socket
import subprocess
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ingest
from .errors import ChildFailure
from .pipelines import PipelineConfig, run_pipeline

log = logging.getLogger(__name__)


@dataclass
class BenchRow:
    task: str
    mode: str
    n: int
    d: int
    m: int
    bytes_sent: int
    rounds: int
    wall_time: float
    peak_ring_elements: int


COLUMNS = [f.name for f in fields(BenchRow)]


@dataclass
class Fit:
    slope: float
    intercept: float
    r2: float


def party_data(n: int, d: int, m: int, seed: int) -> list[np.ndarray]:
    """Seeded synthetic rows for each party, clipped into [-8, 8]."""
    spectrum = np.linspace(3.0, 0.5, d)
    return [np.clip(ingest.make_spectrum_data(n, d, seed=seed * 1000 + i, spectrum=spectrum), -8, 8)
            for i in range(m)]


def parse_range(text: str) -> list[int]:
    """``100:800:100`` (inclusive) or ``100,200,400``."""
    if ":" in text:
        start, stop, step = (int(x) for x in text.split(":"))
        return list(range(start, stop + 1, step))
    return [int(x) for x in text.split(",") if x]


def _free_ports(k: int) -> list[int]:
    socks = [socket.socket() for _ in range(k)]
    try:
        for s in socks:
            s.bind(("127.0.0.1", 0))
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def _row_from_metrics(task, mode, n, d, m, metrics: Sequence[dict]) -> BenchRow:
    return BenchRow(task, mode, n, d, m,
                    bytes_sent=sum(int(x["bytes_sent"]) for x in metrics),
                    rounds=max(int(x["rounds"]) for x in metrics),
                    wall_time=max(float(x["wall_time"]) for x in metrics),
                    peak_ring_elements=max(int(x["peak_ring_elements"]) for x in metrics))


def run_threads(task: str, mode: str, n: int, d: int = 6, m: int = 2, cfg: PipelineConfig | None = None,
                seed: int = 0, frac_bits: int = 20) -> BenchRow:
    results = run_pipeline(task, mode, party_data(n, d, m, seed), cfg, frac_bits, seed)
    return _row_from_metrics(task, mode, n, d, m, [r.metrics.as_dict() for r in results])


def run_processes(task: str, mode: str, n: int, d: int = 6, m: int = 2, cfg: PipelineConfig | None = None,
                  seed: int = 0, frac_bits: int = 20, timeout: float = 3600.0) -> BenchRow:
    """Spawn m party processes plus a dealer and collect their metrics files."""
    cfg = cfg or PipelineConfig()
    with tempfile.TemporaryDirectory(prefix="smpctd-bench-") as tmp:
        tmpdir = Path(tmp)
        ports = _free_ports(m + 1)
        peers = ",".join(f"{i}=127.0.0.1:{ports[i]}" for i in range(m))
        dealer = f"127.0.0.1:{ports[m]}"
        session = f"bench-{task}-{mode}-{n}-{seed}"
        common = ["--task", task, "--mode", mode, "--parties", str(m), "--frac-bits", str(frac_bits),
                  "--session-id", session, "--dealer", dealer, "--seed", str(seed), "--connect-timeout", "60"]
        tuning = ["--iters", str(cfg.iters), "--shift-iters", str(cfg.shift_iters),
                  "--max-abs", str(cfg.max_abs), "--row-bound", str(cfg.row_bound),
                  "--chunk-rows", str(cfg.chunk_rows), "--newton-rounds", str(cfg.newton_rounds),
                  "--init-rounds", str(cfg.init_rounds)]
        cmds = [[sys.executable, "-m", "smpctd", "run", "--role", "dealer", *common]]
        for i, rows in enumerate(party_data(n, d, m, seed)):
            path = tmpdir / f"party{i}.csv"
            ingest.write_csv(path, rows, precision=8)
            cmds.append([sys.executable, "-m", "smpctd", "run", "--role", "party", "--party-id", str(i),
                         "--peers", peers, "--data", str(path), "--metrics-out", str(tmpdir / f"metrics{i}.json"),
                         *common, *tuning])
        logs = [open(tmpdir / f"log{i}.txt", "w+") for i in range(len(cmds))]
        env = dict(os.environ)
        src = str(Path(__file__).resolve().parents[1])
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        procs = [subprocess.Popen(c, stdout=lg, stderr=subprocess.STDOUT, env=env) for c, lg in zip(cmds, logs)]
        failed = False
        try:
            for p in procs:
                try:
                    failed |= p.wait(timeout=timeout) != 0
                except subprocess.TimeoutExpired:
                    failed = True
        finally:
            for p in procs:
                if p.poll() is None:
                    p.kill()
                    p.wait()
        text = []
        for i, lg in enumerate(logs):
            lg.seek(0)
            text.append(f"--- {'dealer' if i == 0 else f'party {i - 1}'} ---\n{lg.read()}")
            lg.close()
        if failed:
            raise ChildFailure(f"bench run {task}/{mode}/n={n} failed", "\n".join(text))
        metrics = [json.loads((tmpdir / f"metrics{i}.json").read_text()) for i in range(m)]
    return _row_from_metrics(task, mode, n, d, m, metrics)


def sweep(task: str, mode: str, n_list: Sequence[int], repetitions: int = 1, d: int = 6, m: int = 2,
          cfg: PipelineConfig | None = None, seed: int = 0, launcher: str = "process",
          frac_bits: int = 20, peak_budget: int | None = None) -> list[BenchRow]:
    """Run every n in turn.  With ``peak_budget``, the first run whose peak
    live ring element count exceeds it is dropped and larger n are skipped."""
    run = run_processes if launcher == "process" else run_threads
    rows = []
    for n in sorted(n_list):
        for _ in range(repetitions):
            row = run(task, mode, n, d, m, cfg, seed=seed, frac_bits=frac_bits)
            if peak_budget is not None and row.peak_ring_elements > peak_budget:
                log.warning("%s/%s: n=%d needs %d live ring elements (budget %d); stopping sweep",
                            task, mode, n, row.peak_ring_elements, peak_budget)
                return rows
            rows.append(row)
    return rows


def write_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def read_csv(path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            out.append(BenchRow(rec["task"], rec["mode"], int(rec["n"]), int(rec["d"]), int(rec["m"]),
                                int(rec["bytes_sent"]), int(rec["rounds"]), float(rec["wall_time"]),
                                int(rec["peak_ring_elements"])))
        return out


def fit_line(xs: Sequence[float], ys: Sequence[float]) -> Fit:
    """Least-squares line with coefficient of determination."""
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return Fit(float(slope), float(intercept), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0)


def is_constant(values: Sequence[float]) -> bool:
    return max(values) - min(values) == 0


def summarize(rows: Sequence[BenchRow]) -> list[str]:
    """One line per (task, mode): fit of bytes vs n and the constancy verdict."""
    lines = []
    for key in sorted({(r.task, r.mode) for r in rows}):
        sel = [r for r in rows if (r.task, r.mode) == key]
        fit = fit_line([r.n for r in sel], [r.bytes_sent for r in sel])
        const = all(is_constant([getattr(r, c) for r in sel]) for c in ("bytes_sent", "rounds"))
        lines.append(f"{key[0]}/{key[1]}: slope={round(fit.slope, 1) + 0.0:.1f} B/row r2={fit.r2:.4f} "
                     f"{'CONSTANT' if const else 'VARYING'}")
    return lines
