"""Command line entry point: ``smpctd <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, dealer, ingest, oracle, planner
from .errors import SmpcError
from .pipelines import MODEL_TYPES, MODES, TASKS, PipelineConfig, run_pipeline
from .transport import PartyConfig


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _peers(text: str) -> dict[int, tuple[str, int]]:
    out = {}
    for item in filter(None, text.split(",")):
        pid, _, addr = item.partition("=")
        out[int(pid)] = _addr(addr)
    return out


def _write_json(path, obj) -> None:
    if path == "-":
        print(json.dumps(obj, indent=2))
    else:
        Path(path).write_text(json.dumps(obj, indent=2))


def _pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--chunk-rows", type=int, default=ingest.DEFAULT_CHUNK_ROWS)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--shift-iters", type=int, default=300)
    p.add_argument("--newton-rounds", type=int, default=15)
    p.add_argument("--init-rounds", type=int, default=30, help="Newton rounds from a public start")
    p.add_argument("--max-abs", type=float, default=16.0)
    p.add_argument("--row-bound", type=int, default=1 << 14,
                   help="public upper bound on the total row count")
    p.add_argument("--header", action="store_true", help="skip one header line per CSV file")
    p.add_argument("--frac-bits", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)


def _config(a) -> PipelineConfig:
    return PipelineConfig(max_abs=a.max_abs, row_bound=a.row_bound, iters=a.iters, shift_iters=a.shift_iters,
                          newton_rounds=a.newton_rounds, init_rounds=a.init_rounds, chunk_rows=a.chunk_rows, header=a.header)


def cmd_run(a) -> int:
    from .runner import run_dealer, run_party

    if a.role == "dealer":
        if not a.dealer:
            raise SystemExit("--dealer address is required for the dealer role")
        served = run_dealer(_addr(a.dealer), a.parties, a.frac_bits, a.session_id, a.seed, a.connect_timeout)
        print(f"dealer served {served} records")
        return 0
    if a.role == "local":
        if len(a.data) != a.parties:
            raise SystemExit(f"--role local needs one --data per party ({a.parties})")
        results = run_pipeline(a.task, a.mode, a.data, _config(a), a.frac_bits, a.seed)
        first = results[0]
        metrics = [r.metrics.as_dict() for r in results]
    else:
        if a.party_id is None or not a.peers or len(a.data) != 1:
            raise SystemExit("--role party needs --party-id, --peers and exactly one --data")
        peers = _peers(a.peers)
        cfg = PartyConfig(a.party_id, a.parties, peers.get(a.party_id),
                          {k: v for k, v in peers.items() if k != a.party_id},
                          _addr(a.dealer) if a.dealer else None, a.session_id, a.frac_bits, a.connect_timeout)
        first = run_party(cfg, a.task, a.mode, a.data[0], _config(a), a.seed, a.triples)
        metrics = first.metrics.as_dict()
    model = first.value.to_dict()
    if a.model_out:
        _write_json(a.model_out, model)
    else:
        print(json.dumps(model, indent=2))
    if a.metrics_out:
        _write_json(a.metrics_out, metrics)
    if a.reveal_log:
        with open(a.reveal_log, "w") as fh:
            for rec in first.reveal_log:
                fh.write(rec.to_json() + "\n")
    return 0


def cmd_dealer(a) -> int:
    spec = {"mul": lambda s: dealer.mul_spec(s, s), "matmul": lambda s: dealer.matmul_spec(*s),
            "trunc": lambda s: dealer.trunc_spec(a.frac_bits, s)}[a.kind](tuple(a.shape))
    dealer.dealer_generate(spec, a.count, a.parties, a.seed, a.out_dir, a.frac_bits)
    print(f"wrote {a.count} {a.kind} records for {a.parties} parties to {a.out_dir}")
    return 0


def cmd_audit(a) -> int:
    plan = planner.load_plan(a.plan)
    report = planner.audit(plan, a.parties, a.params)
    print(report)
    return 0 if report.verdict else 1


def cmd_plan(a) -> int:
    plan = planner.SHIPPED_PLANS[a.task](a.parties, a.dims)
    if a.out:
        planner.save_plan(plan, a.out)
    else:
        print(plan.to_json())
    return 0


def cmd_oracle(a) -> int:
    data = ingest.load_matrix(a.data, header=a.header)
    _write_json(a.model_out or "-", oracle.oracle_pipeline(a.task, data).to_dict())
    return 0


def cmd_compare(a) -> int:
    cls = MODEL_TYPES[a.task]
    model = cls.from_dict(json.loads(Path(a.model).read_text()))
    ref = cls.from_dict(json.loads(Path(a.reference).read_text()))
    tol = oracle.Tolerances(values_rel=a.values_rel, loadings_abs=a.loadings_abs)
    report = oracle.compare(model, ref, tol)
    print(report)
    print("PASS" if report.passed else "FAIL: " + ", ".join(report.failures))
    return 0 if report.passed else 1


def cmd_bench(a) -> int:
    cfg = _config(a)
    rows = []
    for mode in a.modes.split(","):
        rows += bench.sweep(a.task, mode, bench.parse_range(a.n), a.repetitions, a.dims, a.parties, cfg,
                            a.seed, a.launcher, a.frac_bits, a.peak_budget)
    bench.write_csv(rows, a.out)
    for line in bench.summarize(rows):
        print(line)
    return 0


def cmd_gen_data(a) -> int:
    spectrum = [float(x) for x in a.spectrum.split(",")] if a.spectrum else None
    rows = ingest.make_spectrum_data(a.rows * a.parties, a.cols, a.seed, spectrum)
    if a.clip:
        rows = np.clip(rows, -a.clip, a.clip)
    if a.parties == 1:
        ingest.write_csv(a.out, rows)
        return 0
    stem = Path(a.out)
    for i, part in enumerate(ingest.split_parties(rows, a.parties)):
        ingest.write_csv(stem.with_name(f"{stem.stem}.party{i}{stem.suffix or '.csv'}"), part)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smpctd", description="Decomposed secure PCA/SVD/FA over additive sharing")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a pipeline (one party, the dealer, or all parties locally)")
    _pipeline_args(p)
    p.add_argument("--mode", choices=MODES, default="decomposed")
    p.add_argument("--role", choices=("party", "dealer", "local"), default="local")
    p.add_argument("--party-id", type=int)
    p.add_argument("--parties", type=int, default=2)
    p.add_argument("--data", action="append", default=[], help="CSV path (repeat per party for --role local)")
    p.add_argument("--peers", help="id=host:port list covering every party")
    p.add_argument("--dealer", help="dealer host:port")
    p.add_argument("--triples", help="read triples from a file instead of the online dealer")
    p.add_argument("--session-id", default="smpctd")
    p.add_argument("--connect-timeout", type=float, default=10.0)
    p.add_argument("--metrics-out")
    p.add_argument("--model-out")
    p.add_argument("--reveal-log", help="write the reveal log as JSON lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("dealer", help="write per-party triple files")
    p.add_argument("--kind", choices=("mul", "matmul", "trunc"), required=True)
    p.add_argument("--shape", type=int, nargs="+", required=True, help="operand shape, or p q r for matmul")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--parties", type=int, default=2)
    p.add_argument("--frac-bits", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dealer)

    p = sub.add_parser("audit", help="audit a plan JSON against the equation-count rule")
    p.add_argument("plan")
    p.add_argument("--parties", type=int, required=True)
    p.add_argument("--params", type=int, required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("plan", help="print a shipped pipeline plan as JSON")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--parties", type=int, default=2)
    p.add_argument("--dims", type=int, default=6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("oracle", help="reference model from pooled plaintext data")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--header", action="store_true")
    p.add_argument("--model-out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("compare", help="compare a model JSON against a reference JSON")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("model")
    p.add_argument("reference")
    p.add_argument("--values-rel", type=float, default=1e-3)
    p.add_argument("--loadings-abs", type=float, default=1e-2)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="sweep row counts and record traffic")
    _pipeline_args(p)
    p.add_argument("--modes", default="decomposed,traditional")
    p.add_argument("--n", default="100:800:100", help="start:stop:step (inclusive) or a comma list")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--parties", type=int, default=2)
    p.add_argument("--dims", type=int, default=6)
    p.add_argument("--launcher", choices=("process", "thread"), default="process")
    p.add_argument("--out", default="results.csv")
    p.add_argument("--peak-budget", type=int, help="stop a sweep once peak live ring elements exceed this")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="seeded synthetic Gaussian CSV")
    p.add_argument("--rows", type=int, required=True, help="rows per party")
    p.add_argument("--cols", type=int, default=6)
    p.add_argument("--parties", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spectrum", help="comma-separated covariance eigenvalues")
    p.add_argument("--clip", type=float, help="clip values into [-clip, clip]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SmpcError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        logs = getattr(exc, "logs", "")
        if logs:
            print(logs, file=sys.stderr)
        return 2
