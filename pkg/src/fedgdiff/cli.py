"""Command-line entry point: ``fedgdiff run | report | gen-toy-data``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import ConfigError, dump_config, load_config
from .federation import PIPELINE_RUNNERS, PhaseError, RunResult
from .toy import toy_graphset, write_tu_dataset
from .wire import CommLedger

BANDWIDTHS = {"lan_seconds": 45e6, "wan_seconds": 1e6}  # bits per second
REPORT_COLUMNS = ["run", "method", "num_clients", "rounds", "total_bytes", "bytes_per_round",
                  "auc", "accuracy", "lan_seconds", "wan_seconds"]


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def write_artifacts(result: RunResult, cfg, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    result.ledger.to_csv(out / "ledger.csv")
    (out / "metrics.json").write_text(metrics_json(result.metrics))
    with (out / "loss_traces.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "client", "series", "step", "value"])
        for source, client, series, step, value in result.traces:
            w.writerow([source, client, series, step, repr(float(value))])
    if result.checkpoints:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        for name, data in sorted(result.checkpoints.items()):
            (ckpt / name).write_bytes(data)
    return out


def run_experiment(config_path, out, seed: int | None = None, clients: int | None = None):
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if clients is not None:
        cfg.data.clients = clients
    cfg.validate()
    result = PIPELINE_RUNNERS[cfg.pipeline](cfg)
    write_artifacts(result, cfg, Path(out))
    return result


def report_rows(run_dirs: list) -> list[dict]:
    rows = []
    for d in map(Path, run_dirs):
        if not (d / "ledger.csv").exists():
            raise FileNotFoundError(f"{d}: no ledger.csv")
        if not (d / "metrics.json").exists():
            raise FileNotFoundError(f"{d}: no metrics.json")
        ledger = CommLedger.from_csv(d / "ledger.csv")
        m = json.loads((d / "metrics.json").read_text())
        comm = m.get("communication", {})
        total = comm.get("headline_bytes", ledger.total())
        rows.append({
            "run": d.name,
            "method": m.get("pipeline", "?"),
            "num_clients": m.get("num_clients"),
            "rounds": len(ledger.rounds()),
            "total_bytes": total,
            "bytes_per_round": ";".join(f"{k}:{v}" for k, v in comm.get("bytes_by_round", {}).items()),
            "auc": m.get("global", {}).get("auc", ""),
            "accuracy": m.get("global", {}).get("accuracy", ""),
            **{name: round(total * 8 / bps, 6) for name, bps in BANDWIDTHS.items()},
        })
    return rows


def emit_report(run_dirs: list, out_csv=None, stream=None) -> list[dict]:
    stream = stream or sys.stdout
    rows = report_rows(run_dirs)
    if out_csv is not None:
        with Path(out_csv).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in REPORT_COLUMNS}
    print("  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS), file=stream)
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in REPORT_COLUMNS), file=stream)
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedgdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment and write its artifacts")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None, help="override the master seed")
    r.add_argument("--clients", type=int, default=None, help="override the number of clients")
    rep = sub.add_parser("report", help="tabulate one or more run directories")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--out", default="report.csv")
    toy = sub.add_parser("gen-toy-data", help="write the triangle / 4-clique corpus in TU format")
    toy.add_argument("--out", default="data")
    toy.add_argument("--per-class", type=int, default=100)
    toy.add_argument("--name", default="TOY")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        try:
            run_experiment(args.config, args.out, args.seed, args.clients)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        except PhaseError as exc:
            print(f"run failed: {exc}", file=sys.stderr)
            return 1
        print(f"artifacts written to {args.out}")
        return 0
    if args.command == "report":
        try:
            emit_report(args.runs, args.out)
        except (FileNotFoundError, ValueError, KeyError) as exc:
            print(f"report error: {exc}", file=sys.stderr)
            return 1
        return 0
    path = write_tu_dataset(toy_graphset(args.per_class, args.name), Path(args.out) / args.name, args.name)
    print(f"toy dataset written to {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
