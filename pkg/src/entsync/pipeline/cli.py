"""Command-line entry point: ``entsync {simulate,sync,sweep,bench,reproduce}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

from .. import __version__
from ..linkbudget import SUBBLOCK_COLUMNS, SWEEP_COLUMNS, loss_row, subblock_row, tradeoff_point
from ..timetags import write_binary, write_pps_csv
from ..syncproto import run_two_stage
from .bench import BENCH_COLUMNS, bench_correlator, scaling_ratios
from .config import ConfigError, RunConfig, config_hash, load_config, save_config
from .reproduce import TARGETS, loss_sweep, metadata, reproduce, subblock_sweep, write_table
from .scenario import simulate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("entsync")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration (defaults: built-in reference values)")
    common.add_argument("--seed", type=_u64, help="override run.seed")
    common.add_argument("--out", type=Path, help="parent directory for run outputs (default: run.out_dir)")
    common.add_argument("--workers", type=_positive, help="concurrent sweep workers (default: run.workers)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="entsync", description=__doc__)
    p.add_argument("--version", action="version", version=f"entsync {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write seeded local tag streams and PPS trains")
    s.add_argument("--duration", type=_positive, help="override run.duration_s")
    s.add_argument("--csv", action="store_true", help="also write text tag streams")

    s = sub.add_parser("sync", parents=[common], help="simulate, then run PPS alignment and TSEC")
    s.add_argument("--duration", type=_positive, help="override run.duration_s")
    s.add_argument("--no-tsec", action="store_true", help="ablation: skip the correction stage")

    s = sub.add_parser("sweep", parents=[common], help="link-budget and sub-block trade-off sweeps")
    s.add_argument("--loss", type=float, help="evaluate a single point at this loss (dB), print JSON")
    s.add_argument("--S", type=_positive, help="sub-block count for --loss (default: protocol.S)")

    s = sub.add_parser("bench", parents=[common], help="correlation micro-benchmark")
    s.add_argument("--n-a", type=int, default=144_000)
    s.add_argument("--n-b", type=int, default=133_000)
    s.add_argument("--trials", type=_positive, default=10)
    s.add_argument("--scaling", action="store_true", help="also time 2x, 4x, 8x sizes")

    s = sub.add_parser("reproduce", parents=[common], help="write a figure's CSV tables")
    s.add_argument("--target", required=True, choices=TARGETS + ("all",))
    return p


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.workers is not None:
        run = replace(run, workers=args.workers)
    if getattr(args, "duration", None) is not None:
        run = replace(run, duration_s=args.duration)
    cfg = replace(cfg, run=run)
    cfg.validate()
    return cfg


def run_dir(cfg: RunConfig, parent: Path | None) -> Path:
    """``<parent>/<config hash[:12]>-<UTC timestamp>``, created fresh."""
    base = Path(parent) if parent is not None else Path(cfg.run.out_dir)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = base / f"{config_hash(cfg)[:12]}-{stamp}"
    path.mkdir(parents=True, exist_ok=False)
    save_config(cfg, path / "config.yaml")
    return path


def cmd_simulate(cfg: RunConfig, out: Path, args) -> None:
    sc = simulate(cfg.scenario_model())
    write_binary(sc.stream_a, out / "stream_A.etts")
    write_binary(sc.stream_b, out / "stream_B.etts")
    if args.csv:
        from ..timetags import write_csv

        write_csv(sc.stream_a, out / "stream_A.csv")
        write_csv(sc.stream_b, out / "stream_B.csv")
    write_pps_csv(sc.pps_a, out / "pps_A.csv")
    write_pps_csv(sc.pps_b, out / "pps_B.csv")
    print(f"A: {len(sc.stream_a)} events, B: {len(sc.stream_b)} events")


def cmd_sync(cfg: RunConfig, out: Path, args) -> None:
    sc = simulate(cfg.scenario_model())
    sync = cfg.sync_config(on_block_error="skip", keep_coincidences=False,
                           **({"tsec_enabled": False} if args.no_tsec else {}))
    res = run_two_stage(sc.stream_a, sc.stream_b, sc.pps_a, sc.pps_b, sync, sc.truth)
    res.to_csv(out / "sync.csv")
    for k, v in res.summary().items():
        print(f"{k}: {v:.6g}")


def cmd_sweep(cfg: RunConfig, out: Path | None, args) -> None:
    workers = cfg.run.workers
    pts = loss_sweep(cfg, workers)
    rows = [loss_row(p) for p in pts]
    write_table(out / "sweep_loss.csv", SWEEP_COLUMNS, rows, metadata(cfg, "sweep_loss", len(rows)))
    pts = subblock_sweep(cfg, workers)
    rows = [subblock_row(p) for p in pts]
    write_table(out / "sweep_subblocks.csv", SUBBLOCK_COLUMNS, rows, metadata(cfg, "sweep_subblocks", len(rows)))


def cmd_point(cfg: RunConfig, args) -> None:
    tc = cfg.tradeoff_config()
    p = tradeoff_point(tc, args.loss, args.S if args.S is not None else tc.subblocks)
    doc = asdict(p)
    print(json.dumps(doc, indent=2, default=float))


def cmd_bench(cfg: RunConfig, out: Path, args) -> None:
    seed = cfg.run.seed
    if args.scaling:
        results, ratios = scaling_ratios(args.n_a, args.n_b, trials=args.trials, seed=seed)
    else:
        results, ratios = [bench_correlator(args.n_a, args.n_b, cfg.protocol.n_bins,
                                            cfg.protocol.bin_width_ps, args.trials, seed)], []
    write_table(out / "bench.csv", BENCH_COLUMNS, [r.row() for r in results],
                {"generator": f"entsync {__version__}", "target": "bench", "seed": seed})
    for r in results:
        print(f"{r.n_a}/{r.n_b} events: {r.mean_ms:.3f} +/- {r.std_ms:.3f} ms, "
              f"{r.events_per_s / 1e6:.1f} Mevents/s")
    for f, q in enumerate(ratios):
        print(f"time ratio {2**f}x -> {2**(f + 1)}x: {q:.2f}")


def cmd_reproduce(cfg: RunConfig, out: Path, args) -> None:
    targets = TARGETS if args.target == "all" else (args.target,)
    for t in targets:
        for path in reproduce(cfg, t, out, cfg.run.workers):
            print(path)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"entsync: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "sweep" and args.loss is not None:
            cmd_point(cfg, args)
            return EXIT_OK
        out = run_dir(cfg, args.out)
        print(f"run directory: {out}")
        handler = {
            "simulate": cmd_simulate,
            "sync": cmd_sync,
            "sweep": cmd_sweep,
            "bench": cmd_bench,
            "reproduce": cmd_reproduce,
        }[args.command]
        handler(cfg, out, args)
    except ConfigError as exc:
        print(f"entsync: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"entsync: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
