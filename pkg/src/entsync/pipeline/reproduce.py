"""Figure-level orchestration: sweeps and long runs written as plot-ready CSV."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

from .. import __version__
from ..linkbudget import (
    SUBBLOCK_COLUMNS,
    SWEEP_COLUMNS,
    TradeoffConfig,
    distance_for_loss,
    loss_row,
    subblock_row,
    tradeoff_point,
)
from .config import RunConfig, config_hash
from .stats import STABILITY_COLUMNS, stability_run

TARGETS = ("fig3a", "fig3b", "fig5a", "fig6")

FIG3A_COLUMNS = ("loss_db", "S", "pairs_per_subblock", "sigma_mu_ps", "penalty_ps", "sigma_tsec_ps", "below_s_min")
FIG3B_COLUMNS = ("loss_db", "S", "sigma_tsec_ps", "delta_t_ps", "qber", "skr_bps")


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_table(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence],
                meta: dict[str, object] | None = None) -> int:
    """UTF-8 CSV with ``# key: value`` metadata lines, a header and ``\\n`` endings."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in r])
            n += 1
    return n


def read_table(path: str | Path) -> tuple[dict[str, str], list[str], list[list[str]]]:
    meta: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    body = []
    for line in lines:
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            meta[k] = v
        elif line:
            body.append(line)
    rows = list(csv.reader(body))
    return meta, rows[0], rows[1:]


def metadata(cfg: RunConfig, target: str, rows: int) -> dict[str, object]:
    return {
        "generator": f"entsync {__version__}",
        "target": target,
        "seed": cfg.run.seed,
        "config_sha256": config_hash(cfg),
        "rows": rows,
    }


def _sweep(tc: TradeoffConfig, points: list[tuple[float, int, float]], workers: int):
    def run(p):
        return tradeoff_point(tc, p[0], p[1], p[2])

    if workers <= 1:
        out = [run(p) for p in points]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(run, points))
    return sorted(out, key=lambda p: (p.loss_db, p.S))


def _distance(loss: float, tc: TradeoffConfig) -> float:
    try:
        return distance_for_loss(loss, tc.link)
    except ValueError:
        return math.nan


def subblock_sweep(cfg: RunConfig, workers: int = 1):
    tc = cfg.tradeoff_config()
    points = [(float(l), int(S), _distance(float(l), tc))
              for l in cfg.sweep.fig3_losses_db for S in cfg.sweep.S]
    return _sweep(tc, points, workers)


def loss_sweep(cfg: RunConfig, workers: int = 1):
    tc = cfg.tradeoff_config()
    points = [(float(l), tc.subblocks, _distance(float(l), tc)) for l in cfg.sweep.loss_db]
    return _sweep(tc, points, workers)


def reproduce(cfg: RunConfig, target: str, out_dir: str | Path, workers: int = 1) -> list[Path]:
    """Write the CSV table(s) of one figure target into ``out_dir``."""
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; choose from {', '.join(TARGETS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if target in ("fig3a", "fig3b"):
        pts = subblock_sweep(cfg, workers)
        full = [subblock_row(p) for p in pts]
        cols = FIG3A_COLUMNS if target == "fig3a" else FIG3B_COLUMNS
        idx = [SUBBLOCK_COLUMNS.index(c) for c in cols]
        rows = [tuple(r[i] for i in idx) for r in full]
        path = out / f"{target}.csv"
        write_table(path, cols, rows, metadata(cfg, target, len(rows)))
        written.append(path)
    elif target == "fig5a":
        rows = [loss_row(p) for p in loss_sweep(cfg, workers)]
        path = out / "fig5a.csv"
        write_table(path, SWEEP_COLUMNS, rows, metadata(cfg, target, len(rows)))
        written.append(path)
    else:
        sync = cfg.sync_config()
        report = stability_run(cfg.scenario_model(), sync)
        rows = report.rows(sync.block_s)
        path = out / "fig6.csv"
        write_table(path, STABILITY_COLUMNS, rows, metadata(cfg, target, len(rows)))
        summary = list(report.summary().items())
        spath = out / "fig6_summary.csv"
        write_table(spath, ("quantity", "value"), summary, metadata(cfg, "fig6_summary", len(summary)))
        written += [path, spath]
    return written
