"""Run reports: metric tables from evaluation output and loss/CMC plots from
the step log."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import ValidationError  # noqa: E402
from .evaluation import MetricsReport  # noqa: E402

REPORT_RANKS = (1, 10, 20)


def load_metrics_log(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {lineno}: bad log record: {exc}") from exc
    return records


def format_report_table(report: MetricsReport) -> str:
    """Fixed-width metric table with the standard column set (rank columns
    beyond the computed CMC range are dropped)."""
    ranks = [k for k in REPORT_RANKS if k <= len(report.cmc)]
    header = [f"Rank-{k}" for k in ranks] + ["mAP", "mINP"]
    values = [report.rank_at(k) for k in ranks] + [report.map, report.minp]
    proto = report.protocol or {}
    title = " ".join(f"{k}={v}" for k, v in sorted(proto.items()))
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(f"{h:>8s}" for h in header))
    lines.append("  ".join(f"{v * 100:8.2f}" for v in values))
    if report.excluded_queries:
        lines.append(f"excluded queries (no valid positive): {report.excluded_queries}")
    return "\n".join(lines)


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None, "Date": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def write_loss_plots(records, out_dir) -> list:
    """One loss-curve image per stage present in the step log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = sorted({r["stage"] for r in records})
    written = []
    for stage in stages:
        rows = [r for r in records if r["stage"] == stage]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(range(len(rows)), [r["loss"] for r in rows], lw=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(f"stage {stage} training loss")
        fig.tight_layout()
        path = out_dir / f"loss_{stage}.png"
        _save(fig, path)
        written.append(path)
    return written


def write_cmc_plot(report: MetricsReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ks = range(1, len(report.cmc) + 1)
    ax.plot(ks, [v * 100 for v in report.cmc], marker="o", ms=3, lw=1.0)
    ax.set_xlabel("rank k")
    ax.set_ylabel("matching rate (%)")
    ax.set_ylim(0, 102)
    ax.set_title("cumulative matching characteristic")
    fig.tight_layout()
    _save(fig, path)
    return Path(path)
