"""Search-space accounting and training-curve bookkeeping."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .diffcore import DomainError


@dataclass(frozen=True)
class SpaceSizeReport:
    n: int
    m: int
    ordered_size: int
    invariant_size: int
    ratio: int


def space_sizes(n: int, m: int) -> SpaceSizeReport:
    """Sizes of the ordered (m-permutations of n) and invariant (m-combinations of n) spaces."""
    if not 1 <= m <= n:
        raise DomainError(f"need 1 <= m <= n, got n={n}, m={m}")
    ordered = math.perm(n, m)
    invariant = math.comb(n, m)
    ratio, rem = divmod(ordered, invariant)
    assert rem == 0
    return SpaceSizeReport(n, m, ordered, invariant, ratio)


def reduction_factor(m: int) -> int:
    if m < 1:
        raise DomainError(f"need m >= 1, got {m}")
    return math.factorial(m)


def format_space_report(report: SpaceSizeReport) -> str:
    rows = [
        ("n", report.n),
        ("m", report.m),
        ("ordered_size", report.ordered_size),
        ("invariant_size", report.invariant_size),
        ("ratio", report.ratio),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricRecord:
    run_id: str
    seed: int
    iteration: int
    env_steps: int
    mean_return: float
    std_return: float
    mean_length: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    wall_seconds: float


METRIC_FIELDS = tuple(f.name for f in fields(MetricRecord))
_INT_FIELDS = {"seed", "iteration", "env_steps"}


def _format_value(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(records: Iterable[MetricRecord], path: str | Path) -> Path:
    """Append records to a CSV file, writing the header only when the file is new."""
    path = Path(path)
    try:
        fresh = not path.exists() or path.stat().st_size == 0
        if not fresh:
            with path.open() as fh:
                header = fh.readline().strip().split(",")
            if tuple(header) != METRIC_FIELDS:
                raise MetricsParseError(f"{path}: existing header {header} does not match metric schema")
        with path.open("a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(METRIC_FIELDS)
            for rec in records:
                writer.writerow([_format_value(v) for v in asdict(rec).values()])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


class MetricsParseError(ValueError):
    pass


def read_metrics(path: str | Path) -> list[MetricRecord]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_FIELDS:
            raise MetricsParseError(f"{path}:1: unexpected header {header}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(METRIC_FIELDS):
                raise MetricsParseError(f"{path}:{lineno}: expected {len(METRIC_FIELDS)} columns, got {len(row)}")
            try:
                values = {
                    name: (row[i] if name == "run_id" else int(row[i]) if name in _INT_FIELDS else float(row[i]))
                    for i, name in enumerate(METRIC_FIELDS)
                }
            except ValueError as exc:
                raise MetricsParseError(f"{path}:{lineno}: {exc}") from exc
            out.append(MetricRecord(**values))
    return out


# ---------------------------------------------------------------- summaries

ENCODER_NAMES = ("attention", "deepsets", "ordered")


def encoder_from_run_id(run_id: str) -> str:
    for token in run_id.replace("_", "-").split("-"):
        if token in ENCODER_NAMES:
            return token
    return "unknown"


@dataclass
class RunSummary:
    run_id: str
    encoder: str
    iterations: int
    final_mean_return: float
    iters_to_threshold: int | None
    relative_efficiency: float
    below_threshold: bool


def iterations_to_threshold(returns: Sequence[float], iterations: Sequence[int], threshold: float, smooth: int = 1) -> int | None:
    """First iteration whose trailing ``smooth``-window mean return reaches ``threshold``."""
    r = np.asarray(returns, dtype=np.float64)
    for i in range(len(r)):
        window = r[max(0, i - smooth + 1) : i + 1]
        window = window[np.isfinite(window)]
        if window.size and window.mean() >= threshold:
            return int(iterations[i])
    return None


def summarize_runs(
    paths: Sequence[str | Path],
    window: int = 20,
    threshold: float = 0.5,
    smooth: int = 5,
    encoder_of: Callable[[str], str] = encoder_from_run_id,
) -> list[RunSummary]:
    """One row per run id found in ``paths``.

    ``relative_efficiency`` is the fastest iterations-to-threshold in the table
    divided by this run's (1.0 for the fastest, 0.0 when never reached).
    """
    if not paths:
        raise ValueError("summarize_runs needs at least one metrics file")
    runs: dict[str, list[MetricRecord]] = {}
    for p in paths:
        for rec in read_metrics(p):
            runs.setdefault(rec.run_id, []).append(rec)

    rows = []
    for run_id, recs in runs.items():
        recs = sorted(recs, key=lambda r: r.iteration)
        returns = [r.mean_return for r in recs]
        tail = np.asarray(returns[-window:])
        tail = tail[np.isfinite(tail)]
        final = float(tail.mean()) if tail.size else float("nan")
        hit = iterations_to_threshold(returns, [r.iteration for r in recs], threshold, smooth)
        rows.append(
            RunSummary(run_id, encoder_of(run_id), len(recs), final, hit, 0.0, not final >= threshold)
        )
    reached = [r.iters_to_threshold for r in rows if r.iters_to_threshold is not None]
    if reached:
        best = max(min(reached), 1)
        for r in rows:
            if r.iters_to_threshold is not None:
                r.relative_efficiency = best / max(r.iters_to_threshold, 1)
    return rows


_SUMMARY_COLUMNS = (
    "run_id",
    "encoder",
    "iterations",
    "final_mean_return",
    "iters_to_threshold",
    "relative_efficiency",
    "below_threshold",
)


def _summary_cells(row: RunSummary) -> list[str]:
    return [
        row.run_id,
        row.encoder,
        str(row.iterations),
        f"{row.final_mean_return:.4f}",
        "not reached" if row.iters_to_threshold is None else str(row.iters_to_threshold),
        f"{row.relative_efficiency:.3f}",
        "yes" if row.below_threshold else "no",
    ]


def format_summary(rows: Sequence[RunSummary]) -> str:
    table = [list(_SUMMARY_COLUMNS)] + [_summary_cells(r) for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(_SUMMARY_COLUMNS))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in table)


def write_summary_csv(rows: Sequence[RunSummary], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_SUMMARY_COLUMNS)
        for r in rows:
            writer.writerow(_summary_cells(r))
