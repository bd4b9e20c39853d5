"""Report rendering: deterministic JSON, readable markdown tables, flat CSV.

JSON and CSV carry full float precision; markdown rounds to two decimals and
shows AUROC as a percentage. Failed or unavailable cells render as an em dash
with a footnote. Identical reports always render to identical bytes.
"""
from __future__ import annotations

import csv
import io
import json

from .harness import CellResult, EvalReport

FORMATS = ("json", "md", "csv")


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def report_from_json(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))


def _fmt(value, percent: bool = False) -> str:
    if value is None:
        return "—"
    return f"{value * 100.0:.2f}" if percent else f"{value:.2f}"


def _fmt_stats(stats: dict | None, percent: bool = False) -> str:
    if not stats:
        return "—"
    scale = 100.0 if percent else 1.0
    return f"{stats['mean'] * scale:.2f} ± {stats['std'] * scale:.2f}"


def _detector_columns(report: EvalReport) -> list[str]:
    seen: list[str] = []
    for cell in report.cells:
        if cell.detector is not None and cell.detector not in seen:
            seen.append(cell.detector)
    return seen


def _contexts(report: EvalReport) -> list[tuple[str, int]]:
    seen: list[tuple[str, int]] = []
    for cell in report.cells:
        key = (cell.split, cell.seed)
        if key not in seen:
            seen.append(key)
    return seen


def _cell_lookup(report: EvalReport) -> dict:
    return {(c.split, c.seed, c.detector): c for c in report.cells}


def report_to_markdown(report: EvalReport) -> str:
    detectors = _detector_columns(report)
    contexts = _contexts(report)
    lookup = _cell_lookup(report)
    footnotes: list[str] = []

    def metric_cell(cell: CellResult | None, attr: str, percent: bool) -> str:
        if cell is None:
            return "—"
        value = getattr(cell, attr)
        if cell.status != "ok" and value is None:
            footnotes.append(
                f"{cell.split}/seed {cell.seed}/{cell.detector}: {cell.reason}"
            )
        return _fmt(value, percent)

    def any_cell(split: str, seed: int) -> CellResult | None:
        for c in report.cells:
            if c.split == split and c.seed == seed:
                return c
        return None

    lines = ["# Evaluation report", ""]

    lines += ["## Semantic shift: ID accuracy and OOD-detection AUROC (%)", ""]
    header = ["split", "seed", "ID acc %"] + detectors
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for split, seed in contexts:
        base = any_cell(split, seed)
        row = [split, str(seed), _fmt(base.id_accuracy if base else None)]
        for det in detectors:
            row.append(metric_cell(lookup.get((split, seed, det)), "s_oodd_auroc", True))
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")

    lines += ["## Covariate shift: accuracy and misclassification PRR (%)", ""]
    lines.append("| " + " | ".join(["split", "seed", "shift acc %"] + detectors) + " |")
    lines.append("|" + "---|" * (3 + len(detectors)))
    for split, seed in contexts:
        base = any_cell(split, seed)
        row = [split, str(seed), _fmt(base.cov_accuracy if base else None)]
        for det in detectors:
            row.append(metric_cell(lookup.get((split, seed, det)), "mc_oodd_prr", False))
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")

    lines += ["## Aggregates over splits × seeds (mean ± std)", ""]
    lines.append("| scorer | S-OODD AUROC % | MC-OODD PRR |")
    lines.append("|---|---|---|")
    for det in detectors:
        agg = report.aggregates.get(det, {})
        lines.append(
            f"| {det} | {_fmt_stats(agg.get('s_oodd_auroc'), percent=True)} "
            f"| {_fmt_stats(agg.get('mc_oodd_prr'))} |"
        )
    model = report.aggregates.get("model", {})
    if model:
        lines.append("")
        lines.append(
            f"Model balanced accuracy: ID {_fmt_stats(model.get('id_accuracy'))}, "
            f"covariate {_fmt_stats(model.get('cov_accuracy'))}."
        )

    if footnotes:
        lines += ["", "### Failed cells", ""]
        seen = set()
        for note in footnotes:
            if note not in seen:
                seen.add(note)
                lines.append(f"- {note}")
    lines.append("")
    return "\n".join(lines)


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["split", "seed", "detector", "metric", "value", "status", "reason"]
    )
    metrics = (
        "id_accuracy",
        "s_oodd_auroc",
        "cov_accuracy",
        "mc_oodd_prr",
        "mc_oodd_prr_tie_randomized",
    )
    for cell in report.cells:
        for metric in metrics:
            value = getattr(cell, metric)
            writer.writerow(
                [
                    cell.split,
                    cell.seed,
                    cell.detector if cell.detector is not None else "",
                    metric,
                    repr(value) if value is not None else "",
                    cell.status,
                    cell.reason or "",
                ]
            )
        if cell.per_dump_prr:
            for name, value in cell.per_dump_prr.items():
                writer.writerow(
                    [
                        cell.split,
                        cell.seed,
                        cell.detector if cell.detector is not None else "",
                        f"prr[{name}]",
                        repr(value) if value is not None else "",
                        cell.status,
                        cell.reason or "",
                    ]
                )
    return buf.getvalue()


def emit_report(report: EvalReport, fmt: str) -> str:
    """Render a report as 'json', 'md', or 'csv'."""
    if fmt == "json":
        return report_to_json(report)
    if fmt == "md":
        return report_to_markdown(report)
    if fmt == "csv":
        return report_to_csv(report)
    raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")
