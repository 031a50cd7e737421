"""Artifact output: record files, plot data, the method comparison report.

Every CSV written here is also rendered as a PNG figure next to it.
Figures are a convenience for inspection; the CSV files carry the data.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .driver import METHOD_LABELS, LMMError, SolutionRecord, find_sequence, monitor_theory  # noqa: E402
from .grid import Mesh, build_mesh, read_field, write_field  # noqa: E402

log = logging.getLogger(__name__)

__all__ = [
    "COMPARE_METHODS",
    "ComparisonRow",
    "ComparisonReport",
    "write_csv",
    "write_record",
    "write_summary",
    "export_plotdata",
    "export_field_file",
    "compare_methods",
    "write_comparison",
]

COMPARE_METHODS = ("sd-armijo", "sd-strongwolfe", "cg-strongwolfe")
TRACE_COLUMNS = (
    "k", "energy", "grad_norm", "sup_residual", "t", "tau", "vperp_norm", "dist_to_L",
    "first_order_res", "alpha", "evals", "rule", "fallback", "energy_change",
)
BAR_METRICS = ("iterations", "phi_evals", "linear_solves", "wall_time")


def _fmt(x):
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else ("nan" if math.isnan(x) else ("inf" if x > 0 else "-inf"))
    return x


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
    """Write dict rows with a header; missing keys become empty cells."""
    path = Path(path)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
    tmp.replace(path)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _write_json(path, obj) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    tmp.replace(path)
    return path


# -- figures ------------------------------------------------------------------


def _plot_field(path, mesh: Mesh, values: np.ndarray, title: str) -> Path:
    U = mesh.to_grid(values, fill=np.nan)
    fig, ax = plt.subplots(figsize=(5.5, 4.5) if mesh.nx == mesh.ny else (8, 4))
    lim = float(np.nanmax(np.abs(U))) if np.any(np.isfinite(U)) else 1.0
    lim = lim or 1.0
    extent = (mesh.x1[0], mesh.x1[-1], mesh.x2[0], mesh.x2[-1])
    im = ax.imshow(U, origin="lower", extent=extent, cmap="RdBu_r", vmin=-lim, vmax=lim)
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.set_title(title)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def _plot_history(path, trace: Sequence[dict], title: str) -> Path:
    k = [row["k"] for row in trace]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    a1.plot(k, [row["energy"] for row in trace], "o-", ms=3)
    a1.set_xlabel("iteration")
    a1.set_ylabel("energy")
    a2.semilogy(k, [max(row["grad_norm"], 1e-300) for row in trace], "o-", ms=3, label="gradient norm")
    a2.semilogy(k, [max(row["sup_residual"], 1e-300) for row in trace], "s-", ms=3, label="sup residual")
    a2.set_xlabel("iteration")
    a2.legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def _plot_bars(path, rows: Sequence[dict], metric: str, title: str) -> Path:
    labels = list(dict.fromkeys(r["label"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(labels) + 2), 4))
    x = np.arange(len(labels))
    for j, m in enumerate(methods):
        vals = []
        for lab in labels:
            hit = [r for r in rows if r["label"] == lab and r["method"] == m and r["metric"] == metric]
            vals.append(hit[0]["value"] if hit else np.nan)
        ax.bar(x + (j - (len(methods) - 1) / 2) * width, vals, width, label=METHOD_LABELS.get(m, m))
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel(metric)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


# -- records --------------------------------------------------------------------


def _field_extra(rec: SolutionRecord) -> dict:
    cfg = rec.config
    return {
        "label": rec.label,
        "domain": cfg.get("domain"),
        "resolution": cfg.get("resolution"),
        "energy": rec.energy,
        "config_hash": rec.config_hash,
    }


def export_plotdata(rec: SolutionRecord, out_dir, plots: bool = True) -> list[Path]:
    """``(x1, x2, u)`` triples and the convergence history, as CSV and PNG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = rec.problem.mesh
    written = [_write_xyz(out / f"{rec.label}_field.csv", mesh, rec.u)]
    written.append(write_csv(out / f"{rec.label}_history.csv", rec.trace, TRACE_COLUMNS))
    if plots:
        written.append(_plot_field(out / f"{rec.label}_field.png", mesh, rec.u, f"{rec.label}: E = {rec.energy:.4f}"))
        if rec.trace:
            written.append(_plot_history(out / f"{rec.label}_history.png", rec.trace, rec.label))
    return written


def _write_xyz(path, mesh: Mesh, values) -> Path:
    values = mesh.check(values)
    rows = [{"x1": float(x[0]), "x2": float(x[1]), "u": float(u)} for x, u in zip(mesh.node_coords, values)]
    return write_csv(path, rows, ("x1", "x2", "u"))


def export_field_file(path, out_dir, plots: bool = True) -> list[Path]:
    """Plot data for a solution field file written by :func:`write_record`.

    The mesh is rebuilt from the domain and resolution stored in the
    header; a ``<label>_trace.csv`` next to the field file, when present,
    is exported as the convergence history.
    """
    path = Path(path)
    header, _ = read_field(path)
    if header.get("domain") is None or header.get("resolution") is None:
        raise ValueError(f"{path}: header lacks domain/resolution, cannot rebuild the mesh")
    mesh = build_mesh(header["domain"], int(header["resolution"]))
    _, values = read_field(path, mesh)
    label = header.get("label") or path.stem
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [_write_xyz(out / f"{label}_field.csv", mesh, values)]
    trace_file = path.with_name(f"{label}_trace.csv")
    trace = []
    if trace_file.exists():
        with open(trace_file, newline="") as fh:
            for row in csv.DictReader(fh):
                trace.append({k: _parse_cell(v) for k, v in row.items()})
        written.append(write_csv(out / f"{label}_history.csv", trace, TRACE_COLUMNS))
    if plots:
        title = f"{label}: E = {header['energy']:.4f}" if "energy" in header else label
        written.append(_plot_field(out / f"{label}_field.png", mesh, values, title))
        if trace:
            written.append(_plot_history(out / f"{label}_history.png", trace, label))
    return written


def _parse_cell(s: str):
    if s == "":
        return math.nan
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_record(rec: SolutionRecord, out_dir, plots: bool = True) -> list[Path]:
    """Solution field, metadata JSON and the three per-iteration traces."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lab = rec.label
    field_path = out / f"{lab}.field"
    write_field(field_path, rec.problem.mesh, rec.u, _field_extra(rec))
    meta = rec.metadata()
    meta["theory"] = {k: v for k, v in monitor_theory(rec).items() if k not in ("partial_sums", "dist_to_L")}
    meta["problem_notes"] = list(getattr(rec.problem, "notes", ()))
    written = [field_path, _write_json(out / f"{lab}.json", meta)]
    written.append(write_csv(out / f"{lab}_trace.csv", rec.trace, TRACE_COLUMNS))
    written.append(write_csv(out / f"{lab}_linesearch.csv", rec.linesearch_trace,
                             ("iter", "eval", "alpha", "phi", "dphi", "rule_flags")))
    written.append(write_csv(out / f"{lab}_directions.csv", rec.direction_trace))
    written += export_plotdata(rec, out, plots=plots)
    return written


def _failure_entry(err: LMMError) -> dict:
    rec = err.record
    entry = {"status": err.status, "converged": False, "error": str(err)}
    if rec is not None:
        entry.update(energy=rec.energy, grad_norm=rec.grad_norm, sup_residual=rec.sup_residual,
                     iterations=rec.iterations, phi_evals=rec.phi_evals)
    return entry


def write_summary(results: Iterable, out_dir, plots: bool = True) -> dict:
    """Write every record of a plan run plus ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for item in results:
        if isinstance(item, SolutionRecord):
            write_record(item, out, plots=plots)
            entries[item.label] = {
                "status": item.status,
                "converged": item.converged,
                "energy": item.energy,
                "grad_norm": item.grad_norm,
                "sup_residual": item.sup_residual,
                "iterations": item.iterations,
                "phi_evals": item.phi_evals,
                "linear_solves": item.linear_solves,
                "wall_time": item.wall_time,
                "support": list(item.support_ids),
            }
        else:
            label = str(item).split(":", 1)[0]
            if item.record is not None:
                label = item.record.label
                write_record(item.record, out / "failed", plots=plots)
            entries[label] = _failure_entry(item)
    summary = {"entries": entries, "all_converged": all(e["converged"] for e in entries.values())}
    _write_json(out / "summary.json", summary)
    return summary


# -- method comparison ----------------------------------------------------------


@dataclass
class ComparisonRow:
    label: str
    method: str
    status: str
    converged: bool
    iterations: int
    phi_evals: int
    linear_solves: int
    wall_time: float
    energy: float

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "method": self.method,
            "method_name": METHOD_LABELS.get(self.method, self.method),
            "status": self.status,
            "converged": int(self.converged),
            "iterations": self.iterations,
            "phi_evals": self.phi_evals,
            "linear_solves": self.linear_solves,
            "wall_time": self.wall_time,
            "energy": self.energy,
        }


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)
    results: dict = field(default_factory=dict)  # method -> list of records / errors

    def cell(self, label: str, method: str) -> ComparisonRow | None:
        for r in self.rows:
            if r.label == label and r.method == method:
                return r
        return None

    @property
    def labels(self) -> list[str]:
        return list(dict.fromkeys(r.label for r in self.rows))

    def converged_everywhere(self) -> list[str]:
        """Labels converged under every compared method."""
        methods = list(dict.fromkeys(r.method for r in self.rows))
        return [lab for lab in self.labels if all((c := self.cell(lab, m)) and c.converged for m in methods)]

    def fewer_evals(self, fast: str = "cg-strongwolfe", slow: str = "sd-armijo") -> tuple[int, int]:
        """``(wins, rows)``: rows where ``fast`` needs strictly fewer evaluations."""
        rows = self.converged_everywhere()
        wins = sum(self.cell(lab, fast).phi_evals < self.cell(lab, slow).phi_evals for lab in rows)
        return wins, len(rows)

    def bar_rows(self) -> list[dict]:
        out = []
        for r in self.rows:
            for m in BAR_METRICS:
                out.append({"label": r.label, "method": r.method, "metric": m, "value": getattr(r, m)})
        return out


def _row_from(item, method: str) -> ComparisonRow:
    if isinstance(item, SolutionRecord):
        rec, status, label = item, item.status, item.label
    else:
        rec, status = item.record, item.status
        label = rec.label if rec is not None else str(item).split(":", 1)[0]
    if rec is None:
        return ComparisonRow(label, method, status, False, 0, 0, 0, math.nan, math.nan)
    return ComparisonRow(
        label=label,
        method=method,
        status=status,
        converged=isinstance(item, SolutionRecord) and item.converged,
        iterations=rec.iterations,
        phi_evals=rec.phi_evals,
        linear_solves=rec.linear_solves,
        wall_time=rec.wall_time,
        energy=rec.energy,
    )


def compare_methods(config, methods: Sequence[str] = COMPARE_METHODS, problem=None) -> ComparisonReport:
    """Run the plan of ``config`` (a :class:`ConfigFile`) under each method preset."""
    report = ComparisonReport()
    for m in methods:
        t0 = time.perf_counter()
        results = find_sequence(config.with_method(m).plan(), problem=problem)
        log.info("%s: plan finished in %.1f s", m, time.perf_counter() - t0)
        report.results[m] = results
        report.rows.extend(_row_from(item, m) for item in results)
    return report


def write_comparison(report: ComparisonReport, out_dir, plots: bool = True) -> list[Path]:
    """``comparison.csv``, the long-format bar-chart data and their figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.as_dict() for r in report.rows]
    written = [write_csv(out / "comparison.csv", rows)]
    bars = report.bar_rows()
    written.append(write_csv(out / "comparison_bars.csv", bars, ("label", "method", "metric", "value")))
    wins, n = report.fewer_evals()
    summary = {
        "methods": list(report.results),
        "converged_everywhere": report.converged_everywhere(),
        "cg_fewer_evals_than_sd_armijo": {"rows": n, "wins": wins},
    }
    written.append(_write_json(out / "comparison_summary.json", summary))
    if plots and rows:
        for metric in BAR_METRICS:
            written.append(_plot_bars(out / f"comparison_{metric}.png", bars, metric, metric.replace("_", " ")))
    return written

