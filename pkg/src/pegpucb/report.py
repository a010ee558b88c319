"""Aggregate traces across seeds and write regret/histogram CSVs and SVG figures."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .harness import AggregationError, RunTrace

REGRET_HEADER = ("algorithm", "t", "mean_cum_regret", "stderr")
HISTOGRAM_HEADER = ("algorithm", "prior_id", "fraction")


@dataclass
class AggregateReport:
    """Mean cumulative regret with standard errors, and prior-selection fractions.

    ``histogram`` only lists algorithms that credit a prior at each step.
    """

    mean: Dict[str, np.ndarray] = field(default_factory=dict)
    stderr: Dict[str, np.ndarray] = field(default_factory=dict)
    num_seeds: Dict[str, int] = field(default_factory=dict)
    histogram: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def algorithms(self) -> List[str]:
        return list(self.mean)

    def final(self, algorithm: str):
        return float(self.mean[algorithm][-1]), float(self.stderr[algorithm][-1])

    def to_dict(self) -> dict:
        return {
            "mean": {a: v.tolist() for a, v in self.mean.items()},
            "stderr": {a: v.tolist() for a, v in self.stderr.items()},
            "num_seeds": dict(self.num_seeds),
            "histogram": self.histogram,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateReport":
        return cls(
            {a: np.asarray(v, dtype=float) for a, v in d["mean"].items()},
            {a: np.asarray(v, dtype=float) for a, v in d["stderr"].items()},
            dict(d.get("num_seeds", {})),
            {a: dict(h) for a, h in d.get("histogram", {}).items()},
        )


def aggregate(traces: Sequence[RunTrace]) -> AggregateReport:
    groups: Dict[str, List[RunTrace]] = {}
    for tr in traces:
        groups.setdefault(tr.algorithm, []).append(tr)
    report = AggregateReport()
    for alg, runs in groups.items():
        lengths = {len(r) for r in runs}
        if len(lengths) != 1:
            raise AggregationError(f"{alg}: traces have different horizons {sorted(lengths)}")
        curves = np.vstack([r.cum_regret for r in runs])
        n = len(runs)
        report.mean[alg] = curves.mean(axis=0)
        report.stderr[alg] = curves.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(curves.shape[1])
        report.num_seeds[alg] = n

        chosen = [p for r in runs for p in r.chosen_priors]
        if chosen and all(p is not None for p in chosen):
            ids = list(runs[0].prior_ids) or sorted(set(chosen))
            counts = {pid: 0 for pid in ids}
            for p in chosen:
                counts[p] = counts.get(p, 0) + 1
            report.histogram[alg] = {pid: c / len(chosen) for pid, c in counts.items()}
    return report


def write_report_json(report: AggregateReport, path):
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report_json(path) -> AggregateReport:
    return AggregateReport.from_dict(json.loads(Path(path).read_text()))


def _write_csv(path: Path, header, rows):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit(report: AggregateReport, fmt: str, path) -> List[Path]:
    """Write ``regret`` and ``histogram`` outputs into directory ``path``.

    ``fmt`` is ``"csv"`` or ``"svg"``.
    """
    out = Path(path)
    if fmt == "csv":
        regret = [
            (alg, t, repr(float(m)), repr(float(s)))
            for alg in report.algorithms
            for t, (m, s) in enumerate(zip(report.mean[alg], report.stderr[alg]), start=1)
        ]
        hist = [(alg, pid, repr(float(f))) for alg, h in report.histogram.items() for pid, f in h.items()]
        files = [out / "regret.csv", out / "histogram.csv"]
        _write_csv(files[0], REGRET_HEADER, regret)
        _write_csv(files[1], HISTOGRAM_HEADER, hist)
        return files
    if fmt == "svg":
        return _plot(report, out)
    raise ValueError(f"unknown format {fmt!r}")


def read_csv_report(path) -> AggregateReport:
    """Inverse of ``emit(report, "csv", path)``."""
    path = Path(path)
    report = AggregateReport()
    rows: Dict[str, list] = {}
    with open(path / "regret.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["algorithm"], []).append((int(row["t"]), float(row["mean_cum_regret"]), float(row["stderr"])))
    for alg, vals in rows.items():
        vals.sort()
        report.mean[alg] = np.array([v[1] for v in vals])
        report.stderr[alg] = np.array([v[2] for v in vals])
    with open(path / "histogram.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            report.histogram.setdefault(row["algorithm"], {})[row["prior_id"]] = float(row["fraction"])
    return report


def _plot(report: AggregateReport, out: Path) -> List[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # Fixed metadata keeps the SVG bytes deterministic.
    meta = {"Date": None, "Creator": None}
    plt.rcParams["svg.hashsalt"] = "pegpucb"
    out.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4))
    for alg in report.algorithms:
        m, s = report.mean[alg], report.stderr[alg]
        t = np.arange(1, len(m) + 1)
        ax.plot(t, m, label=alg)
        ax.fill_between(t, m - s, m + s, alpha=0.25)
    ax.set_xlabel("timestep")
    ax.set_ylabel("cumulative regret")
    ax.legend()
    fig.tight_layout()
    regret_path = out / "regret.svg"
    fig.savefig(regret_path, format="svg", metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    algs = list(report.histogram)
    ids: List[str] = []
    for h in report.histogram.values():
        ids.extend(p for p in h if p not in ids)
    width = 0.8 / max(len(algs), 1)
    x = np.arange(len(ids))
    for k, alg in enumerate(algs):
        ax.bar(x + k * width, [report.histogram[alg].get(p, 0.0) for p in ids], width, label=alg)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(ids, rotation=45 if max((len(p) for p in ids), default=0) > 3 else 0)
    ax.set_xlabel("prior")
    ax.set_ylabel("fraction of steps")
    if algs:
        ax.legend()
    fig.tight_layout()
    hist_path = out / "histogram.svg"
    fig.savefig(hist_path, format="svg", metadata=meta)
    plt.close(fig)
    return [regret_path, hist_path]
