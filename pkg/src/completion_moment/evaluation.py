"""Frame accuracy and relative distance, per sequence and aggregated per action.

Ground truth and predictions are compared as *effective* moments: the first
post-completion frame, with incomplete sequences (and incomplete
predictions) placed at T + 1.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .features import LabeledSequence, resample_sequence
from .inference import LEARNT, UNIFORM, predict
from .model import ModelParams


def _check(yhat: int, tau: int, T: int):
    if T < 1:
        raise ValueError("sequence length must be >= 1")
    if not (1 <= yhat <= T + 1 and 1 <= tau <= T + 1):
        raise ValueError(f"moments must lie in 1..{T + 1}, got yhat={yhat}, tau={tau}")


def sequence_accuracy(yhat: int, tau: int, T: int) -> float:
    """Fraction of frames put on the correct side of the completion moment."""
    _check(yhat, tau, T)
    # frames before both moments plus frames at or after both
    correct = (min(yhat, tau) - 1) + (T + 1 - max(yhat, tau))
    return correct / T


def relative_distance(yhat: int, tau: int, T: int) -> float:
    _check(yhat, tau, T)
    return abs(yhat - tau) / T


@dataclass
class EvalRecord:
    id: str
    action: str
    T: int
    tau_eff: int
    yhat_eff: int
    accuracy: float
    rd: float

    @classmethod
    def build(cls, id: str, action: str, T: int, tau_eff: int, yhat_eff: int) -> "EvalRecord":
        return cls(id, action, T, tau_eff, yhat_eff,
                   sequence_accuracy(yhat_eff, tau_eff, T), relative_distance(yhat_eff, tau_eff, T))

    @property
    def incomplete(self) -> bool:
        return self.tau_eff == self.T + 1


@dataclass
class ReportRow:
    action: str
    count: int
    incomplete_pct: float
    accuracy: dict[str, float] = field(default_factory=dict)
    rd: dict[str, float] = field(default_factory=dict)


@dataclass
class Report:
    rows: list[ReportRow]
    total: ReportRow
    methods: tuple[str, ...]


def ground_truth(seq: LabeledSequence) -> int:
    if seq.label == 0:
        return seq.length + 1
    if seq.tau is None:
        raise ConfigError(f"{seq.id}: complete sequence without a ground-truth completion moment")
    return seq.tau


def _threads() -> int:
    env = os.environ.get("CM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate_sequences(sequences: Sequence[LabeledSequence], params: ModelParams,
                       attention: str = LEARNT, mode: str | None = None) -> list[EvalRecord]:
    """Predict and score every sequence after resampling it to the model's length.

    Records come back ordered by id whatever the worker count.
    """
    missing = [s.id for s in sequences if s.label == 1 and s.tau is None]
    if missing:
        raise ConfigError(f"evaluation needs ground truth for complete sequences: {missing[:5]}")

    def one(seq: LabeledSequence) -> EvalRecord:
        rs = resample_sequence(seq, params.length)
        pred, _ = predict(params, rs.features, attention, mode)
        T = rs.length
        return EvalRecord.build(rs.id, rs.action, T, ground_truth(rs), pred.effective(T))

    ordered = sorted(sequences, key=lambda s: s.id)
    workers = min(_threads(), len(ordered)) or 1
    if workers == 1:
        return [one(s) for s in ordered]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, ordered))


def aggregate(records_by_method: dict[str, list[EvalRecord]]) -> Report:
    """Per-action means of accuracy and RD for every method, plus an overall row."""
    methods = tuple(records_by_method)
    if not methods:
        raise ConfigError("no methods to report")
    first = records_by_method[methods[0]]
    if not first:
        raise ConfigError("no records to report")
    actions = sorted({r.action for r in first})

    def row(action: str | None) -> ReportRow:
        sel = [r for r in first if action is None or r.action == action]
        out = ReportRow("total" if action is None else action, len(sel),
                        100.0 * sum(r.incomplete for r in sel) / len(sel))
        for m in methods:
            rs = [r for r in records_by_method[m] if action is None or r.action == action]
            out.accuracy[m] = float(np.mean([r.accuracy for r in rs]))
            out.rd[m] = float(np.mean([r.rd for r in rs]))
        return out

    return Report([row(a) for a in actions], row(None), methods)


def evaluate(sequences: Sequence[LabeledSequence], params: ModelParams, mode: str | None = None,
             attention: Sequence[str] = (UNIFORM, LEARNT), actions: Sequence[str] | None = None
             ) -> tuple[dict[str, list[EvalRecord]], Report]:
    if actions is not None:
        sequences = [s for s in sequences if s.action in set(actions)]
        if not sequences:
            raise ConfigError(f"no sequences for action(s) {list(actions)}")
    if not sequences:
        raise ConfigError("empty evaluation set")
    records = {att: evaluate_sequences(sequences, params, att, mode) for att in attention}
    return records, aggregate(records)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

METHOD_TAGS = {UNIFORM: "U", LEARNT: "Att"}


def report_columns(report: Report) -> list[str]:
    tags = [METHOD_TAGS.get(m, m) for m in report.methods]
    return ["action", "incomplete%"] + [f"accuracy({t})" for t in tags] + [f"RD({t})" for t in tags]


def _row_values(row: ReportRow, methods) -> list[float]:
    return [row.incomplete_pct] + [row.accuracy[m] for m in methods] + [row.rd[m] for m in methods]


def write_report_csv(report: Report, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(report_columns(report))
        for row in [*report.rows, report.total]:
            w.writerow([row.action, *(f"{v:.6f}" for v in _row_values(row, report.methods))])


def read_report_csv(path) -> list[dict[str, object]]:
    with open(path, newline="") as fh:
        return [
            {k: (v if k == "action" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def format_report(report: Report) -> str:
    cols = report_columns(report)
    body = [[row.action, *(f"{v:.4f}" for v in _row_values(row, report.methods))]
            for row in [*report.rows, report.total]]
    widths = [max(len(c), *(len(r[i]) for r in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cols, widths)))]
    lines.append("-" * len(lines[0]))
    for k, r in enumerate(body):
        if k == len(body) - 1:
            lines.append("-" * len(lines[0]))
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def emit_report(report: Report, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and an aligned text table ``<path>.txt``."""
    base = Path(path)
    if not report.rows:
        raise ConfigError("report has no action rows")
    csv_path, txt_path = base.with_suffix(".csv"), base.with_suffix(".txt")
    try:
        write_report_csv(report, csv_path)
        txt_path.write_text(format_report(report))
    except OSError as exc:
        raise OSError(f"could not write report to {base}: {exc}") from exc
    return csv_path, txt_path


RECORD_COLUMNS = ("method", "id", "action", "T", "tau_eff", "yhat_eff", "accuracy", "rd")


def write_records_csv(records_by_method: dict[str, list[EvalRecord]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for method, records in records_by_method.items():
            for r in records:
                d = asdict(r)
                w.writerow([method, d["id"], d["action"], d["T"], d["tau_eff"], d["yhat_eff"],
                            repr(d["accuracy"]), repr(d["rd"])])
